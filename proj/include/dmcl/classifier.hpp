#pragma once

// Multi-scale convolutional binary classifier.
//
// Each block is [conv3x3 -> norm -> ReLU -> conv3x3/2 -> norm -> ReLU]; the
// blocks are followed by global average pooling and a dense layer producing a
// single logit. The output of every block is exported as a tap, so the default
// 8/16/32/64 configuration yields one feature map per scale, taken just
// before the channel count grows again.
//
// Convolutions feeding a normalization layer carry no bias; the norm shift
// subsumes it.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmcl/layers.hpp"
#include "dmcl/random.hpp"
#include "dmcl/tensor.hpp"

namespace dmcl {

struct Architecture {
  std::size_t image_size = 32;
  std::vector<std::size_t> channels{8, 16, 32, 64};

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class ParamKind : std::uint8_t { conv_weight, norm_scale, norm_shift, dense_weight, dense_bias };

struct ParamBlock {
  std::string name;
  ParamKind kind;
  std::size_t offset;
  Shape shape;
  std::size_t size() const { return element_count(shape); }
};

// Tap identifiers are block indices; they must be strictly increasing.
struct TapSpec {
  std::vector<std::size_t> blocks;

  static TapSpec all(const Architecture& arch) {
    TapSpec t;
    for (std::size_t b = 0; b < arch.channels.size(); ++b) t.blocks.push_back(b);
    return t;
  }
};

enum class Pass { update, inference };

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Classifier {
 public:
  struct NormLayer {
    std::size_t scale, shift;       // offsets into params
    std::size_t mean, var;          // offsets into running stats
    std::size_t channels;
  };
  struct Block {
    ConvGeometry conv_a, conv_b;
    std::size_t weights_a, weights_b;  // offsets into params
    NormLayer norm_a, norm_b;
  };

  struct BlockCache {
    Tensor<T> input;
    NormCache<T> norm_a, norm_b;
    Tensor<T> act_a, act_b;
  };
  struct ForwardCache {
    std::vector<BlockCache> blocks;
    Tensor<T> pooled;
  };
  struct ForwardResult {
    std::vector<T> logits;
    std::vector<Tensor<T>> taps;  // one N x C_l x H_l x W_l tensor per tap
  };

  Classifier() : Classifier(Architecture{}) {}

  explicit Classifier(Architecture arch, NormSettings norm = {}) : arch_(std::move(arch)), norm_(norm) {
    if (arch_.channels.empty()) throw ModelError("architecture needs at least one block");
    if (arch_.image_size < 1) throw ModelError("image size must be positive");
    std::size_t offset = 0, stat = 0;
    std::size_t cin = 1;
    std::size_t extent = arch_.image_size;
    auto add = [&](std::string name, ParamKind kind, Shape shape) {
      layout_.push_back({std::move(name), kind, offset, shape});
      const std::size_t at = offset;
      offset += element_count(shape);
      return at;
    };
    auto add_norm = [&](const std::string& name, std::size_t c) {
      NormLayer n{};
      n.channels = c;
      n.scale = add(name + ".scale", ParamKind::norm_scale, {c});
      n.shift = add(name + ".shift", ParamKind::norm_shift, {c});
      n.mean = stat;
      n.var = stat + c;
      stat += 2 * c;
      return n;
    };
    for (std::size_t b = 0; b < arch_.channels.size(); ++b) {
      const std::size_t cout = arch_.channels[b];
      const std::string tag = "block" + std::to_string(b);
      Block blk{};
      blk.conv_a = {cin, cout, 3, 1, 1};
      blk.conv_b = {cout, cout, 3, 2, 1};
      blk.weights_a = add(tag + ".conv_a", ParamKind::conv_weight, {cout, cin, 3, 3});
      blk.norm_a = add_norm(tag + ".norm_a", cout);
      blk.weights_b = add(tag + ".conv_b", ParamKind::conv_weight, {cout, cout, 3, 3});
      blk.norm_b = add_norm(tag + ".norm_b", cout);
      blocks_.push_back(blk);
      extent = blk.conv_b.out_extent(blk.conv_a.out_extent(extent));
      tap_extents_.push_back(extent);
      cin = cout;
    }
    dense_weights_ = add("dense.weight", ParamKind::dense_weight, {1, cin});
    dense_bias_ = add("dense.bias", ParamKind::dense_bias, {1});
    params_.assign(offset, T{0});
    running_.assign(stat, T{0});
    for (const Block& blk : blocks_)
      for (const NormLayer* n : {&blk.norm_a, &blk.norm_b}) {
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(n->scale), n->channels, T{1});
        std::fill_n(running_.begin() + static_cast<std::ptrdiff_t>(n->var), n->channels, T{1});
      }
  }

  // He-normal convolution weights, unit norm scale, zero shift and bias.
  void initialize(Rng& rng) {
    for (const ParamBlock& p : layout_) {
      if (p.kind == ParamKind::conv_weight || p.kind == ParamKind::dense_weight) {
        const double fan_in = static_cast<double>(p.size() / p.shape[0]);
        const double stddev = std::sqrt((p.kind == ParamKind::conv_weight ? 2.0 : 1.0) / fan_in);
        for (std::size_t i = 0; i < p.size(); ++i) params_[p.offset + i] = static_cast<T>(stddev * rng.normal());
      }
    }
    ++version_;
  }

  const Architecture& architecture() const noexcept { return arch_; }
  const NormSettings& norm_settings() const noexcept { return norm_; }
  const std::vector<ParamBlock>& layout() const noexcept { return layout_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::size_t block_count() const noexcept { return blocks_.size(); }

  std::span<T> parameters() noexcept { return params_; }
  std::span<const T> parameters() const noexcept { return params_; }
  std::span<T> running_statistics() noexcept { return running_; }
  std::span<const T> running_statistics() const noexcept { return running_; }

  // Incremented whenever parameters change through this interface.
  std::uint64_t version() const noexcept { return version_; }
  void mark_updated() noexcept { ++version_; }

  bool norms_frozen() const noexcept { return norms_frozen_; }
  void freeze_norms() noexcept { norms_frozen_ = true; }
  void set_norms_frozen(bool frozen) noexcept { norms_frozen_ = frozen; }

  // 1 for parameters an update must not touch (norm scale/shift while frozen).
  std::vector<std::uint8_t> frozen_mask() const {
    std::vector<std::uint8_t> mask(params_.size(), 0);
    if (!norms_frozen_) return mask;
    for (const ParamBlock& p : layout_)
      if (p.kind == ParamKind::norm_scale || p.kind == ParamKind::norm_shift)
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(p.offset), p.size(), std::uint8_t{1});
    return mask;
  }

  NormMode mode_for(Pass pass) const noexcept {
    if (pass == Pass::inference) return NormMode::eval;
    return norms_frozen_ ? NormMode::frozen : NormMode::train;
  }

  TapSpec default_taps() const { return TapSpec::all(arch_); }
  std::vector<std::size_t> tap_channels() const { return arch_.channels; }
  std::vector<std::size_t> tap_extents() const { return tap_extents_; }

  ForwardResult forward(const Tensor<T>& batch, NormMode mode, ForwardCache* cache = nullptr) {
    check_input(batch);
    ForwardResult result;
    if (cache) cache->blocks.assign(blocks_.size(), {});
    Tensor<T> x = batch;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const Block& blk = blocks_[b];
      BlockCache* bc = cache ? &cache->blocks[b] : nullptr;
      Tensor<T> h = conv2d_forward<T>(x, param_span(blk.weights_a, blk.conv_a.weight_count()), {}, blk.conv_a);
      h = norm_forward<T>(h, norm_view(blk.norm_a), mode, norm_, bc ? &bc->norm_a : nullptr);
      Tensor<T> a = relu_forward(std::move(h));
      h = conv2d_forward<T>(a, param_span(blk.weights_b, blk.conv_b.weight_count()), {}, blk.conv_b);
      h = norm_forward<T>(h, norm_view(blk.norm_b), mode, norm_, bc ? &bc->norm_b : nullptr);
      Tensor<T> out = relu_forward(std::move(h));
      if (bc) {
        bc->input = std::move(x);
        bc->act_a = std::move(a);
        bc->act_b = out;
      }
      result.taps.push_back(out);
      x = std::move(out);
    }
    Tensor<T> pooled = global_avg_pool_forward(x);
    const std::size_t c = pooled.dim(1);
    Tensor<T> logits = dense_forward<T>(pooled, param_span(dense_weights_, c), param_span(dense_bias_, 1));
    if (cache) cache->pooled = std::move(pooled);
    result.logits.assign(logits.values().begin(), logits.values().end());
    return result;
  }

  ForwardResult forward(const Tensor<T>& batch, Pass pass, ForwardCache* cache = nullptr) {
    return forward(batch, mode_for(pass), cache);
  }

  // Gradient of sum_n dlogits[n] * logit_n with respect to every parameter.
  std::vector<T> backward(const ForwardCache& cache, std::span<const T> dlogits) const {
    std::vector<T> grads(params_.size(), T{0});
    const std::size_t n_batch = dlogits.size();
    const std::size_t c = cache.pooled.dim(1);
    Tensor<T> g_logits({n_batch, 1}, std::vector<T>(dlogits.begin(), dlogits.end()));
    Tensor<T> g = dense_backward<T>(cache.pooled, param_span(dense_weights_, c), g_logits,
                                    grad_span(grads, dense_weights_, c), grad_span(grads, dense_bias_, 1));
    g = global_avg_pool_backward(g, cache.blocks.back().act_b.shape());
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      const Block& blk = blocks_[b];
      const BlockCache& bc = cache.blocks[b];
      g = relu_backward(std::move(g), bc.act_b);
      g = norm_backward<T>(g, bc.norm_b, param_span(blk.norm_b.scale, blk.norm_b.channels),
                           grad_span(grads, blk.norm_b.scale, blk.norm_b.channels),
                           grad_span(grads, blk.norm_b.shift, blk.norm_b.channels));
      g = conv2d_backward<T>(bc.act_a, param_span(blk.weights_b, blk.conv_b.weight_count()), g, blk.conv_b,
                             grad_span(grads, blk.weights_b, blk.conv_b.weight_count()), {});
      g = relu_backward(std::move(g), bc.act_a);
      g = norm_backward<T>(g, bc.norm_a, param_span(blk.norm_a.scale, blk.norm_a.channels),
                           grad_span(grads, blk.norm_a.scale, blk.norm_a.channels),
                           grad_span(grads, blk.norm_a.shift, blk.norm_a.channels));
      g = conv2d_backward<T>(bc.input, param_span(blk.weights_a, blk.conv_a.weight_count()), g, blk.conv_a,
                             grad_span(grads, blk.weights_a, blk.conv_a.weight_count()), {}, b > 0);
    }
    return grads;
  }

  // --- elastic weight consolidation state ---

  bool has_anchor() const noexcept { return anchor_.has_value(); }
  bool has_fisher() const noexcept { return fisher_.has_value(); }
  bool has_ewc() const noexcept { return has_anchor() && has_fisher(); }
  const std::vector<T>& anchor() const {
    if (!anchor_) throw ModelError("model has no EWC anchor");
    return *anchor_;
  }
  const std::vector<T>& fisher() const {
    if (!fisher_) throw ModelError("model has no Fisher diagonal");
    return *fisher_;
  }

  void snapshot_anchor() {
    if (anchor_) throw ModelError("EWC anchor already taken; it is immutable");
    anchor_ = params_;
  }

  // Snapshots the anchor and attaches the Fisher diagonal in one step.
  void consolidate(std::vector<T> fisher) {
    if (fisher.size() != params_.size()) throw ShapeError("Fisher diagonal", Shape{params_.size()}, Shape{fisher.size()});
    for (T f : fisher)
      if (!(f >= T{0})) throw ModelError("Fisher diagonal entries must be non-negative");
    snapshot_anchor();
    fisher_ = std::move(fisher);
  }

  // Restores a stored anchor/Fisher pair (checkpoint loading).
  void restore_ewc(std::vector<T> anchor, std::vector<T> fisher) {
    if (anchor.size() != params_.size() || fisher.size() != params_.size())
      throw ShapeError("EWC state", Shape{params_.size()}, Shape{anchor.size(), fisher.size()});
    anchor_ = std::move(anchor);
    fisher_ = std::move(fisher);
  }

  // (lambda / 2) * sum_i F_i (theta_i - anchor_i)^2, accumulating its gradient
  // into `grads` when provided.
  double ewc_penalty(double lambda, std::span<T> grads = {}) const {
    if (!has_ewc()) throw ModelError("EWC penalty requires a Fisher diagonal and an anchor");
    const auto& f = *fisher_;
    const auto& a = *anchor_;
    double penalty = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const double d = static_cast<double>(params_[i]) - static_cast<double>(a[i]);
      penalty += static_cast<double>(f[i]) * d * d;
      if (!grads.empty()) grads[i] += static_cast<T>(lambda * static_cast<double>(f[i]) * d);
    }
    return 0.5 * lambda * penalty;
  }

  // Copy with a different scalar type (double copies drive gradient checks).
  template <typename U>
  Classifier<U> cast() const {
    Classifier<U> out(arch_, norm_);
    std::copy(params_.begin(), params_.end(), out.parameters().begin());
    std::copy(running_.begin(), running_.end(), out.running_statistics().begin());
    out.set_norms_frozen(norms_frozen_);
    if (has_ewc())
      out.restore_ewc(std::vector<U>(anchor_->begin(), anchor_->end()),
                      std::vector<U>(fisher_->begin(), fisher_->end()));
    return out;
  }

 private:
  void check_input(const Tensor<T>& batch) const {
    const Shape expected{batch.rank() == 4 ? batch.dim(0) : 1, 1, arch_.image_size, arch_.image_size};
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != arch_.image_size ||
        batch.dim(3) != arch_.image_size)
      throw ShapeError("classifier input", expected, batch.shape());
  }

  std::span<const T> param_span(std::size_t offset, std::size_t n) const {
    return std::span<const T>(params_).subspan(offset, n);
  }
  static std::span<T> grad_span(std::vector<T>& grads, std::size_t offset, std::size_t n) {
    return std::span<T>(grads).subspan(offset, n);
  }
  NormView<T> norm_view(const NormLayer& n) {
    return {param_span(n.scale, n.channels), param_span(n.shift, n.channels),
            std::span<T>(running_).subspan(n.mean, n.channels), std::span<T>(running_).subspan(n.var, n.channels)};
  }

  Architecture arch_;
  NormSettings norm_;
  std::vector<ParamBlock> layout_;
  std::vector<Block> blocks_;
  std::vector<std::size_t> tap_extents_;
  std::size_t dense_weights_ = 0, dense_bias_ = 0;
  std::vector<T> params_;
  std::vector<T> running_;
  bool norms_frozen_ = false;
  std::uint64_t version_ = 0;
  std::optional<std::vector<T>> anchor_;
  std::optional<std::vector<T>> fisher_;
};

using Model = Classifier<float>;

// label = 1 iff sigmoid(logit) > 0.5, i.e. logit > 0.
template <typename T>
int predict_label(T logit) {
  return logit > T{0} ? 1 : 0;
}

template <typename T>
int predict(Classifier<T>& model, const Tensor<T>& image) {
  Tensor<T> batch = image;
  if (batch.rank() == 2) batch.reshape({1, 1, batch.dim(0), batch.dim(1)});
  else if (batch.rank() == 3) batch.reshape({1, batch.dim(0), batch.dim(1), batch.dim(2)});
  return predict_label(model.forward(batch, Pass::inference).logits.at(0));
}

// Mean BCE over the batch plus its gradient with respect to all parameters.
template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  std::vector<T> logits;
  std::vector<T> grads;
};

template <typename T>
LossAndGrad<T> bce_loss_and_grad(Classifier<T>& model, const Tensor<T>& batch, std::span<const int> labels,
                                 NormMode mode) {
  typename Classifier<T>::ForwardCache cache;
  auto fwd = model.forward(batch, mode, &cache);
  const std::size_t n = labels.size();
  std::vector<T> dlogits(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const BceResult r = bce_loss(static_cast<double>(fwd.logits[i]), labels[i]);
    loss += r.loss;
    dlogits[i] = static_cast<T>(r.grad / static_cast<double>(n));
  }
  LossAndGrad<T> out;
  out.loss = loss / static_cast<double>(n);
  out.logits = std::move(fwd.logits);
  out.grads = model.backward(cache, dlogits);
  return out;
}

// Empirical Fisher diagonal: mean over examples of the squared gradient of the
// ground-truth log-likelihood. Examples are scored one at a time with
// inference-mode normalization; running statistics are not parameters and
// get no entry.
template <typename T, typename Images>
std::vector<T> fisher_diagonal(Classifier<T>& model, const Images& images, std::span<const int> labels) {
  if (labels.empty()) throw ModelError("fisher_diagonal: empty dataset");
  if (images.size() != labels.size()) throw ModelError("fisher_diagonal: image/label count mismatch");
  const std::size_t s = model.architecture().image_size;
  std::vector<double> acc(model.parameter_count(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Tensor<T> x({1, 1, s, s}, std::vector<T>(images[i].begin(), images[i].end()));
    typename Classifier<T>::ForwardCache cache;
    auto fwd = model.forward(x, NormMode::eval, &cache);
    const T d = static_cast<T>(bce_loss(static_cast<double>(fwd.logits[0]), labels[i]).grad);
    const std::vector<T> g = model.backward(cache, std::span<const T>(&d, 1));
    for (std::size_t k = 0; k < g.size(); ++k) acc[k] += static_cast<double>(g[k]) * static_cast<double>(g[k]);
  }
  std::vector<T> fisher(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) fisher[k] = static_cast<T>(acc[k] / static_cast<double>(labels.size()));
  return fisher;
}

}  // namespace dmcl
