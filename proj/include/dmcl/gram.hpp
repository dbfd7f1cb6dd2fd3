#pragma once

// Gram-matrix style statistics of feature maps and the distance between them.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dmcl/classifier.hpp"
#include "dmcl/tensor.hpp"

namespace dmcl {

struct GramMatrix {
  std::size_t n = 0;            // number of feature maps
  std::vector<double> values;   // n x n, row-major

  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  friend bool operator==(const GramMatrix&, const GramMatrix&) = default;
};

struct GramSignature {
  std::vector<GramMatrix> layers;
  std::uint64_t model_version = 0;
};

class SignatureMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// G_ij = <f_i, f_j> / (N * M) over `channels` maps of `plane` elements each.
template <typename T>
GramMatrix gram_matrix(std::span<const T> maps, std::size_t channels, std::size_t plane) {
  if (channels == 0 || plane == 0) throw std::invalid_argument("gram_matrix: empty feature maps");
  if (maps.size() != channels * plane) throw ShapeError("gram_matrix", Shape{channels, plane}, Shape{maps.size()});
  GramMatrix g{channels, std::vector<double>(channels * channels, 0.0)};
  const double norm = 1.0 / (static_cast<double>(channels) * static_cast<double>(plane));
  for (std::size_t i = 0; i < channels; ++i) {
    const T* fi = maps.data() + i * plane;
    for (std::size_t j = i; j < channels; ++j) {
      const T* fj = maps.data() + j * plane;
      double dot = 0.0;
      for (std::size_t k = 0; k < plane; ++k) dot += static_cast<double>(fi[k]) * static_cast<double>(fj[k]);
      g.values[i * channels + j] = g.values[j * channels + i] = dot * norm;
    }
  }
  return g;
}

// feature_maps: N_l x H_l x W_l
template <typename T>
GramMatrix gram_matrix(const Tensor<T>& feature_maps) {
  if (feature_maps.rank() != 3) throw ShapeError("gram_matrix expects NxHxW maps", Shape{0, 0, 0}, feature_maps.shape());
  return gram_matrix<T>(feature_maps.values(), feature_maps.dim(0), feature_maps.dim(1) * feature_maps.dim(2));
}

// sum_l (1/N_l^2) sum_ij (G^l_ij(a) - G^l_ij(b))^2
inline double gram_distance(const GramSignature& a, const GramSignature& b) {
  if (a.layers.size() != b.layers.size())
    throw SignatureMismatch("gram_distance: signatures have " + std::to_string(a.layers.size()) + " and " +
                            std::to_string(b.layers.size()) + " layers");
  double total = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const GramMatrix& ga = a.layers[l];
    const GramMatrix& gb = b.layers[l];
    if (ga.n != gb.n || ga.values.size() != gb.values.size())
      throw SignatureMismatch("gram_distance: layer " + std::to_string(l) + " sizes differ (" +
                              std::to_string(ga.n) + " vs " + std::to_string(gb.n) + ")");
    double sum = 0.0;
    for (std::size_t k = 0; k < ga.values.size(); ++k) {
      const double d = ga.values[k] - gb.values[k];
      sum += d * d;
    }
    total += sum / (static_cast<double>(ga.n) * static_cast<double>(ga.n));
  }
  return total;
}

// Per-sample signatures from already computed batched taps.
template <typename T>
std::vector<GramSignature> signatures_from_taps(const std::vector<Tensor<T>>& taps, const TapSpec& spec,
                                                std::uint64_t model_version) {
  if (spec.blocks.empty()) throw std::invalid_argument("tap spec must not be empty");
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    if (spec.blocks[i] >= taps.size()) throw std::invalid_argument("tap spec refers to a missing layer");
    if (i > 0 && spec.blocks[i] <= spec.blocks[i - 1]) throw std::invalid_argument("tap spec must be strictly increasing");
  }
  const std::size_t n_batch = taps.front().dim(0);
  std::vector<GramSignature> out(n_batch);
  for (auto& sig : out) sig.model_version = model_version;
  for (std::size_t layer : spec.blocks) {
    const Tensor<T>& t = taps[layer];
    const std::size_t c = t.dim(1), plane = t.dim(2) * t.dim(3);
    for (std::size_t n = 0; n < n_batch; ++n)
      out[n].layers.push_back(gram_matrix<T>(t.values().subspan(n * c * plane, c * plane), c, plane));
  }
  return out;
}

// Signatures of a batch under inference-mode normalization, one forward pass.
template <typename T>
std::vector<GramSignature> signatures(Classifier<T>& model, const Tensor<T>& batch, const TapSpec& spec) {
  auto fwd = model.forward(batch, Pass::inference);
  return signatures_from_taps(fwd.taps, spec, model.version());
}

template <typename T>
GramSignature signature(Classifier<T>& model, const Tensor<T>& image) {
  Tensor<T> batch = image;
  const std::size_t s = model.architecture().image_size;
  if (image.size() != s * s) throw ShapeError("signature image", Shape{1, s, s}, image.shape());
  batch.reshape({1, 1, s, s});
  return signatures(model, batch, model.default_taps()).front();
}

}  // namespace dmcl
