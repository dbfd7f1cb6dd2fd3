#pragma once

// Model checkpoint container (little-endian):
//
//   char[8]  magic "DMCLCKPT"
//   u32      format version (1)
//   u32      image size S
//   u32      block count B, then u32 channels[B]
//   f64      normalization momentum, f64 normalization epsilon
//   u8       norms frozen flag
//   u64 n,   f32 parameters[n]
//   u64 m,   f32 running statistics[m]   (per norm layer: mean[C], var[C])
//   u8       has EWC state; when 1: u64 n, f32 anchor[n], u64 n, f32 fisher[n]
//   u64      seed the model was initialized from
//   u64 len, char provenance[len]        (free-form JSON)

#include <fstream>
#include <string>

#include "dmcl/binary_io.hpp"
#include "dmcl/classifier.hpp"

namespace dmcl {

inline constexpr std::string_view kCheckpointMagic = "DMCLCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string provenance;
};

inline void save_checkpoint(std::ostream& os, const Model& model, const CheckpointMeta& meta) {
  if (model.has_anchor() != model.has_fisher()) throw ModelError("EWC anchor and Fisher diagonal must be saved together");
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  io::write_pod<std::uint32_t>(os, kCheckpointVersion);
  const Architecture& arch = model.architecture();
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(arch.image_size));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(arch.channels.size()));
  for (std::size_t c : arch.channels) io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c));
  io::write_pod<double>(os, model.norm_settings().momentum);
  io::write_pod<double>(os, model.norm_settings().epsilon);
  io::write_pod<std::uint8_t>(os, model.norms_frozen() ? 1 : 0);
  io::write_array<float>(os, model.parameters());
  io::write_array<float>(os, model.running_statistics());
  io::write_pod<std::uint8_t>(os, model.has_ewc() ? 1 : 0);
  if (model.has_ewc()) {
    io::write_array<float>(os, model.anchor());
    io::write_array<float>(os, model.fisher());
  }
  io::write_pod<std::uint64_t>(os, meta.seed);
  io::write_string(os, meta.provenance);
}

inline Model load_checkpoint(std::istream& is, CheckpointMeta* meta = nullptr) {
  io::expect_magic(is, kCheckpointMagic);
  const auto version = io::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Architecture arch;
  arch.image_size = io::read_pod<std::uint32_t>(is);
  const auto blocks = io::read_pod<std::uint32_t>(is);
  if (blocks == 0 || blocks > 16) throw FormatError("implausible block count");
  arch.channels.clear();
  for (std::uint32_t b = 0; b < blocks; ++b) arch.channels.push_back(io::read_pod<std::uint32_t>(is));
  NormSettings norm;
  norm.momentum = io::read_pod<double>(is);
  norm.epsilon = io::read_pod<double>(is);
  Model model(arch, norm);
  model.set_norms_frozen(io::read_pod<std::uint8_t>(is) != 0);
  const auto params = io::read_array<float>(is);
  const auto stats = io::read_array<float>(is);
  if (params.size() != model.parameter_count() || stats.size() != model.running_statistics().size())
    throw FormatError("checkpoint arrays do not match the declared architecture");
  std::copy(params.begin(), params.end(), model.parameters().begin());
  std::copy(stats.begin(), stats.end(), model.running_statistics().begin());
  if (io::read_pod<std::uint8_t>(is)) {
    auto anchor = io::read_array<float>(is);
    auto fisher = io::read_array<float>(is);
    model.restore_ewc(std::move(anchor), std::move(fisher));
  }
  CheckpointMeta m;
  m.seed = io::read_pod<std::uint64_t>(is);
  m.provenance = io::read_string(is);
  if (meta) *meta = std::move(m);
  return model;
}

inline void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path);
  save_checkpoint(os, model, meta);
  if (!os) throw FormatError("failed writing checkpoint " + path);
}

inline Model load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  return load_checkpoint(is, meta);
}

}  // namespace dmcl
