#pragma once

// On-disk corpus: one binary container per split plus manifest.json.
//
// Split container (little-endian):
//   char[8] magic "DMCLDATA"
//   u32     format version (1)
//   u32     image size S
//   u64     sample count
//   u64     corpus seed
//   u64     config hash (FNV-1a of the canonical generator config)
//   then per sample: u64 id, u8 task (0=A,1=B,2=C), u8 label, f32 pixels[S*S]
//
// Loaders recompute the hash from the manifest's config and reject any file
// whose header disagrees.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <string>

#include <json.hpp>

#include "dmcl/binary_io.hpp"
#include "dmcl/synthetic.hpp"

namespace dmcl {

inline constexpr std::string_view kCorpusMagic = "DMCLDATA";
inline constexpr std::uint32_t kCorpusVersion = 1;
inline constexpr std::array<const char*, 4> kSplitNames{"base", "continuous", "validation", "test"};

namespace detail {
inline std::string canon(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string canonical_config(const GeneratorConfig& g, const CorpusCounts& c) {
  using detail::canon;
  std::string s;
  s += "image_size=" + std::to_string(g.image_size) + ";";
  s += "base_level=" + canon(g.base_level) + ";";
  s += "texture_contrast=" + canon(g.texture_contrast) + ";";
  s += "smooth_blur=" + canon(g.smooth_blur) + ";";
  s += "smooth_noise=" + canon(g.smooth_noise) + ";";
  s += "sharp_blur=" + canon(g.sharp_blur) + ";";
  s += "sharp_noise=" + canon(g.sharp_noise) + ";";
  s += "offset_min=" + canon(g.offset_min) + ";";
  s += "offset_max=" + canon(g.offset_max) + ";";
  s += "scale_min=" + canon(g.scale_min) + ";";
  s += "scale_max=" + canon(g.scale_max) + ";";
  s += "sprite_size=" + std::to_string(g.sprite_size) + ";";
  s += "sprite_arm=" + std::to_string(g.sprite_arm) + ";";
  s += "count_base=" + std::to_string(c.base) + ";";
  for (Task t : kTasks)
    s += std::string("count_continuous_") + task_name(t) + "=" + std::to_string(c.continuous[task_index(t)]) + ";";
  s += "count_validation=" + std::to_string(c.validation) + ";";
  s += "count_test=" + std::to_string(c.test) + ";";
  return s;
}

inline std::uint64_t corpus_config_hash(const GeneratorConfig& g, const CorpusCounts& c) {
  return fnv1a(canonical_config(g, c));
}

inline nlohmann::json to_json(const GeneratorConfig& g) {
  return {{"image_size", g.image_size},   {"base_level", g.base_level},   {"texture_contrast", g.texture_contrast},
          {"smooth_blur", g.smooth_blur}, {"smooth_noise", g.smooth_noise}, {"sharp_blur", g.sharp_blur},
          {"sharp_noise", g.sharp_noise}, {"offset_min", g.offset_min},   {"offset_max", g.offset_max},
          {"scale_min", g.scale_min},     {"scale_max", g.scale_max},     {"sprite_size", g.sprite_size},
          {"sprite_arm", g.sprite_arm}};
}

inline GeneratorConfig generator_from_json(const nlohmann::json& j) {
  GeneratorConfig g;
  g.image_size = j.at("image_size").get<std::size_t>();
  g.base_level = j.at("base_level").get<double>();
  g.texture_contrast = j.at("texture_contrast").get<double>();
  g.smooth_blur = j.at("smooth_blur").get<double>();
  g.smooth_noise = j.at("smooth_noise").get<double>();
  g.sharp_blur = j.at("sharp_blur").get<double>();
  g.sharp_noise = j.at("sharp_noise").get<double>();
  g.offset_min = j.at("offset_min").get<double>();
  g.offset_max = j.at("offset_max").get<double>();
  g.scale_min = j.at("scale_min").get<double>();
  g.scale_max = j.at("scale_max").get<double>();
  g.sprite_size = j.at("sprite_size").get<std::size_t>();
  g.sprite_arm = j.at("sprite_arm").get<std::size_t>();
  return g;
}

inline nlohmann::json to_json(const CorpusCounts& c) {
  return {{"base", c.base},
          {"continuous", {{"A", c.continuous[0]}, {"B", c.continuous[1]}, {"C", c.continuous[2]}}},
          {"validation", c.validation},
          {"test", c.test}};
}

inline CorpusCounts counts_from_json(const nlohmann::json& j) {
  CorpusCounts c;
  c.base = j.at("base").get<std::size_t>();
  for (Task t : kTasks) c.continuous[task_index(t)] = j.at("continuous").at(std::string(1, task_name(t))).get<std::size_t>();
  c.validation = j.at("validation").get<std::size_t>();
  c.test = j.at("test").get<std::size_t>();
  return c;
}

// Generator and corpus-count keys accepted in config files. Returns false for
// keys it does not own.
inline bool set_generator_option(GeneratorConfig& g, CorpusCounts& c, const std::string& key, const std::string& value) {
  auto num = [&](auto& field) {
    std::istringstream is(value);
    std::remove_reference_t<decltype(field)> v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw std::invalid_argument("invalid value '" + value + "' for " + key);
    field = v;
    return true;
  };
  if (key == "image_size") return num(g.image_size);
  if (key == "base_level") return num(g.base_level);
  if (key == "texture_contrast") return num(g.texture_contrast);
  if (key == "smooth_blur") return num(g.smooth_blur);
  if (key == "smooth_noise") return num(g.smooth_noise);
  if (key == "sharp_blur") return num(g.sharp_blur);
  if (key == "sharp_noise") return num(g.sharp_noise);
  if (key == "offset_min") return num(g.offset_min);
  if (key == "offset_max") return num(g.offset_max);
  if (key == "scale_min") return num(g.scale_min);
  if (key == "scale_max") return num(g.scale_max);
  if (key == "sprite_size") return num(g.sprite_size);
  if (key == "sprite_arm") return num(g.sprite_arm);
  if (key == "count_base") return num(c.base);
  if (key == "count_continuous_A") return num(c.continuous[0]);
  if (key == "count_continuous_B") return num(c.continuous[1]);
  if (key == "count_continuous_C") return num(c.continuous[2]);
  if (key == "count_validation") return num(c.validation);
  if (key == "count_test") return num(c.test);
  return false;
}

struct CorpusHeader {
  std::uint32_t image_size = 0;
  std::uint64_t count = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

inline void write_split(std::ostream& os, const Dataset& samples, std::size_t image_size, std::uint64_t seed,
                        std::uint64_t hash) {
  os.write(kCorpusMagic.data(), static_cast<std::streamsize>(kCorpusMagic.size()));
  io::write_pod<std::uint32_t>(os, kCorpusVersion);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(image_size));
  io::write_pod<std::uint64_t>(os, samples.size());
  io::write_pod<std::uint64_t>(os, seed);
  io::write_pod<std::uint64_t>(os, hash);
  for (const Sample& s : samples) {
    if (s.pixels.size() != image_size * image_size) throw FormatError("sample has wrong pixel count");
    io::write_pod<std::uint64_t>(os, s.id);
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.task));
    io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.label));
    os.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size() * sizeof(float)));
  }
}

inline Dataset read_split(std::istream& is, std::uint64_t expected_hash, CorpusHeader* header_out = nullptr) {
  io::expect_magic(is, kCorpusMagic);
  const auto version = io::read_pod<std::uint32_t>(is);
  if (version != kCorpusVersion) throw FormatError("unsupported corpus version " + std::to_string(version));
  CorpusHeader h;
  h.image_size = io::read_pod<std::uint32_t>(is);
  h.count = io::read_pod<std::uint64_t>(is);
  h.seed = io::read_pod<std::uint64_t>(is);
  h.config_hash = io::read_pod<std::uint64_t>(is);
  if (h.config_hash != expected_hash)
    throw FormatError("corpus config hash mismatch: file has " + hex64(h.config_hash) + ", expected " + hex64(expected_hash));
  if (h.image_size == 0 || h.image_size > 1024 || h.count > (1u << 24)) throw FormatError("implausible corpus header");
  Dataset out;
  out.reserve(h.count);
  const std::size_t px = static_cast<std::size_t>(h.image_size) * h.image_size;
  for (std::uint64_t i = 0; i < h.count; ++i) {
    Sample s;
    s.id = io::read_pod<std::uint64_t>(is);
    const auto task = io::read_pod<std::uint8_t>(is);
    const auto label = io::read_pod<std::uint8_t>(is);
    if (task > 2 || label > 1) throw FormatError("corrupt sample record");
    s.task = static_cast<Task>(task);
    s.label = label;
    s.pixels.resize(px);
    if (!is.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(px * sizeof(float))))
      throw FormatError("unexpected end of file in sample pixels");
    out.push_back(std::move(s));
  }
  if (header_out) *header_out = h;
  return out;
}

struct StoredCorpus {
  Corpus corpus;
  GeneratorConfig generator;
  CorpusCounts counts;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

inline Dataset concat(const std::array<Dataset, kTaskCount>& parts) {
  Dataset out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline std::array<Dataset, kTaskCount> split_by_task(Dataset all) {
  std::array<Dataset, kTaskCount> out;
  for (Sample& s : all) out[task_index(s.task)].push_back(std::move(s));
  return out;
}

inline nlohmann::json task_counts(const Dataset& d) {
  nlohmann::json j = nlohmann::json::object();
  for (Task t : kTasks) {
    std::size_t total = 0, positive = 0;
    for (const Sample& s : d)
      if (s.task == t) {
        ++total;
        positive += s.label == 1;
      }
    if (total) j[std::string(1, task_name(t))] = {{"total", total}, {"positive", positive}};
  }
  return j;
}

}  // namespace detail

inline void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const GeneratorConfig& g,
                         const CorpusCounts& c, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const std::uint64_t hash = corpus_config_hash(g, c);
  const std::array<Dataset, 4> splits{corpus.base, detail::concat(corpus.continuous), detail::concat(corpus.validation),
                                      detail::concat(corpus.test)};
  nlohmann::json manifest;
  manifest["format"] = "dmcl-corpus";
  manifest["version"] = kCorpusVersion;
  manifest["seed"] = seed;
  manifest["config_hash"] = hex64(hash);
  manifest["generator"] = to_json(g);
  manifest["counts"] = to_json(c);
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const std::string file = std::string(kSplitNames[i]) + ".bin";
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw FormatError("cannot write " + (dir / file).string());
    write_split(os, splits[i], g.image_size, seed, hash);
    if (!os) throw FormatError("failed writing " + (dir / file).string());
    manifest["splits"][kSplitNames[i]] = {{"file", file}, {"samples", splits[i].size()},
                                          {"tasks", detail::task_counts(splits[i])}};
  }
  std::ofstream ms(dir / "manifest.json", std::ios::binary);
  if (!ms) throw FormatError("cannot write manifest in " + dir.string());
  ms << manifest.dump(2) << '\n';
}

inline StoredCorpus read_corpus(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw FormatError("no corpus manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    ms >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed corpus manifest: ") + e.what());
  }
  StoredCorpus out;
  try {
    out.generator = generator_from_json(manifest.at("generator"));
    out.counts = counts_from_json(manifest.at("counts"));
    out.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete corpus manifest: ") + e.what());
  }
  out.config_hash = corpus_config_hash(out.generator, out.counts);
  if (manifest.value("config_hash", std::string{}) != hex64(out.config_hash))
    throw FormatError("manifest config hash does not match its generator config");
  std::array<Dataset, 4> splits;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const auto path = dir / (std::string(kSplitNames[i]) + ".bin");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("missing corpus split " + path.string());
    CorpusHeader h;
    splits[i] = read_split(is, out.config_hash, &h);
    if (h.image_size != out.generator.image_size) throw FormatError("split image size disagrees with manifest");
    if (h.seed != out.seed) throw FormatError("split seed disagrees with manifest");
  }
  out.corpus.base = std::move(splits[0]);
  out.corpus.continuous = detail::split_by_task(std::move(splits[1]));
  out.corpus.validation = detail::split_by_task(std::move(splits[2]));
  out.corpus.test = detail::split_by_task(std::move(splits[3]));
  if (out.corpus.base.size() != out.counts.base) throw FormatError("base split count disagrees with manifest");
  for (Task t : kTasks) {
    const auto k = task_index(t);
    if (out.corpus.continuous[k].size() != out.counts.continuous[k] ||
        out.corpus.validation[k].size() != out.counts.validation || out.corpus.test[k].size() != out.counts.test)
      throw FormatError(std::string("split counts for task ") + task_name(t) + " disagree with manifest");
  }
  return out;
}

}  // namespace dmcl
