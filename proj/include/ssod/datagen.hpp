/*
 * Copyright 2026 The SSOD Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Synthetic object-on-background scenes.
//
// Every scene starts from a textured noise field (a few random gratings plus
// uniform pixel noise). ID and unseen-motif scenes add a distractor layer of
// small motifs drawn from the distractor family [M, M+4) and then one
// foreground object:
//
//   id              foreground motif in [0, M), label = motif
//   ood-unseen      foreground motif in [M, M+4), never a labeled class
//   ood-background  texture field only: no distractors, no foreground
//
// All sampling decisions (sizes, positions, colors, counts) come from the
// integer-state Rng, one derived stream per image, so a (config, seed) pair
// always produces the same bytes.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssod/error.hpp"
#include "ssod/rng.hpp"
#include "ssod/ssdt.hpp"
#include "ssod/tensor.hpp"

namespace ssod::data {

inline constexpr int kGeneratorVersion = 1;
inline constexpr std::size_t kDistractorMotifs = 4;

inline const std::array<const char*, 12>& motif_names() {
  static const std::array<const char*, 12> names{"disk",          "plus",        "checker",  "diamond-ring",
                                                 "dot-lattice",   "maze",        "rings",    "wave",
                                                 "triangle",      "hollow-square", "x-cross", "bars"};
  return names;
}

inline std::size_t motif_count() { return motif_names().size(); }

enum class SceneKind { kId, kUnseenMotif, kPureBackground };

struct SceneConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 4;
  std::size_t object_min = 21;  // side in pixels
  std::size_t object_max = 40;
  std::size_t distractor_min_count = 3;
  std::size_t distractor_max_count = 6;
  std::size_t distractor_min_size = 12;
  std::size_t distractor_max_size = 26;
  std::size_t gratings = 4;
  double grating_amplitude = 0.1;
  double grating_max_frequency = 0.5;
  double pixel_noise = 0.05;
  std::size_t train_count = 2000;
  std::size_t val_count = 500;
  std::size_t ood_count = 500;
  std::size_t shard_size = 500;
  std::uint64_t seed = 7;

  void validate() const {
    detail::require(num_classes >= 1, "scene config: num_classes must be positive");
    detail::require(num_classes + kDistractorMotifs <= motif_count(),
                    "scene config: at most " + std::to_string(motif_count() - kDistractorMotifs) + " ID classes");
    detail::require(object_min >= 1 && object_min <= object_max && object_max <= image_size,
                    "scene config: invalid object size range");
    const double area = static_cast<double>(image_size * image_size);
    const double lo = static_cast<double>(object_min * object_min) / area;
    const double hi = static_cast<double>(object_max * object_max) / area;
    detail::require(lo >= 0.10 && hi <= 0.40, "scene config: object must cover between 10% and 40% of the image");
    detail::require(distractor_min_count <= distractor_max_count, "scene config: invalid distractor count range");
    detail::require(distractor_min_size >= 2 && distractor_min_size <= distractor_max_size,
                    "scene config: invalid distractor size range");
    detail::require(shard_size >= 1, "scene config: shard_size must be positive");
  }
};

inline nlohmann::json to_json(const SceneConfig& c) {
  return {{"image_size", c.image_size},
          {"num_classes", c.num_classes},
          {"object_min", c.object_min},
          {"object_max", c.object_max},
          {"distractor_min_count", c.distractor_min_count},
          {"distractor_max_count", c.distractor_max_count},
          {"distractor_min_size", c.distractor_min_size},
          {"distractor_max_size", c.distractor_max_size},
          {"gratings", c.gratings},
          {"grating_amplitude", c.grating_amplitude},
          {"grating_max_frequency", c.grating_max_frequency},
          {"pixel_noise", c.pixel_noise},
          {"train_count", c.train_count},
          {"val_count", c.val_count},
          {"ood_count", c.ood_count},
          {"shard_size", c.shard_size},
          {"seed", c.seed}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.object_min = j.value("object_min", c.object_min);
  c.object_max = j.value("object_max", c.object_max);
  c.distractor_min_count = j.value("distractor_min_count", c.distractor_min_count);
  c.distractor_max_count = j.value("distractor_max_count", c.distractor_max_count);
  c.distractor_min_size = j.value("distractor_min_size", c.distractor_min_size);
  c.distractor_max_size = j.value("distractor_max_size", c.distractor_max_size);
  c.gratings = j.value("gratings", c.gratings);
  c.grating_amplitude = j.value("grating_amplitude", c.grating_amplitude);
  c.grating_max_frequency = j.value("grating_max_frequency", c.grating_max_frequency);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.train_count = j.value("train_count", c.train_count);
  c.val_count = j.value("val_count", c.val_count);
  c.ood_count = j.value("ood_count", c.ood_count);
  c.shard_size = j.value("shard_size", c.shard_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

/// Binary mask (row-major side x side) of motif `index`.
inline std::vector<std::uint8_t> motif_mask(std::size_t index, std::size_t side) {
  std::vector<std::uint8_t> m(side * side, 0);
  auto frac = [](double v) { return v - std::floor(v); };
  for (std::size_t i = 0; i < side; ++i) {
    const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(side) * 2.0 - 1.0;
    for (std::size_t j = 0; j < side; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(side) * 2.0 - 1.0;
      const double r = std::sqrt(x * x + y * y);
      bool on = false;
      switch (index) {
        case 0: on = r < 0.9; break;
        case 1: on = std::abs(x) < 0.25 || std::abs(y) < 0.25; break;
        case 2: on = static_cast<long>(std::floor((x + 1) * 2) + std::floor((y + 1) * 2)) % 2 == 0; break;
        case 3: on = std::abs(x) + std::abs(y) < 0.9 && std::abs(x) + std::abs(y) > 0.5; break;
        case 4: {
          const double fx = frac((x + 1) * 2.5) - 0.5, fy = frac((y + 1) * 2.5) - 0.5;
          on = fx * fx + fy * fy < 0.09;
          break;
        }
        case 5: {
          const double cx = std::floor((x + 1) * 2.5), cy = std::floor((y + 1) * 2.5);
          const double fx = (x + 1) * 2.5 - cx, fy = (y + 1) * 2.5 - cy;
          const bool flip = static_cast<long>(cx * 7 + cy * 13) % 3 == 0;
          on = flip ? std::abs(fx - fy) < 0.2 : std::abs(fx + fy - 1) < 0.2;
          break;
        }
        case 6: on = r < 1.0 && static_cast<long>(std::floor(r * 4)) % 2 == 0; break;
        case 7: {
          const double v = y - 0.3 * std::sin(x * 3 * std::numbers::pi);
          on = v - 0.5 * std::floor(v / 0.5) < 0.2;
          break;
        }
        case 8: on = y > -0.8 && std::abs(x) < (y + 0.8) / 1.8 * 0.9; break;
        case 9: on = std::max(std::abs(x), std::abs(y)) > 0.6; break;
        case 10: on = std::abs(x - y) < 0.35 || std::abs(x + y) < 0.35; break;
        case 11: on = static_cast<long>(std::floor((y + 1) * 2.5)) % 2 == 0; break;
        default: throw ConfigError("unknown motif index " + std::to_string(index));
      }
      m[i * side + j] = on ? 1 : 0;
    }
  }
  return m;
}

struct Scene {
  std::vector<float> pixels;  // [3][S][S] in [0,1]
  int motif = -1;             // foreground motif, -1 for none
  std::size_t object_side = 0;
  std::size_t motif_pixels = 0;  // foreground + distractor mask pixels drawn
  double object_area_fraction = 0.0;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed;
  for (std::uint64_t v : {a, b}) {
    z += 0x9E3779B97F4A7C15ULL + v;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
  }
  return z;
}

// Paints `color` through the motif mask placed with its top-left corner at
// (px, py); parts outside the image are dropped. Returns pixels painted.
inline std::size_t paste(std::vector<float>& img, std::size_t size, const std::vector<std::uint8_t>& mask,
                         std::size_t side, std::int64_t px, std::int64_t py, const std::array<float, 3>& color) {
  std::size_t painted = 0;
  const auto s = static_cast<std::int64_t>(size);
  for (std::size_t i = 0; i < side; ++i) {
    const std::int64_t y = py + static_cast<std::int64_t>(i);
    if (y < 0 || y >= s) continue;
    for (std::size_t j = 0; j < side; ++j) {
      const std::int64_t x = px + static_cast<std::int64_t>(j);
      if (x < 0 || x >= s || !mask[i * side + j]) continue;
      for (std::size_t c = 0; c < 3; ++c) img[(c * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x)] = color[c];
      ++painted;
    }
  }
  return painted;
}

inline std::array<float, 3> random_color(Rng& rng, double lo, double hi) {
  return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
          static_cast<float>(rng.uniform(lo, hi))};
}

}  // namespace detail

/// Renders one scene. `motif` is the foreground motif for kId/kUnseenMotif.
inline Scene render_scene(const SceneConfig& cfg, SceneKind kind, int motif, Rng& rng) {
  const std::size_t s = cfg.image_size;
  Scene scene;
  scene.pixels.assign(3 * s * s, 0.0f);
  auto& img = scene.pixels;

  const auto base = detail::random_color(rng, 0.2, 0.5);
  for (std::size_t c = 0; c < 3; ++c) std::fill(img.begin() + c * s * s, img.begin() + (c + 1) * s * s, base[c]);
  for (std::size_t g = 0; g < cfg.gratings; ++g) {
    const double freq = rng.uniform(0.05, cfg.grating_max_frequency);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto weight = detail::random_color(rng, 0.5, 1.0);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double wave = std::sin(freq * (ct * static_cast<double>(x) + st * static_cast<double>(y)) + phase) *
                            cfg.grating_amplitude;
        for (std::size_t c = 0; c < 3; ++c) img[(c * s + y) * s + x] += static_cast<float>(wave * weight[c]);
      }
    }
  }

  if (kind != SceneKind::kPureBackground) {
    const auto count = rng.uniform_int(static_cast<std::int64_t>(cfg.distractor_min_count),
                                       static_cast<std::int64_t>(cfg.distractor_max_count));
    for (std::int64_t d = 0; d < count; ++d) {
      const auto side = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.distractor_min_size),
                                                                 static_cast<std::int64_t>(cfg.distractor_max_size)));
      const auto half = static_cast<std::int64_t>(side / 2);
      const auto px = rng.uniform_int(-half, static_cast<std::int64_t>(s) - half - 1);
      const auto py = rng.uniform_int(-half, static_cast<std::int64_t>(s) - half - 1);
      const auto which = cfg.num_classes + static_cast<std::size_t>(rng.uniform_int(0, kDistractorMotifs - 1));
      const auto color = detail::random_color(rng, 0.6, 1.0);
      scene.motif_pixels += detail::paste(img, s, motif_mask(which, side), side, px, py, color);
    }
  }

  for (auto& v : img) v += static_cast<float>(rng.uniform(-cfg.pixel_noise, cfg.pixel_noise));

  if (kind != SceneKind::kPureBackground) {
    const auto side = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.object_min), static_cast<std::int64_t>(cfg.object_max)));
    const auto px = rng.uniform_int(0, static_cast<std::int64_t>(s - side));
    const auto py = rng.uniform_int(0, static_cast<std::int64_t>(s - side));
    const auto color = detail::random_color(rng, 0.6, 1.0);
    scene.motif = motif;
    scene.object_side = side;
    scene.object_area_fraction = static_cast<double>(side * side) / static_cast<double>(s * s);
    scene.motif_pixels += detail::paste(img, s, motif_mask(static_cast<std::size_t>(motif), side), side, px, py, color);
  }

  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return scene;
}

struct SplitSpec {
  std::string name;
  SceneKind kind;
  std::size_t count;
  std::uint64_t salt;
};

inline std::string kind_name(SceneKind k) {
  switch (k) {
    case SceneKind::kId: return "id";
    case SceneKind::kUnseenMotif: return "unseen-motif";
    case SceneKind::kPureBackground: return "pure-background";
  }
  return "?";
}

/// Foreground motif and stored label of image `i` of a split. ID classes and
/// unseen motifs cycle so every class gets an exact share.
inline std::pair<int, int> motif_and_label(const SceneConfig& cfg, SceneKind kind, std::size_t i) {
  switch (kind) {
    case SceneKind::kId: {
      const int m = static_cast<int>(i % cfg.num_classes);
      return {m, m};
    }
    case SceneKind::kUnseenMotif: {
      const int m = static_cast<int>(cfg.num_classes + i % kDistractorMotifs);
      return {m, m};
    }
    case SceneKind::kPureBackground: return {-1, -1};
  }
  return {-1, -1};
}

struct SplitStats {
  double mean_object_area_fraction = 0.0;
  std::size_t motif_pixels = 0;
};

namespace detail {

inline nlohmann::json read_manifest_or_new(const std::filesystem::path& dir, const SceneConfig& cfg) {
  const auto path = dir / "manifest.json";
  nlohmann::json m;
  if (std::filesystem::exists(path)) {
    std::ifstream is(path);
    is >> m;
    if (m.value("seed", std::uint64_t{0}) != cfg.seed || m.at("config") != to_json(cfg)) {
      throw ConfigError(path.string() + " was generated with a different configuration");
    }
    return m;
  }
  m["format"] = "ssod-dataset";
  m["version"] = 1;
  m["generator_version"] = kGeneratorVersion;
  m["seed"] = cfg.seed;
  m["image_size"] = cfg.image_size;
  m["num_classes"] = cfg.num_classes;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < cfg.num_classes; ++k) names.emplace_back(motif_names()[k]);
  m["class_names"] = names;
  m["config"] = to_json(cfg);
  m["splits"] = nlohmann::json::object();
  return m;
}

inline void write_manifest(const std::filesystem::path& dir, const nlohmann::json& m) {
  const auto path = dir / "manifest.json";
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << m.dump(2) << '\n';
}

}  // namespace detail

/// Renders a split into SSDT shards under `dir` and records it in the manifest.
inline SplitStats write_split(const SceneConfig& cfg, const std::filesystem::path& dir, const SplitSpec& spec) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  auto manifest = detail::read_manifest_or_new(dir, cfg);

  const std::size_t s = cfg.image_size;
  SplitStats stats;
  nlohmann::json shards = nlohmann::json::array();
  for (std::size_t start = 0, shard = 0; start < spec.count; start += cfg.shard_size, ++shard) {
    const std::size_t n = std::min(cfg.shard_size, spec.count - start);
    std::vector<float> images;
    images.reserve(n * 3 * s * s);
    std::vector<float> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = start + i;
      const auto [motif, label] = motif_and_label(cfg, spec.kind, idx);
      Rng rng(detail::derive_seed(cfg.seed, spec.salt, idx));
      const Scene scene = render_scene(cfg, spec.kind, motif, rng);
      images.insert(images.end(), scene.pixels.begin(), scene.pixels.end());
      labels[i] = static_cast<float>(label);
      stats.mean_object_area_fraction += scene.object_area_fraction;
      stats.motif_pixels += scene.motif_pixels;
    }
    char stem[64];
    std::snprintf(stem, sizeof(stem), "%s-%05zu", spec.name.c_str(), shard);
    const std::string img_file = std::string(stem) + ".ssdt";
    const std::string lab_file = std::string(stem) + "-labels.ssdt";
    ssdt::save(dir / img_file, {n, 3, s, s}, images);
    ssdt::save(dir / lab_file, {n}, labels);
    shards.push_back({{"images", img_file}, {"labels", lab_file}, {"count", n}});
  }
  if (spec.count > 0) stats.mean_object_area_fraction /= static_cast<double>(spec.count);
  manifest["splits"][spec.name] = {{"kind", kind_name(spec.kind)}, {"count", spec.count}, {"shards", shards}};
  detail::write_manifest(dir, manifest);
  return stats;
}

/// Writes the "train" and "val" ID splits.
inline void generate_id_dataset(const SceneConfig& cfg, const std::filesystem::path& dir) {
  write_split(cfg, dir, {"train", SceneKind::kId, cfg.train_count, 1});
  write_split(cfg, dir, {"val", SceneKind::kId, cfg.val_count, 2});
}

/// Writes "ood-unseen" or "ood-background".
inline void generate_ood_dataset(const SceneConfig& cfg, SceneKind kind, const std::filesystem::path& dir,
                                 const std::string& name = "") {
  if (kind == SceneKind::kId) throw ConfigError("generate_ood_dataset: kind must be an OOD kind");
  const bool unseen = kind == SceneKind::kUnseenMotif;
  write_split(cfg, dir,
              {name.empty() ? (unseen ? "ood-unseen" : "ood-background") : name, kind, cfg.ood_count,
               unseen ? 3u : 4u});
}

inline void generate_all(const SceneConfig& cfg, const std::filesystem::path& dir) {
  generate_id_dataset(cfg, dir);
  generate_ood_dataset(cfg, SceneKind::kUnseenMotif, dir);
  generate_ood_dataset(cfg, SceneKind::kPureBackground, dir);
}

struct Dataset {
  Tensor images;            // [N,3,S,S]
  std::vector<int> labels;  // class index, unseen motif index, or -1
  std::string kind;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

/// Loads one split listed in `manifest_path`.
inline Dataset load_dataset(const std::filesystem::path& manifest_path, const std::string& split) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("missing manifest: " + manifest_path.string());
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  if (m.value("format", "") != "ssod-dataset") throw IoError(manifest_path.string() + ": not an SSOD dataset manifest");
  if (m.value("version", 0) != 1 || m.value("generator_version", 0) != kGeneratorVersion) {
    throw IoError(manifest_path.string() + ": unknown dataset version " + std::to_string(m.value("version", 0)) + "/" +
                  std::to_string(m.value("generator_version", 0)));
  }
  if (!m["splits"].contains(split)) throw IoError(manifest_path.string() + ": no split named '" + split + "'");
  const auto& sp = m["splits"][split];
  const std::size_t s = m.at("image_size").get<std::size_t>();
  const std::size_t count = sp.at("count").get<std::size_t>();
  const auto dir = manifest_path.parent_path();

  std::vector<float> images;
  images.reserve(count * 3 * s * s);
  Dataset ds;
  ds.kind = sp.value("kind", "");
  ds.num_classes = m.at("num_classes").get<std::size_t>();
  for (const auto& sh : sp.at("shards")) {
    const std::size_t n = sh.at("count").get<std::size_t>();
    const auto img_path = dir / sh.at("images").get<std::string>();
    const auto lab_path = dir / sh.at("labels").get<std::string>();
    if (!std::filesystem::exists(img_path)) throw IoError("missing shard: " + img_path.string());
    if (!std::filesystem::exists(lab_path)) throw IoError("missing shard: " + lab_path.string());
    const auto img = ssdt::load(img_path);
    if (img.shape != Shape{n, 3, s, s}) {
      throw IoError(img_path.string() + ": header shape " + shape_str(img.shape) + " does not match manifest " +
                    shape_str({n, 3, s, s}));
    }
    const auto lab = ssdt::load(lab_path);
    if (lab.shape != Shape{n}) {
      throw IoError(lab_path.string() + ": header shape " + shape_str(lab.shape) + " does not match manifest " +
                    shape_str({n}));
    }
    images.insert(images.end(), img.data.begin(), img.data.end());
    for (float v : lab.data) ds.labels.push_back(static_cast<int>(v));
  }
  if (ds.labels.size() != count) throw IoError(manifest_path.string() + ": split '" + split + "' count mismatch");
  ds.images = Tensor({count, 3, s, s}, std::move(images));
  return ds;
}

/// Images [begin, end) of a dataset as a new tensor.
inline Tensor slice_images(const Tensor& images, std::size_t begin, std::size_t end) {
  const std::size_t per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = end - begin;
  return Tensor(shape, std::vector<float>(images.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                                          images.data().begin() + static_cast<std::ptrdiff_t>(end * per)));
}

/// Images at `indices` gathered into a batch tensor.
inline Tensor gather_images(const Tensor& images, std::span<const std::size_t> indices) {
  const std::size_t per = images.size() / images.dim(0);
  std::vector<float> out;
  out.reserve(indices.size() * per);
  for (auto i : indices) {
    const auto first = images.data().begin() + static_cast<std::ptrdiff_t>(i * per);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(per));
  }
  Shape shape = images.shape();
  shape[0] = indices.size();
  return Tensor(shape, std::move(out));
}

}  // namespace ssod::data
