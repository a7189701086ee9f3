#include "plequiv/lane_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "plequiv/json_io.hpp"
#include "plequiv/stats.hpp"
#include "plequiv/tensor_io.hpp"

namespace plequiv {
namespace {

constexpr std::uint64_t kDatasetStream = 0x6c616e65ULL;  // "lane"
constexpr int kTextureWaves = 3;
constexpr std::size_t kDistractorClearance = 2;

// First column of a `thickness`-pixel band centered at `center`.
long band_start(double center, std::size_t thickness) {
  return static_cast<long>(std::floor(center - static_cast<double>(thickness) / 2.0 + 0.5));
}

bool near_lane(const InstanceMap& inst, std::size_t y, std::size_t x, std::size_t reach) {
  const std::size_t y0 = y >= reach ? y - reach : 0, y1 = std::min(inst.height - 1, y + reach);
  const std::size_t x0 = x >= reach ? x - reach : 0, x1 = std::min(inst.width - 1, x + reach);
  for (std::size_t r = y0; r <= y1; ++r) {
    for (std::size_t c = x0; c <= x1; ++c) {
      if (inst.at(r, c) != 0) return true;
    }
  }
  return false;
}

std::uint64_t split_code(Split split) {
  switch (split) {
    case Split::train: return 1;
    case Split::val: return 2;
    case Split::test: return 3;
  }
  return 0;
}

std::size_t uniform_index(CounterRng& rng, std::size_t lo, std::size_t hi_inclusive) {
  const std::size_t span = hi_inclusive - lo + 1;
  return lo + static_cast<std::size_t>(rng.next_u64() % span);
}

}  // namespace

void DatasetConfig::validate() const {
  if (height < 4 || width < 4) throw std::invalid_argument("dataset: image must be at least 4x4");
  if (channels < 1) throw std::invalid_argument("dataset: channels must be >= 1");
  if (min_lanes > max_lanes) throw std::invalid_argument("dataset: min_lanes > max_lanes");
  if (thickness < 1) throw std::invalid_argument("dataset: thickness must be >= 1");
  if (max_lanes > 0 && width / max_lanes < thickness + 2) {
    throw std::invalid_argument("dataset: " + std::to_string(max_lanes) + " lanes of thickness " +
                                std::to_string(thickness) + " cannot fit in width " +
                                std::to_string(width));
  }
  if (min_distractors > max_distractors || distractor_min_length < 1 ||
      distractor_min_length > distractor_max_length || distractor_max_length > height) {
    throw std::invalid_argument("dataset: invalid distractor count or length range");
  }
  if (train_size == 0 || val_size == 0 || test_size == 0) {
    throw std::invalid_argument("dataset: split sizes must be positive");
  }
  if (!(noise_level >= 0.0) || !(texture_amplitude >= 0.0) || !std::isfinite(lane_contrast) ||
      !std::isfinite(chroma_cue)) {
    throw std::invalid_argument("dataset: invalid noise, texture or contrast level");
  }
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "' (train | val | test)");
}

const std::vector<LaneSample>& LaneDataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  throw std::logic_error("unknown split");
}

LaneSample gen_lane_sample(const DatasetConfig& cfg, Split split, std::size_t index) {
  cfg.validate();
  CounterRng rng(cfg.seed, kDatasetStream ^ split_code(split), index);
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.channels;

  LaneSample sample;
  sample.image = Tensor(Shape{C, H, W});
  sample.seg_gt = Tensor(Shape{H, W});
  sample.inst_gt = InstanceMap(H, W);

  // Background: a base color per channel plus smooth oriented waves shared by
  // all channels, so color differences stay flat away from the lanes.
  std::vector<double> base(C);
  for (auto& b : base) b = rng.uniform(-0.6, -0.1);
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[kTextureWaves];
  for (auto& w : waves) {
    w.fx = rng.uniform(-3.0, 3.0);
    w.fy = rng.uniform(-2.0, 2.0);
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.amp = cfg.texture_amplitude / kTextureWaves * rng.uniform(0.5, 1.5);
  }
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double v = 0.0;
      for (const auto& w : waves) {
        v += w.amp * std::sin(2.0 * std::numbers::pi *
                                  (w.fx * static_cast<double>(x) / static_cast<double>(W) +
                                   w.fy * static_cast<double>(y) / static_cast<double>(H)) +
                              w.phase);
      }
      for (std::size_t c = 0; c < C; ++c) sample.image.at(c, y, x) = base[c] + v;
    }
  }

  // Lanes: one per horizontal slot so distinct lanes never touch.
  const std::size_t lanes = cfg.max_lanes == 0 ? 0 : uniform_index(rng, cfg.min_lanes, cfg.max_lanes);
  if (lanes > 0) {
    const double slot = static_cast<double>(W) / static_cast<double>(lanes);
    const double half = static_cast<double>(cfg.thickness) / 2.0;
    for (std::size_t k = 0; k < lanes; ++k) {
      const double lo = static_cast<double>(k) * slot + half + 0.5;
      const double hi = static_cast<double>(k + 1) * slot - half - 0.5;
      const double x_top = rng.uniform(lo, std::max(lo, hi));
      const double x_bottom = rng.uniform(lo, std::max(lo, hi));
      const std::size_t y0 = uniform_index(rng, 0, H / 4);
      const std::size_t y1 = uniform_index(rng, (3 * H) / 4, H - 1);
      std::vector<double> color(C);
      const double strength = cfg.lane_contrast * rng.uniform(0.8, 1.2);
      for (std::size_t c = 0; c < C; ++c) {
        color[c] = strength + (c % 2 == 0 ? cfg.chroma_cue : -cfg.chroma_cue);
      }
      for (std::size_t y = y0; y <= y1; ++y) {
        const double t = y1 > y0 ? static_cast<double>(y - y0) / static_cast<double>(y1 - y0) : 0.0;
        const double cx = x_top + (x_bottom - x_top) * t;
        const long start = band_start(cx, cfg.thickness);
        for (long xi = std::max(0L, start); xi < start + static_cast<long>(cfg.thickness); ++xi) {
          if (xi >= static_cast<long>(W)) break;
          const auto x = static_cast<std::size_t>(xi);
          sample.inst_gt.at(y, x) = static_cast<int>(k) + 1;
          sample.seg_gt.at(y, x) = 1.0;
          for (std::size_t c = 0; c < C; ++c) sample.image.at(c, y, x) += color[c];
        }
      }
    }
  }

  const std::size_t distractors =
      cfg.max_distractors == 0 ? 0 : uniform_index(rng, cfg.min_distractors, cfg.max_distractors);
  const double streak_half = static_cast<double>(cfg.thickness) / 2.0;
  for (std::size_t k = 0; k < distractors; ++k) {
    const std::size_t len = uniform_index(rng, cfg.distractor_min_length, cfg.distractor_max_length);
    const double cx = rng.uniform(streak_half, static_cast<double>(W) - streak_half);
    const double slope = rng.uniform(-0.3, 0.3);
    const std::size_t y0 = uniform_index(rng, 0, H - len);
    const double strength = cfg.lane_contrast * rng.uniform(0.8, 1.2);
    for (std::size_t y = y0; y < y0 + len; ++y) {
      const double x_center = cx + slope * static_cast<double>(y - y0);
      const long start = band_start(x_center, cfg.thickness);
      for (long xi = std::max(0L, start); xi < start + static_cast<long>(cfg.thickness); ++xi) {
        if (xi >= static_cast<long>(W)) break;
        const auto x = static_cast<std::size_t>(xi);
        if (near_lane(sample.inst_gt, y, x, kDistractorClearance)) continue;
        for (std::size_t c = 0; c < C; ++c) sample.image.at(c, y, x) += strength;
      }
    }
  }

  for (double& v : sample.image.data()) {
    v = std::clamp(v + cfg.noise_level * rng.normal(), -1.0, 1.0);
  }
  sample.inst_gt = sample.inst_gt.normalized();
  return sample;
}

LaneDataset gen_lane_dataset(const DatasetConfig& config) {
  config.validate();
  LaneDataset ds;
  ds.config = config;
  for (std::size_t i = 0; i < config.train_size; ++i) {
    ds.train.push_back(gen_lane_sample(config, Split::train, i));
  }
  for (std::size_t i = 0; i < config.val_size; ++i) {
    ds.val.push_back(gen_lane_sample(config, Split::val, i));
  }
  for (std::size_t i = 0; i < config.test_size; ++i) {
    ds.test.push_back(gen_lane_sample(config, Split::test, i));
  }
  return ds;
}

namespace {

std::filesystem::path sample_path(Split split, std::size_t index) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%05zu.bin", to_string(split).c_str(), index);
  return std::filesystem::path("samples") / name;
}

Tensor instance_tensor(const InstanceMap& map) {
  Tensor t(Shape{map.height, map.width});
  for (std::size_t i = 0; i < map.size(); ++i) t[i] = map.ids[i];
  return t;
}

InstanceMap instance_map_from(const Tensor& t) {
  if (t.rank() != 2) throw std::runtime_error("instance tensor must be H x W");
  InstanceMap map(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < map.size(); ++i) map.ids[i] = static_cast<int>(t[i]);
  return map;
}

}  // namespace

std::vector<std::filesystem::path> dataset_files(const LaneDataset& dataset) {
  std::vector<std::filesystem::path> files{"manifest.json"};
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (std::size_t i = 0; i < dataset.split(s).size(); ++i) files.push_back(sample_path(s, i));
  }
  return files;
}

void save_dataset(const std::filesystem::path& dir, const LaneDataset& dataset) {
  std::filesystem::create_directories(dir / "samples");
  nlohmann::json manifest;
  manifest["format"] = "plequiv.lane_dataset.v1";
  manifest["config"] = dataset.config;
  manifest["counts"] = {{"train", dataset.train.size()},
                        {"val", dataset.val.size()},
                        {"test", dataset.test.size()}};
  {
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write dataset manifest in " + dir.string());
    os << manifest.dump(2) << '\n';
  }
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto& samples = dataset.split(s);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      save_tensors(dir / sample_path(s, i), {{"image", samples[i].image},
                                             {"seg_gt", samples[i].seg_gt},
                                             {"inst_gt", instance_tensor(samples[i].inst_gt)}});
    }
  }
}

LaneDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no dataset manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(is);
  if (manifest.value("format", "") != "plequiv.lane_dataset.v1") {
    throw std::runtime_error(dir.string() + ": unrecognized dataset format");
  }
  LaneDataset ds;
  ds.config = manifest.at("config").get<DatasetConfig>();
  for (Split s : {Split::train, Split::val, Split::test}) {
    const std::size_t count = manifest.at("counts").at(to_string(s)).get<std::size_t>();
    auto& samples = s == Split::train ? ds.train : s == Split::val ? ds.val : ds.test;
    for (std::size_t i = 0; i < count; ++i) {
      const auto tensors = load_tensors(dir / sample_path(s, i));
      LaneSample sample;
      sample.image = find_tensor(tensors, "image");
      sample.seg_gt = find_tensor(tensors, "seg_gt");
      sample.inst_gt = instance_map_from(find_tensor(tensors, "inst_gt"));
      samples.push_back(std::move(sample));
    }
  }
  return ds;
}

}  // namespace plequiv
