#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plequiv/metrics.hpp"
#include "plequiv/tensor.hpp"

namespace plequiv {

/// Synthetic lane images: near-vertical thick line segments over a smooth
/// textured background with Gaussian pixel noise, values in [-1, 1].
struct DatasetConfig {
  std::size_t height = 32;
  std::size_t width = 64;
  std::size_t channels = 3;
  std::size_t min_lanes = 2;
  std::size_t max_lanes = 4;
  std::size_t thickness = 2;
  double lane_contrast = 0.2;
  /// Faint per-channel lane tint (+a, -a, +a, ...) on top of the brightness contrast.
  double chroma_cue = 0.05;
  /// Short unlabeled streaks as bright as lanes but without the tint.
  std::size_t min_distractors = 6;
  std::size_t max_distractors = 12;
  std::size_t distractor_min_length = 2;
  std::size_t distractor_max_length = 4;
  double texture_amplitude = 0.25;
  double noise_level = 0.01;
  std::size_t train_size = 400;
  std::size_t val_size = 40;
  std::size_t test_size = 80;
  std::uint64_t seed = 2024;

  /// Throws std::invalid_argument, e.g. when max_lanes lanes cannot fit side by side.
  void validate() const;
};

struct LaneSample {
  Tensor image;        // C x H x W
  Tensor seg_gt;       // H x W, 0/1
  InstanceMap inst_gt; // 0 background, 1..K lanes
};

enum class Split { train, val, test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

struct LaneDataset {
  DatasetConfig config;
  std::vector<LaneSample> train;
  std::vector<LaneSample> val;
  std::vector<LaneSample> test;

  const std::vector<LaneSample>& split(Split s) const;
};

/// Sample `index` of `split`; a pure function of (config, split, index).
LaneSample gen_lane_sample(const DatasetConfig& config, Split split, std::size_t index);
LaneDataset gen_lane_dataset(const DatasetConfig& config);

/// Directory layout: manifest.json plus samples/<split>_<index>.bin holding
/// tensors "image", "seg_gt", "inst_gt".
void save_dataset(const std::filesystem::path& dir, const LaneDataset& dataset);
LaneDataset load_dataset(const std::filesystem::path& dir);
/// Files written by save_dataset, relative to `dir`, in write order.
std::vector<std::filesystem::path> dataset_files(const LaneDataset& dataset);

}  // namespace plequiv
