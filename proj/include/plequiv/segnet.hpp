#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plequiv/autodiff.hpp"
#include "plequiv/certify.hpp"
#include "plequiv/lane_data.hpp"
#include "plequiv/metrics.hpp"
#include "plequiv/tensor.hpp"
#include "plequiv/tensor_io.hpp"

namespace plequiv {

/// Two-branch instance segmentation network: a shared 3-layer 3x3 conv trunk
/// feeding a binary segmentation head and an instance embedding head, each a
/// 3x3 conv + ReLU followed by a 1x1 conv, with separate parameters. The
/// embedding head can also see two coordinate maps (column, row in [-1, 1]).
struct SegNetConfig {
  std::size_t in_channels = 3;
  std::size_t trunk_width = 8;
  std::size_t head_width = 8;
  std::size_t embed_dim = 4;
  /// Dilation of the three trunk convolutions.
  std::array<std::size_t, 3> trunk_dilation{1, 2, 4};
  bool coord_channels = true;
};

class SegNet {
 public:
  SegNet() = default;
  /// Zero-initialized parameters (segmentation probabilities are all 0.5).
  explicit SegNet(SegNetConfig config);
  /// He-normal weights, zero biases.
  static SegNet initialized(SegNetConfig config, std::uint64_t seed);

  const SegNetConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Parameters plus a "meta/segnet_config" tensor.
  std::vector<NamedTensor> to_tensors() const;
  static SegNet from_tensors(const std::vector<NamedTensor>& tensors);

 private:
  SegNetConfig config_;
  std::vector<NamedTensor> params_;
};

/// Model parameters placed on a tape.
struct BoundSegNet {
  const SegNet* model = nullptr;
  std::vector<Var> params;
};
BoundSegNet bind(Tape& tape, const SegNet& model, bool trainable);

struct SegNetVars {
  Var seg_logits;  // 1 x H x W
  Var seg_probs;   // 1 x H x W
  Var embedding;   // E x H x W; unset when the embedding head is skipped
};

/// Forward pass of x (C x H x W) on the tape.
SegNetVars segnet_forward(const BoundSegNet& net, Var x, bool with_embedding = true);

struct SegOutput {
  Tensor seg_probs;  // H x W
  Tensor embedding;  // E x H x W
};

/// Inference-only forward pass.
SegOutput segnet_forward(const SegNet& model, const Tensor& x);

/// Default weight of lane pixels in the segmentation cross-entropy.
inline constexpr double kLanePosWeight = 5.0;

/// Training objective on one sample: segmentation cross-entropy (lane pixels
/// weighted by pos_weight) plus the discriminative embedding loss.
Var segmentation_loss(const SegNetVars& out, const LaneSample& sample,
                      const DiscriminativeParams& disc, double pos_weight = kLanePosWeight);

struct ClusterParams {
  double threshold = 0.5;
  /// Assignment radius in embedding space.
  double radius = 1.5;
  int max_rounds = 10;
};

/// Greedy clustering of lane pixels (seg_probs > threshold) in embedding space.
/// Seeds are taken in row-major order; each cluster absorbs every unassigned
/// lane pixel within `radius` of its running mean until the mean is stable.
InstanceMap cluster_instances(const Tensor& seg_probs, const Tensor& embedding,
                              const ClusterParams& params = {});

/// Binary lane mask + clustered instances.
Prediction predict(const SegNet& model, const Tensor& x, const ClusterParams& params = {});

/// Evaluator adapter; the model is shared read-only across threads.
Evaluator make_segnet_evaluator(const SegNet& model, const ClusterParams& params = {});

struct SegScores {
  double f_measure = 0.0;
  double sbd = 0.0;
  double combined() const { return f_measure + sbd; }
};
SegScores score_prediction(const Prediction& pred, const LaneSample& sample);

void save_model(const std::filesystem::path& path, const SegNet& model);
SegNet load_model(const std::filesystem::path& path);

}  // namespace plequiv
