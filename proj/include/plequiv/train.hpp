#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plequiv/attacks.hpp"
#include "plequiv/autodiff.hpp"
#include "plequiv/lane_data.hpp"
#include "plequiv/segnet.hpp"

namespace plequiv {

enum class TrainMethod { standard, fbf, fbf_trades };
std::string to_string(TrainMethod method);
TrainMethod parse_train_method(const std::string& name);

/// Validation score used to pick the best checkpoint (F-measure + SBD).
enum class Selection { natural, adversarial, sum };
std::string to_string(Selection selection);
Selection parse_selection(const std::string& name);

/// Pixel count the default TRADES weight is calibrated against.
inline constexpr double kReferencePixels = 57600.0;
inline constexpr double kReferenceBeta = 2.0e-5;

struct TrainConfig {
  TrainMethod method = TrainMethod::standard;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double epsilon = 8.0 / 255.0;
  /// FBF ascent step; 1.25 * epsilon when unset.
  std::optional<double> fgsm_step;
  std::size_t trades_steps = 10;
  /// TRADES inner step; epsilon / 10 when unset.
  std::optional<double> trades_step;
  /// TRADES weight; kReferenceBeta * kReferencePixels / (H * W) when unset.
  std::optional<double> beta;
  /// Epsilon and both ascent steps grow linearly to full size over the first
  /// epsilon_warmup epochs (epoch e uses (e + 1) / epsilon_warmup of each).
  std::size_t epsilon_warmup = 8;
  /// Lane-pixel weight in the segmentation cross-entropy.
  double pos_weight = kLanePosWeight;
  std::uint64_t seed = 1;

  SegNetConfig model;
  DiscriminativeParams disc;
  ClusterParams cluster;

  /// Per-epoch validation attack.
  AttackConfig val_attack;
  /// Validate on the first val_limit samples only (0 = all).
  std::size_t val_limit = 0;
  Selection selection = Selection::natural;
  std::size_t threads = 1;

  void validate() const;
  double resolved_fgsm_step() const;
  double resolved_trades_step() const;
  double resolved_beta(std::size_t height, std::size_t width) const;
  /// Fraction of epsilon in effect at `epoch`.
  double epsilon_scale(std::size_t epoch) const;
};

/// SGD with classical momentum: v <- mu v + g; theta <- theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads);
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  double lr_ = 0.0;
  double momentum_ = 0.0;
  std::vector<Tensor> velocity_;
};

struct EpochStats {
  double mean_loss = 0.0;
  std::size_t batches = 0;
  std::uint64_t backward_calls = 0;
  /// Largest ||delta||_inf at a weight update (FBF methods).
  double max_delta = 0.0;
  /// Largest ||x' - x||_inf among TRADES inputs.
  double max_trades_offset = 0.0;
};

/// Training loss on one sample held by a tape.
Var sample_loss(const BoundSegNet& net, const Tensor& x, const LaneSample& sample,
                const DiscriminativeParams& disc, double pos_weight = kLanePosWeight);

/// TRADES inputs x' for each x: x + 0.001 N(0, I), then `steps` signed steps
/// of size `step` maximizing the pixel-summed binary KL between the
/// segmentation of x (held constant) and of x', kept in the epsilon ball and
/// the domain. One backward pass per step over the whole batch.
std::vector<Tensor> trades_adversarial_inputs(const SegNet& model, std::span<const Tensor> xs,
                                              std::size_t steps, double step, double epsilon,
                                              std::span<const std::uint64_t> seeds);

/// seg_loss + instance_loss + beta * KL(seg(x) || seg(x')) on `tape`, with x'
/// precomputed by trades_adversarial_inputs.
Var trades_total_loss(const BoundSegNet& net, const Tensor& x, const Tensor& x_adv,
                      const LaneSample& sample, const DiscriminativeParams& disc, double beta,
                      double pos_weight = kLanePosWeight);

/// Convenience wrapper that also builds x' (seeded by `seed`) and evaluates the
/// loss value at the model's current parameters.
double trades_total_loss(const SegNet& model, const Tensor& x, const LaneSample& sample,
                         const TrainConfig& cfg, std::uint64_t seed);

/// One pass over `data` with the configured method. `epoch` keys sample order
/// and perturbations, so an epoch is a pure function of (model, optimizer, cfg, epoch).
EpochStats run_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                     const TrainConfig& cfg, std::size_t epoch);

EpochStats standard_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                          const TrainConfig& cfg, std::size_t epoch);
EpochStats fbf_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                     const TrainConfig& cfg, std::size_t epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  SegScores natural;
  SegScores adversarial;
  std::uint64_t backward_calls = 0;
  /// Wall time; not kept in checkpoints.
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::optional<std::size_t> best_epoch;
  double best_score = 0.0;
};

/// Resumable training state.
struct TrainState {
  SegNet model;
  SgdMomentum optimizer;
  SegNet best_model;
  std::size_t next_epoch = 0;
  TrainHistory history;
};

void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path);

struct TrainResult {
  SegNet final_model;
  SegNet best_model;
  TrainHistory history;
};

/// Called after each epoch with the state to checkpoint.
using EpochCallback = std::function<void(const TrainState& state)>;

/// Runs epochs [resume.next_epoch, cfg.epochs) starting from `resume`, or from
/// a fresh He-initialized model when no state is given.
TrainResult train(const TrainConfig& cfg, const LaneDataset& dataset,
                  std::optional<TrainState> resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// Per-epoch CSV; wall-clock times are left out so reruns are byte-identical.
void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);

}  // namespace plequiv
