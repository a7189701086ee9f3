#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "plequiv/autodiff.hpp"
#include "plequiv/lane_data.hpp"
#include "plequiv/segnet.hpp"
#include "plequiv/tensor.hpp"

namespace plequiv {

enum class Norm { linf, l2 };
std::string to_string(Norm norm);
Norm parse_norm(const std::string& name);

/// Which loss the attacker maximizes.
enum class AttackLoss {
  full,          // segmentation cross-entropy + discriminative loss
  segmentation,  // segmentation cross-entropy only
};
std::string to_string(AttackLoss loss);
AttackLoss parse_attack_loss(const std::string& name);

struct AttackConfig {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t steps = 20;
  bool random_start = true;
  AttackLoss loss = AttackLoss::full;
  /// Lane-pixel weight in the attacked cross-entropy.
  double pos_weight = kLanePosWeight;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr double kDomainLo = -1.0;
inline constexpr double kDomainHi = 1.0;

/// Projects `x` onto the `norm` ball of radius `epsilon` around `center`,
/// then clips to the input domain.
Tensor project(const Tensor& x, const Tensor& center, Norm norm, double epsilon);

/// Signed-gradient step of size `epsilon` on a generic differentiable loss.
Tensor fgsm(const InputLoss& loss, const Tensor& x, double epsilon);

/// PGD on a generic loss. `point_seed` keys the random start.
Tensor pgd(const InputLoss& loss, const Tensor& x, const AttackConfig& cfg,
           std::uint64_t point_seed);

/// Training loss of `model` on `target` as a function of the input.
InputLoss attack_objective(const SegNet& model, const LaneSample& target, AttackLoss loss,
                           const DiscriminativeParams& disc = {},
                           double pos_weight = kLanePosWeight);

Tensor fgsm(const SegNet& model, const Tensor& x, const LaneSample& target, double epsilon,
            AttackLoss loss = AttackLoss::full, double pos_weight = kLanePosWeight);
Tensor pgd(const SegNet& model, const Tensor& x, const LaneSample& target, const AttackConfig& cfg,
           std::uint64_t point_seed);

/// Mean scores over `samples`, clean and under `cfg`. Sample i is attacked
/// with seed derive_seed(cfg.seed, i).
struct AttackEvaluation {
  SegScores natural;
  SegScores adversarial;
};
AttackEvaluation evaluate_under_attack(const SegNet& model, std::span<const LaneSample> samples,
                                       const AttackConfig& cfg, const ClusterParams& cluster,
                                       std::size_t threads);
/// Per-sample scores, same seeding as evaluate_under_attack.
std::vector<AttackEvaluation> attack_each(const SegNet& model, std::span<const LaneSample> samples,
                                          const AttackConfig& cfg, const ClusterParams& cluster,
                                          std::size_t threads);
AttackEvaluation mean_evaluation(std::span<const AttackEvaluation> rows);

inline constexpr const char* kAttackSchema = "plequiv.attack.v1";
void write_attack_csv(const std::filesystem::path& path, std::span<const AttackEvaluation> rows);

struct SecurityPoint {
  double epsilon = 0.0;
  SegScores scores;
};

/// For each epsilon, `steps`-step PGD with step 3*epsilon/(2*steps). Epsilon 0
/// is the natural performance. Epsilons must be nonnegative and increasing.
std::vector<SecurityPoint> security_curve(const SegNet& model, std::span<const LaneSample> samples,
                                          std::span<const double> epsilons, Norm norm,
                                          std::size_t steps, bool random_start, std::uint64_t seed,
                                          const ClusterParams& cluster, std::size_t threads);

void write_security_csv(const std::filesystem::path& path, std::span<const SecurityPoint> curve);

struct TraceOptions {
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t max_steps = 50;
  bool random_start = true;
  /// Report the best loss seen so far instead of the current iterate's.
  bool best_so_far = false;
  AttackLoss loss = AttackLoss::full;
  double pos_weight = kLanePosWeight;
};

/// Loss after each of max_steps L-inf PGD iterations (entry k is after k+1 steps).
std::vector<double> pgd_loss_trace(const InputLoss& loss, const Tensor& x,
                                   const TraceOptions& options, std::uint64_t point_seed);

/// Per-step mean trace over several samples.
std::vector<double> mean_pgd_loss_trace(const SegNet& model, std::span<const LaneSample> samples,
                                        const TraceOptions& options, std::uint64_t seed,
                                        std::size_t threads);

void write_trace_csv(const std::filesystem::path& path, std::span<const double> trace);

}  // namespace plequiv
