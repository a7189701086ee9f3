#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plequiv/metrics.hpp"
#include "plequiv/stats.hpp"
#include "plequiv/tensor.hpp"

namespace plequiv {

/// Batched black-box function: one Prediction per input, in order.
/// Must be safe to call concurrently when certification runs multi-threaded.
using Evaluator = std::function<std::vector<Prediction>(std::span<const Tensor>)>;

enum class CertStatus { certified, abstain, error };
std::string to_string(CertStatus status);

struct CertOutcome {
  CertStatus status = CertStatus::abstain;
  /// Present iff status == certified.
  std::optional<double> radius;
  std::uint64_t count = 0;
  double p_lower = 0.0;
  std::uint64_t n = 0;
  double sigma = 0.0;
  double alpha = 0.0;
  std::string error;

  /// Radius used by scores and curves: 0 unless certified.
  double effective_radius() const { return radius.value_or(0.0); }
};

struct CertifyOptions {
  double sigma = 0.1;
  std::uint64_t n = 160;
  double alpha = 0.05;
  std::size_t batch_size = 32;
};

/// Probabilistic local equivalence certificate for f at x0.
/// Draws n probes x0 + N(0, sigma^2 I) (probe i uses draw index i of
/// `noise_seed`), counts probes equivalent to f(x0), and returns radius
/// sigma * Phi^-1(p_lower) when the Clopper-Pearson bound p_lower exceeds 1/2.
CertOutcome certify_probabilistic_equivalence(const Evaluator& f, const Tensor& x0,
                                              const std::optional<Prediction>& ground_truth,
                                              std::uint64_t noise_seed,
                                              const CertifyOptions& options,
                                              const EquivalenceSpec& spec);

/// The decision step alone: bound and radius from an equivalence count.
CertOutcome certificate_from_count(std::uint64_t count, std::uint64_t n, double sigma,
                                   double alpha);

struct EvalPoint {
  Tensor x;
  std::optional<Prediction> ground_truth;
};

/// Certifies every point; point i draws its probes from derive_seed(master_seed, i).
/// Evaluator exceptions mark that point as error and the run continues.
std::vector<CertOutcome> certify_dataset(const Evaluator& f, std::span<const EvalPoint> points,
                                         const CertifyOptions& options,
                                         const EquivalenceSpec& spec, std::uint64_t master_seed,
                                         std::size_t threads = 1);

/// Mean certified radius with abstentions (and errors) counted as 0.
double mean_radius(std::span<const CertOutcome> outcomes);

/// Certifies all points and returns the mean radius. Throws on an empty set.
double robustness_score(const Evaluator& f, std::span<const EvalPoint> points,
                        const CertifyOptions& options, const EquivalenceSpec& spec,
                        std::uint64_t master_seed, std::size_t threads = 1);

struct RobustnessCurve {
  std::vector<double> radii;
  std::vector<double> fraction_certified;
};

/// Share of outcomes with radius >= r at each grid value (abstain counts as 0).
RobustnessCurve robustness_curve(std::span<const CertOutcome> outcomes,
                                 std::span<const double> grid);

struct SoundnessOptions {
  std::size_t probe_count = 1000;
  std::size_t directions = 20;
  /// Test points sit at these fractions of the certified radius along each direction.
  std::vector<double> radius_fractions{0.5, 0.9, 0.99};
  /// Overrides random directions when non-empty (normalized internally).
  std::vector<Tensor> explicit_directions;
  std::uint64_t seed = 0;
  /// Allowed shortfall below 1/2, in binomial standard errors.
  double slack_std_errors = 3.0;
};

struct SoundnessProbe {
  std::size_t direction = 0;
  double distance = 0.0;
  double estimate = 0.0;
  double slack = 0.0;
  bool pass = true;
};

struct SoundnessReport {
  bool passed = true;
  std::vector<SoundnessProbe> probes;
};

/// Monte Carlo falsification harness for a certificate: at points x with
/// |x - x0| < R it estimates P(x + eps is equivalent to f(x0)) and requires
/// every estimate to be at least 1/2 minus the configured slack.
SoundnessReport empirical_soundness_check(const Evaluator& f, const Tensor& x0,
                                          const std::optional<Prediction>& ground_truth,
                                          const EquivalenceSpec& spec, double sigma,
                                          const CertOutcome& outcome,
                                          const SoundnessOptions& options);

inline constexpr const char* kOutcomesSchema = "plequiv.outcomes.v1";
inline constexpr const char* kCurveSchema = "plequiv.robustness_curve.v1";

void write_outcomes_csv(const std::filesystem::path& path, std::span<const CertOutcome> outcomes);
void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve);

}  // namespace plequiv
