#include "plequiv/certify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "plequiv/format.hpp"
#include "plequiv/parallel.hpp"

namespace plequiv {
namespace {

constexpr std::uint64_t kDirectionStream = 0x64697273ULL;  // "dirs"

void validate(const CertifyOptions& options) {
  if (options.n < 1) throw std::invalid_argument("certify: n must be >= 1");
  if (!(options.alpha > 0.0 && options.alpha < 1.0)) {
    throw std::invalid_argument("certify: alpha must lie in (0, 1)");
  }
  NoiseSpec{options.sigma, 0}.validate();
  if (options.batch_size == 0) throw std::invalid_argument("certify: batch size must be >= 1");
}

// Evaluates `count` perturbed copies of x and returns how many are equivalent.
std::uint64_t count_equivalent(const Evaluator& f, const Tensor& x, const NoiseSpec& noise,
                               std::uint64_t count, std::size_t batch_size,
                               const EquivalenceJudge& judge) {
  std::uint64_t equivalent = 0;
  std::vector<Tensor> batch;
  batch.reserve(batch_size);
  for (std::uint64_t start = 0; start < count; start += batch_size) {
    const std::uint64_t stop = std::min<std::uint64_t>(count, start + batch_size);
    batch.clear();
    for (std::uint64_t i = start; i < stop; ++i) batch.push_back(gaussian_perturb(x, noise, i));
    const std::vector<Prediction> outputs = f(batch);
    if (outputs.size() != batch.size()) {
      throw std::runtime_error("evaluator returned " + std::to_string(outputs.size()) +
                               " outputs for " + std::to_string(batch.size()) + " inputs");
    }
    for (const auto& out : outputs) equivalent += judge(out) ? 1 : 0;
  }
  return equivalent;
}

Prediction evaluate_one(const Evaluator& f, const Tensor& x) {
  std::vector<Tensor> single{x};
  std::vector<Prediction> out = f(single);
  if (out.size() != 1) throw std::runtime_error("evaluator returned wrong number of outputs");
  return std::move(out.front());
}

}  // namespace

std::string to_string(CertStatus status) {
  switch (status) {
    case CertStatus::certified: return "CERTIFIED";
    case CertStatus::abstain: return "ABSTAIN";
    case CertStatus::error: return "ERROR";
  }
  return "?";
}

CertOutcome certificate_from_count(std::uint64_t count, std::uint64_t n, double sigma,
                                   double alpha) {
  CertOutcome outcome;
  outcome.count = count;
  outcome.n = n;
  outcome.sigma = sigma;
  outcome.alpha = alpha;
  outcome.p_lower = lower_conf_bound(count, n, alpha);
  if (outcome.p_lower > 0.5) {
    outcome.status = CertStatus::certified;
    outcome.radius = static_cast<double>(sigma * std_normal_quantile(outcome.p_lower));
  } else {
    outcome.status = CertStatus::abstain;
  }
  return outcome;
}

CertOutcome certify_probabilistic_equivalence(const Evaluator& f, const Tensor& x0,
                                              const std::optional<Prediction>& ground_truth,
                                              std::uint64_t noise_seed,
                                              const CertifyOptions& options,
                                              const EquivalenceSpec& spec) {
  validate(options);
  spec.validate();
  const EquivalenceJudge judge(spec, evaluate_one(f, x0), ground_truth);
  const NoiseSpec noise{options.sigma, noise_seed};
  const std::uint64_t count =
      count_equivalent(f, x0, noise, options.n, options.batch_size, judge);
  return certificate_from_count(count, options.n, options.sigma, options.alpha);
}

std::vector<CertOutcome> certify_dataset(const Evaluator& f, std::span<const EvalPoint> points,
                                         const CertifyOptions& options,
                                         const EquivalenceSpec& spec, std::uint64_t master_seed,
                                         std::size_t threads) {
  validate(options);
  spec.validate();
  std::vector<CertOutcome> outcomes(points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) {
    try {
      outcomes[i] = certify_probabilistic_equivalence(f, points[i].x, points[i].ground_truth,
                                                      derive_seed(master_seed, i), options, spec);
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception& e) {
      CertOutcome failed;
      failed.status = CertStatus::error;
      failed.n = options.n;
      failed.sigma = options.sigma;
      failed.alpha = options.alpha;
      failed.error = e.what();
      outcomes[i] = std::move(failed);
    }
  });
  return outcomes;
}

double mean_radius(std::span<const CertOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("robustness score: empty evaluation set");
  double total = 0.0;
  for (const auto& o : outcomes) total += o.effective_radius();
  return total / static_cast<double>(outcomes.size());
}

double robustness_score(const Evaluator& f, std::span<const EvalPoint> points,
                        const CertifyOptions& options, const EquivalenceSpec& spec,
                        std::uint64_t master_seed, std::size_t threads) {
  if (points.empty()) throw std::invalid_argument("robustness score: empty evaluation set");
  const auto outcomes = certify_dataset(f, points, options, spec, master_seed, threads);
  return mean_radius(outcomes);
}

RobustnessCurve robustness_curve(std::span<const CertOutcome> outcomes,
                                 std::span<const double> grid) {
  if (grid.empty()) throw std::invalid_argument("robustness curve: empty radius grid");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) {
      throw std::invalid_argument("robustness curve: grid must be strictly increasing");
    }
  }
  if (outcomes.empty()) throw std::invalid_argument("robustness curve: no outcomes");
  RobustnessCurve curve;
  curve.radii.assign(grid.begin(), grid.end());
  for (double r : grid) {
    std::size_t hits = 0;
    for (const auto& o : outcomes) hits += o.effective_radius() >= r ? 1 : 0;
    curve.fraction_certified.push_back(static_cast<double>(hits) /
                                       static_cast<double>(outcomes.size()));
  }
  return curve;
}

SoundnessReport empirical_soundness_check(const Evaluator& f, const Tensor& x0,
                                          const std::optional<Prediction>& ground_truth,
                                          const EquivalenceSpec& spec, double sigma,
                                          const CertOutcome& outcome,
                                          const SoundnessOptions& options) {
  if (outcome.status != CertStatus::certified || !outcome.radius) {
    throw std::invalid_argument("soundness check requires a certified outcome");
  }
  if (options.probe_count == 0) throw std::invalid_argument("soundness check: probe_count is 0");
  const EquivalenceJudge judge(spec, evaluate_one(f, x0), ground_truth);

  std::vector<Tensor> directions;
  if (!options.explicit_directions.empty()) {
    directions = options.explicit_directions;
  } else {
    for (std::size_t d = 0; d < options.directions; ++d) {
      CounterRng rng(options.seed, kDirectionStream, d);
      Tensor u(x0.shape());
      for (double& v : u.data()) v = rng.normal();
      directions.push_back(std::move(u));
    }
  }

  SoundnessReport report;
  const double slack =
      options.slack_std_errors * std::sqrt(0.25 / static_cast<double>(options.probe_count));
  for (std::size_t d = 0; d < directions.size(); ++d) {
    Tensor u = directions[d];
    require_same_shape(u, x0, "soundness direction");
    const double norm = l2_norm(u);
    if (norm == 0.0) throw std::invalid_argument("soundness check: zero direction");
    for (double& v : u.data()) v /= norm;
    for (std::size_t k = 0; k < options.radius_fractions.size(); ++k) {
      const double dist = options.radius_fractions[k] * *outcome.radius;
      Tensor x = x0;
      auto xd = x.data();
      auto ud = u.data();
      for (std::size_t i = 0; i < xd.size(); ++i) xd[i] += dist * ud[i];
      const NoiseSpec noise{sigma, derive_seed(options.seed, d, k)};
      const std::uint64_t hits =
          count_equivalent(f, x, noise, options.probe_count, 64, judge);
      SoundnessProbe probe;
      probe.direction = d;
      probe.distance = dist;
      probe.estimate = static_cast<double>(hits) / static_cast<double>(options.probe_count);
      probe.slack = slack;
      probe.pass = probe.estimate >= 0.5 - slack;
      report.passed = report.passed && probe.pass;
      report.probes.push_back(probe);
    }
  }
  return report;
}

void write_outcomes_csv(const std::filesystem::path& path, std::span<const CertOutcome> outcomes) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kOutcomesSchema << '\n';
  os << "point_id,status,count,p_lower,radius\n";
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    os << i << ',' << to_string(o.status) << ',' << o.count << ',' << format_real(o.p_lower)
       << ',' << (o.radius ? format_real(*o.radius) : std::string()) << '\n';
  }
}

void write_curve_csv(const std::filesystem::path& path, const RobustnessCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kCurveSchema << '\n';
  os << "r,fraction\n";
  for (std::size_t i = 0; i < curve.radii.size(); ++i) {
    os << format_real(curve.radii[i]) << ',' << format_real(curve.fraction_certified[i]) << '\n';
  }
}

}  // namespace plequiv
