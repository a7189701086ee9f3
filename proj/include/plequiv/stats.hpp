#pragma once

#include <cstdint>

#include "plequiv/tensor.hpp"

namespace plequiv {

/// Counter-based generator: every draw is a pure function of
/// (seed, stream, index, position), so results do not depend on call order
/// or on how work is split across threads.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);
  double normal();

  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t key_;
  std::uint64_t position_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a master seed with two labels into an independent child seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct ConfidenceParams {
  std::uint64_t k;
  std::uint64_t n;
  double alpha;

  void validate() const;
};

struct NoiseSpec {
  double sigma;
  std::uint64_t seed;

  void validate() const;
};

/// Regularized incomplete beta function I_x(a, b) for a, b > 0.
double regularized_incomplete_beta(double a, double b, double x);

/// One-sided Clopper-Pearson lower confidence bound on a binomial proportion:
/// the alpha-quantile of Beta(k, n - k + 1), found by bisection on
/// P(Binomial(n, p) >= k) = alpha. Returns 0 for k = 0.
double lower_conf_bound(std::uint64_t k, std::uint64_t n, double alpha);
double lower_conf_bound(const ConfidenceParams& params);

/// Standard normal CDF. Evaluated in extended precision so that the quantile
/// round trip stays below 1e-10 out to |x| = 6.
long double std_normal_cdf(long double x);

/// Inverse of std_normal_cdf. Throws std::domain_error unless 0 < p < 1.
long double std_normal_quantile(long double p);

/// x + eps with eps ~ N(0, sigma^2 I), fully determined by (spec.seed, index).
Tensor gaussian_perturb(const Tensor& x, const NoiseSpec& spec, std::uint64_t index);

}  // namespace plequiv
