#include "plequiv/stats.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace plequiv {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kPerturbStream = 0x70657274ULL;  // "pert"

std::uint64_t fmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double log_gamma(double x) {
#if defined(__GLIBC__) || defined(__APPLE__)
  int sign = 0;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 2000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

// Acklam's rational approximation to the normal quantile (rel. error ~1e-9);
// used only as the starting point for Halley refinement.
double acklam_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - p_low) {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index)
    : key_(fmix64(seed ^ fmix64((stream + kGolden) ^ fmix64(index + 2 * kGolden)))) {}

std::uint64_t CounterRng::next_u64() {
  ++position_;
  return fmix64(key_ + position_ * kGolden);
}

double CounterRng::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::uniform(double lo, double hi) {
  return lo + (hi - lo) * ((static_cast<double>(next_u64() >> 11)) * 0x1.0p-53);
}

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return fmix64(fmix64(seed + kGolden) ^ fmix64(a + 3 * kGolden) ^ fmix64(fmix64(b) + 5 * kGolden));
}

void ConfidenceParams::validate() const {
  if (n < 1) throw std::invalid_argument("confidence bound: n must be >= 1");
  if (k > n) throw std::invalid_argument("confidence bound: k must satisfy 0 <= k <= n");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("confidence bound: alpha must lie in (0, 1)");
  }
}

void NoiseSpec::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw std::invalid_argument("noise sigma must be positive and finite");
  }
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("incomplete beta: a, b must be > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete beta: x outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double lower_conf_bound(std::uint64_t k, std::uint64_t n, double alpha) {
  ConfidenceParams{k, n, alpha}.validate();
  if (k == 0) return 0.0;
  // P(Binomial(n, p) >= k) = I_p(k, n - k + 1), increasing in p.
  const double a = static_cast<double>(k);
  const double b = static_cast<double>(n - k + 1);
  double lo = 0.0;
  double hi = 1.0;
  while (hi - lo > 1e-13) {
    const double mid = 0.5 * (lo + hi);
    if (regularized_incomplete_beta(a, b, mid) <= alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

double lower_conf_bound(const ConfidenceParams& params) {
  return lower_conf_bound(params.k, params.n, params.alpha);
}

long double std_normal_cdf(long double x) {
  return 0.5L * std::erfc(-x / std::numbers::sqrt2_v<long double>);
}

long double std_normal_quantile(long double p) {
  if (!(p > 0.0L && p < 1.0L)) {
    throw std::domain_error("normal quantile: p must lie in (0, 1), got " +
                            std::to_string(static_cast<double>(p)));
  }
  long double x = acklam_quantile(static_cast<double>(p));
  if (!std::isfinite(static_cast<double>(x))) x = 0.0L;
  const long double sqrt_2pi = std::sqrt(2.0L * std::numbers::pi_v<long double>);
  for (int iter = 0; iter < 4; ++iter) {
    // Work with the smaller tail to avoid cancellation near 1.
    long double err;
    if (x > 0.0L) {
      const long double upper = 0.5L * std::erfc(x / std::numbers::sqrt2_v<long double>);
      err = (1.0L - p) - upper;
    } else {
      err = std_normal_cdf(x) - p;
    }
    const long double u = err * sqrt_2pi * std::exp(x * x / 2.0L);
    const long double step = u / (1.0L + x * u / 2.0L);
    x -= step;
    if (std::abs(step) < 1e-19L * (1.0L + std::abs(x))) break;
  }
  return x;
}

Tensor gaussian_perturb(const Tensor& x, const NoiseSpec& spec, std::uint64_t index) {
  spec.validate();
  CounterRng rng(spec.seed, kPerturbStream, index);
  Tensor out = x;
  for (double& v : out.data()) v += spec.sigma * rng.normal();
  return out;
}

}  // namespace plequiv
