#pragma once

// Independent reference implementations used as test oracles.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "plequiv/certify.hpp"
#include "plequiv/stats.hpp"

namespace oracle {

// P(Binomial(n, p) >= k) by direct summation.
inline long double binomial_upper_tail(unsigned k, unsigned n, long double p) {
  long double total = 0.0L;
  for (unsigned j = k; j <= n; ++j) {
    const long double log_c = std::lgamma(static_cast<long double>(n) + 1) -
                              std::lgamma(static_cast<long double>(j) + 1) -
                              std::lgamma(static_cast<long double>(n - j) + 1);
    total += std::exp(log_c + j * std::log(p) + (n - j) * std::log1p(-p));
  }
  return total;
}

// Smallest p with P(X >= k) >= alpha, by bisection on the summed tail.
inline double tail_bisection(unsigned k, unsigned n, double alpha) {
  if (k == 0) return 0.0;
  long double lo = 0.0L, hi = 1.0L;
  for (int i = 0; i < 200; ++i) {
    const long double mid = 0.5L * (lo + hi);
    (binomial_upper_tail(k, n, mid) < alpha ? lo : hi) = mid;
  }
  return static_cast<double>(0.5L * (lo + hi));
}

inline double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double phi_inverse(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct Smoothed {
  bool certified = false;
  double radius = 0.0;
  std::uint64_t count = 0;
};

// Single-class smoothing certifier for a classifier: counts probes that keep
// the base class, bounds the rate and converts it to a radius.
template <typename Classify>
Smoothed smoothing_certificate(Classify classify, const plequiv::Tensor& x0, double sigma,
                               unsigned n, double alpha, std::uint64_t noise_seed) {
  const int base = classify(x0);
  Smoothed s;
  for (unsigned i = 0; i < n; ++i) {
    s.count += classify(plequiv::gaussian_perturb(x0, {sigma, noise_seed}, i)) == base;
  }
  const double p = tail_bisection(static_cast<unsigned>(s.count), n, alpha);
  if (p > 0.5) {
    s.certified = true;
    s.radius = sigma * phi_inverse(p);
  }
  return s;
}

}  // namespace oracle
