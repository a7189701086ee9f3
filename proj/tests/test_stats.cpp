#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "oracles.hpp"
#include "plequiv/stats.hpp"

using namespace plequiv;

using oracle::phi;
using oracle::tail_bisection;

TEST_CASE("lower_conf_bound matches binomial tail bisection") {
  for (unsigned n = 1; n <= 30; ++n) {
    for (unsigned k = 0; k <= n; ++k) {
      for (double alpha : {0.01, 0.05, 0.1}) {
        CHECK(std::abs(lower_conf_bound(k, n, alpha) - tail_bisection(k, n, alpha)) <= 1e-9);
      }
    }
  }
}

TEST_CASE("lower_conf_bound closed forms") {
  CHECK(lower_conf_bound(0, 10, 0.05) == 0.0);
  // k = n: alpha^(1/n)
  CHECK(lower_conf_bound(160, 160, 0.05) == doctest::Approx(std::pow(0.05, 1.0 / 160.0)).epsilon(1e-12));
  CHECK(lower_conf_bound(1, 1, 0.05) == doctest::Approx(0.05).epsilon(1e-12));
  // k = 1: 1 - (1 - alpha)^(1/n)
  CHECK(lower_conf_bound(1, 7, 0.1) == doctest::Approx(1.0 - std::pow(0.9, 1.0 / 7.0)).epsilon(1e-12));
}

TEST_CASE("lower_conf_bound is monotone and below the point estimate") {
  for (unsigned n : {5u, 50u, 160u}) {
    double prev = -1.0;
    for (unsigned k = 0; k <= n; ++k) {
      const double b = lower_conf_bound(k, n, 0.05);
      CHECK(b > prev);
      CHECK(b <= static_cast<double>(k) / n);
      prev = b;
    }
    CHECK(lower_conf_bound(n / 2, n, 0.01) < lower_conf_bound(n / 2, n, 0.1));
  }
}

TEST_CASE("lower_conf_bound rejects bad arguments") {
  CHECK_THROWS_AS(lower_conf_bound(3, 2, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(lower_conf_bound(0, 0, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(lower_conf_bound(1, 2, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(lower_conf_bound(1, 2, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(lower_conf_bound(ConfidenceParams{1, 2, std::nan("")}), std::invalid_argument);
}

TEST_CASE("regularized incomplete beta identities") {
  for (double x : {0.0, 0.1, 0.37, 0.5, 0.93, 1.0}) {
    CHECK(regularized_incomplete_beta(2.5, 1.0, x) == doctest::Approx(std::pow(x, 2.5)).epsilon(1e-12));
    CHECK(regularized_incomplete_beta(1.0, 3.0, x) == doctest::Approx(1.0 - std::pow(1.0 - x, 3.0)).epsilon(1e-12));
    CHECK(regularized_incomplete_beta(4.0, 7.0, x) ==
          doctest::Approx(1.0 - regularized_incomplete_beta(7.0, 4.0, 1.0 - x)).epsilon(1e-12));
  }
  CHECK(regularized_incomplete_beta(12.0, 12.0, 0.5) == doctest::Approx(0.5).epsilon(1e-13));
  CHECK_THROWS_AS(regularized_incomplete_beta(0.0, 1.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(regularized_incomplete_beta(1.0, 1.0, 1.5), std::invalid_argument);
}

TEST_CASE("normal cdf against erfc and known values") {
  CHECK(static_cast<double>(std_normal_cdf(0.0L)) == 0.5);
  CHECK(static_cast<double>(std_normal_cdf(-1.0L)) == doctest::Approx(0.15865525393145707).epsilon(1e-15));
  CHECK(static_cast<double>(std_normal_cdf(1.959963984540054L)) == doctest::Approx(0.975).epsilon(1e-15));
  for (double x = -8.0; x <= 8.0; x += 0.25) {
    CHECK(static_cast<double>(std_normal_cdf(x)) == doctest::Approx(phi(x)).epsilon(1e-13));
  }
}

TEST_CASE("normal quantile round trip on [-6, 6]") {
  double worst = 0.0;
  for (int i = -6000; i <= 6000; ++i) {
    const long double x = i * 1e-3L;
    worst = std::max(worst, static_cast<double>(std::fabs(std_normal_quantile(std_normal_cdf(x)) - x)));
  }
  CHECK(worst <= 1e-10);
  CHECK(static_cast<double>(std_normal_quantile(0.975L)) == doctest::Approx(1.959963984540054).epsilon(1e-14));
  CHECK_THROWS_AS(std_normal_quantile(0.0L), std::domain_error);
  CHECK_THROWS_AS(std_normal_quantile(1.0L), std::domain_error);
}

TEST_CASE("maximum radius for n = 160, alpha = 0.05, sigma = 0.1") {
  const double p = lower_conf_bound(160, 160, 0.05);
  const double r = 0.1 * static_cast<double>(std_normal_quantile(p));
  // Independent: bisection on the erfc-based cdf.
  double lo = 0.0, hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < std::pow(0.05, 1.0 / 160.0) ? lo : hi) = mid;
  }
  CHECK(r == doctest::Approx(0.1 * lo).epsilon(1e-10));
  CHECK(std::abs(r - 0.2085) < 1e-4);
}

TEST_CASE("counter rng is a pure function of its coordinates") {
  CounterRng a(7, 1, 3), b(7, 1, 3), c(7, 1, 4), d(8, 1, 3);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
    CHECK(va != d.next_u64());
  }
  CHECK(a.position() == 100);
}

TEST_CASE("counter rng moments") {
  CounterRng rng(42, 0, 0);
  const int n = 200000;
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(std::abs(su / n - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
  CHECK(std::abs(sn / n) < 4.0 / std::sqrt(n));
  CHECK(std::abs(sn2 / n - 1.0) < 4.0 * std::sqrt(2.0 / n));
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.uniform(-2.0, 3.0);
    REQUIRE(v >= -2.0);
    REQUIRE(v < 3.0);
  }
}

TEST_CASE("derive_seed separates labels") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a) {
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(9, a, b));
  }
  CHECK(seen.size() == 2500);
  CHECK(derive_seed(1, 2) == derive_seed(1, 2, 0));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("gaussian_perturb is reproducible per index") {
  Tensor x(Shape{3, 20, 20});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * static_cast<double>(i % 17);
  const NoiseSpec spec{0.25, 11};
  const Tensor a = gaussian_perturb(x, spec, 5);
  CHECK(a == gaussian_perturb(x, spec, 5));
  CHECK_FALSE(a == gaussian_perturb(x, spec, 6));
  double s2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s2 += (a[i] - x[i]) * (a[i] - x[i]);
  CHECK(std::sqrt(s2 / x.size()) == doctest::Approx(0.25).epsilon(0.05));
  CHECK_THROWS_AS(gaussian_perturb(x, NoiseSpec{0.0, 1}, 0), std::invalid_argument);
}
