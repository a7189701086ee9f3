#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "plequiv/metrics.hpp"
#include "plequiv/stats.hpp"

using namespace plequiv;

namespace {

// Background plus three vertical lanes, two pixels wide.
InstanceMap three_lanes(std::size_t h = 32, std::size_t w = 64) {
  InstanceMap m(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (int lane = 0; lane < 3; ++lane) {
      const std::size_t c = 12 + 20 * static_cast<std::size_t>(lane);
      m.at(r, c) = m.at(r, c + 1) = lane + 1;
    }
  }
  return m;
}

Prediction seg(InstanceMap m) {
  Prediction p;
  p.instances = std::move(m);
  return p;
}

Prediction cls(int label) {
  Prediction p;
  p.label = label;
  return p;
}

InstanceMap random_map(std::uint64_t seed, int max_id) {
  CounterRng rng(seed, 0, 0);
  InstanceMap m(9, 11);
  for (int& v : m.ids) v = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(max_id + 1));
  return m;
}

}  // namespace

TEST_CASE("f_measure examples") {
  const InstanceMap gt = three_lanes();
  CHECK(f_measure(gt, gt) == 1.0);
  CHECK(f_measure(InstanceMap(32, 64), InstanceMap(32, 64)) == 1.0);
  CHECK(f_measure(InstanceMap(32, 64), gt) == 0.0);
  CHECK(f_measure(gt, InstanceMap(32, 64)) == 0.0);
  InstanceMap half = gt;
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 64; ++c) half.at(r, c) = 0;
  }
  // P = 1, R = 1/2.
  CHECK(f_measure(half, gt) == doctest::Approx(2.0 / 3.0));
  InstanceMap everything(32, 64, 1);
  const double p = 192.0 / 2048.0;
  CHECK(f_measure(everything, gt) == doctest::Approx(2 * p / (p + 1)));
  CHECK_THROWS_AS(f_measure(InstanceMap(2, 2), InstanceMap(2, 3)), std::invalid_argument);
}

TEST_CASE("f_measure ignores instance ids") {
  InstanceMap relabeled = three_lanes();
  for (int& v : relabeled.ids) v = v ? 4 - v : 0;
  CHECK(f_measure(relabeled, three_lanes()) == 1.0);
  CHECK(symmetric_best_dice(relabeled, three_lanes()) == 1.0);
}

TEST_CASE("symmetric best dice of a single-region prediction is about 1/4") {
  const InstanceMap gt = three_lanes();
  const InstanceMap one_region(32, 64, 1);
  const double sbd = symmetric_best_dice(one_region, gt);
  CHECK(std::abs(sbd - 0.25) <= 0.05);
  // Hand count: the ground-truth side has 4 regions; only background overlaps well.
  const double bg = 2048.0 - 192.0;
  const double expected = (2 * bg / (bg + 2048) + 3 * (2 * 64.0 / (64 + 2048))) / 4;
  CHECK(sbd == doctest::Approx(expected));
}

TEST_CASE("best dice properties on random maps") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const InstanceMap a = random_map(s, 3), b = random_map(s + 1000, 4);
    const double ab = best_dice(a, b), ba = best_dice(b, a);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(symmetric_best_dice(a, b) == std::min(ab, ba));
    CHECK(symmetric_best_dice(a, b) == symmetric_best_dice(b, a));
    CHECK(symmetric_best_dice(a, a) == 1.0);
    CHECK(symmetric_best_dice(a, a.normalized()) == 1.0);
  }
}

TEST_CASE("normalized relabels in order of appearance") {
  const InstanceMap m(1, 5, std::vector<int>{0, 7, 3, 7, 0});
  CHECK(m.normalized().ids == std::vector<int>{0, 1, 2, 1, 0});
  CHECK(m.max_id() == 7);
  CHECK_THROWS_AS(InstanceMap(2, 2, std::vector<int>{1, 2, 3}), std::invalid_argument);
}

TEST_CASE("pgm round trip") {
  const auto path = std::filesystem::temp_directory_path() / "plequiv_test_map.pgm";
  const InstanceMap m = three_lanes(5, 40);
  write_pgm(path, m);
  CHECK(read_pgm(path) == m);
  std::filesystem::remove(path);
}

TEST_CASE("relative distance edge cases") {
  CHECK(relative_distance(0.0, 0.0) == 1.0);
  CHECK(relative_distance(0.3, 0.0) == -std::numeric_limits<double>::infinity());
  CHECK(relative_distance(0.5, 0.5) == 0.0);
  CHECK(relative_distance(0.25, 0.5) == 0.5);
  CHECK(induced_distance(0.75) == 0.25);
  CHECK(is_equivalent_distance(0.0999, 0.1));
  CHECK_FALSE(is_equivalent_distance(0.1, 0.1));
}

TEST_CASE("supervised worked example with base SBD 0.674 and t = 0.1") {
  const double base = 0.674, t = 0.1;
  CHECK(is_equivalent_distance(relative_distance(0.661, base), t));
  CHECK_FALSE(is_equivalent_distance(relative_distance(0.573, base), t));
  // The probe-score threshold is (1 - t) * base.
  CHECK((1.0 - t) * base == doctest::Approx(0.6066).epsilon(1e-12));
  CHECK(is_equivalent_distance(relative_distance(0.6067, base), t));
  CHECK_FALSE(is_equivalent_distance(relative_distance(0.6065, base), t));
  // With the base score in the numerator, any probe scoring below the base passes.
  CHECK(is_equivalent_distance(relative_distance(base, 0.573), t));
}

TEST_CASE("equivalence judge modes") {
  const InstanceMap gt = three_lanes();
  InstanceMap partial = gt;
  for (auto& v : partial.ids) v = v == 3 ? 0 : v;
  EquivalenceSpec spec;
  spec.metric = MetricKind::f_measure;
  spec.threshold = 0.1;

  spec.mode = EquivalenceMode::unsupervised;
  CHECK(is_equivalent(spec, seg(gt), seg(gt)));
  CHECK_FALSE(is_equivalent(spec, seg(gt), seg(partial)));

  spec.mode = EquivalenceMode::supervised;
  CHECK_THROWS_AS(EquivalenceJudge(spec, seg(gt)), std::invalid_argument);
  const EquivalenceJudge judge(spec, seg(partial), seg(gt));
  CHECK(judge.base_score() == doctest::Approx(0.8));
  // Better than the base is always equivalent in supervised mode.
  CHECK(judge(seg(gt)));
  CHECK(judge.distance(seg(gt)) < 0.0);
  CHECK_FALSE(judge(seg(InstanceMap(32, 64))));

  spec.threshold = 1.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("accuracy metric reduces equivalence to equal labels for every t") {
  for (double t : {0.1, 0.5, 0.9}) {
    EquivalenceSpec spec;
    spec.metric = MetricKind::accuracy;
    spec.threshold = t;
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) CHECK(is_equivalent(spec, cls(a), cls(b)) == (a == b));
    }
  }
}

TEST_CASE("metric and mode names") {
  for (auto k : {MetricKind::accuracy, MetricKind::f_measure, MetricKind::sbd}) {
    CHECK(parse_metric(to_string(k)) == k);
  }
  for (auto m : {EquivalenceMode::supervised, EquivalenceMode::unsupervised}) {
    CHECK(parse_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_metric("iou"), std::invalid_argument);
  CHECK_THROWS_AS(parse_mode("semi"), std::invalid_argument);
}
