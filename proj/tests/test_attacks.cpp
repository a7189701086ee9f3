#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "plequiv/attacks.hpp"

using namespace plequiv;

namespace {

// loss(x) = w . x
InputLoss linear_loss(const Tensor& w) {
  return [w](Tape& tape, Var x) { return ad::sum(ad::mul(x, tape.constant(w))); };
}

double linf_distance(const Tensor& a, const Tensor& b) { return linf_norm(difference(a, b)); }
double l2_distance(const Tensor& a, const Tensor& b) { return l2_norm(difference(a, b)); }

bool in_domain(const Tensor& x) {
  for (double v : x.data()) {
    if (v < kDomainLo || v > kDomainHi) return false;
  }
  return true;
}

SegNet test_model() { return SegNet::initialized(SegNetConfig{}, 12); }

std::vector<LaneSample> test_samples(std::size_t n) {
  std::vector<LaneSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_lane_sample(DatasetConfig{}, Split::test, i));
  return out;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  return line;
}

}  // namespace

TEST_CASE("projection lands in the ball and the domain") {
  CounterRng rng(4, 0, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor center = gradcheck::random_tensor(rng, {3, 4, 5}, -0.9, 0.9);
    const Tensor x = gradcheck::random_tensor(rng, {3, 4, 5}, -1.5, 1.5);
    const double eps = rng.uniform(0.001, 1.0);
    const Tensor pi = project(x, center, Norm::linf, eps);
    CHECK(linf_distance(pi, center) <= eps);
    CHECK(in_domain(pi));
    CHECK(project(pi, center, Norm::linf, eps) == pi);
    const Tensor p2 = project(x, center, Norm::l2, eps);
    CHECK(l2_distance(p2, center) <= eps);
    CHECK(in_domain(p2));
  }
  const Tensor c(Shape{2}, {0.0, 0.0});
  const Tensor inside(Shape{2}, {0.1, -0.1});
  CHECK(project(inside, c, Norm::l2, 1.0) == inside);
  CHECK_THROWS_AS(project(inside, Tensor(Shape{3}), Norm::linf, 1.0), std::invalid_argument);
}

TEST_CASE("fgsm on a linear loss is the closed form") {
  CounterRng rng(8, 0, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor w = gradcheck::random_tensor(rng, {10});
    const Tensor x = gradcheck::random_tensor(rng, {10});
    const double eps = 8.0 / 255.0;
    const Tensor adv = fgsm(linear_loss(w), x, eps);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(adv[i] == std::clamp(x[i] + eps * (w[i] > 0 ? 1.0 : -1.0), -1.0, 1.0));
    }
    CHECK(fgsm(linear_loss(w), x, 0.0) == x);
  }
  CHECK_THROWS_AS(fgsm(linear_loss(Tensor(Shape{1})), Tensor(Shape{1}), -0.1), std::invalid_argument);
}

TEST_CASE("pgd reaches the optimum of a linear loss") {
  const Tensor w(Shape{4}, {0.5, -2.0, 1.0, -0.1});
  const Tensor x(Shape{4}, {0.0, 0.2, -0.3, 0.95});
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.step = 0.03;
  cfg.steps = 10;
  cfg.random_start = false;
  const Tensor adv = pgd(linear_loss(w), x, cfg, 0);
  const Tensor want(Shape{4}, {0.1, 0.1, -0.2, 0.85});
  for (std::size_t i = 0; i < 4; ++i) CHECK(adv[i] == doctest::Approx(want[i]).epsilon(1e-12));

  cfg.norm = Norm::l2;
  const Tensor x2(Shape{4}, {0.0, 0.0, 0.0, 0.0});
  const Tensor adv2 = pgd(linear_loss(w), x2, cfg, 0);
  const double n = l2_norm(w);
  for (std::size_t i = 0; i < 4; ++i) CHECK(adv2[i] == doctest::Approx(0.1 * w[i] / n).epsilon(1e-9));
}

TEST_CASE("random start is keyed by the point seed") {
  const Tensor w(Shape{6}, {1, 1, 1, 1, 1, 1});
  const Tensor x(Shape{6});
  AttackConfig cfg;
  cfg.steps = 1;
  cfg.step = 1e-6;
  CHECK(pgd(linear_loss(w), x, cfg, 3) == pgd(linear_loss(w), x, cfg, 3));
  CHECK_FALSE(pgd(linear_loss(w), x, cfg, 3) == pgd(linear_loss(w), x, cfg, 4));
  cfg.norm = Norm::l2;
  CHECK(l2_norm(pgd(linear_loss(w), x, cfg, 3)) <= cfg.epsilon);
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.pos_weight = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(parse_norm(to_string(Norm::l2)) == Norm::l2);
  CHECK(parse_attack_loss(to_string(AttackLoss::segmentation)) == AttackLoss::segmentation);
  CHECK_THROWS_AS(parse_norm("l1"), std::invalid_argument);
}

TEST_CASE("pgd on the network stays in the ball and raises the loss") {
  const SegNet model = test_model();
  const auto samples = test_samples(2);
  AttackConfig cfg;
  cfg.steps = 5;
  for (const auto& s : samples) {
    const InputLoss loss = attack_objective(model, s, AttackLoss::full);
    const Tensor adv = pgd(model, s.image, s, cfg, 1);
    CHECK(linf_distance(adv, s.image) <= cfg.epsilon + 1e-15);
    CHECK(in_domain(adv));
    Tape t1, t2;
    CHECK(loss(t1, t1.constant(adv)).value()[0] > loss(t2, t2.constant(s.image)).value()[0]);
    const Tensor one = fgsm(model, s.image, s, cfg.epsilon);
    CHECK(linf_distance(one, s.image) <= cfg.epsilon + 1e-15);
  }
}

TEST_CASE("per-sample attack results do not depend on thread count") {
  const SegNet model = test_model();
  const auto samples = test_samples(4);
  AttackConfig cfg;
  cfg.steps = 2;
  const auto a = attack_each(model, samples, cfg, {}, 1);
  const auto b = attack_each(model, samples, cfg, {}, 3);
  double nat = 0.0, adv = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(a[i].natural.f_measure == b[i].natural.f_measure);
    CHECK(a[i].adversarial.sbd == b[i].adversarial.sbd);
    nat += a[i].natural.f_measure;
    adv += a[i].adversarial.f_measure;
  }
  const auto mean = evaluate_under_attack(model, samples, cfg, {}, 2);
  CHECK(mean.natural.f_measure == doctest::Approx(nat / 4));
  CHECK(mean.adversarial.f_measure == doctest::Approx(adv / 4));
}

TEST_CASE("security curve rows") {
  const SegNet model = test_model();
  const auto samples = test_samples(2);
  const std::vector<double> eps{0.0, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255};
  for (Norm norm : {Norm::linf, Norm::l2}) {
    const auto curve = security_curve(model, samples, eps, norm, 2, true, 1, {}, 1);
    REQUIRE(curve.size() == 5);
    const auto natural = evaluate_under_attack(model, samples, AttackConfig{}, {}, 1).natural;
    CHECK(curve[0].scores.f_measure == natural.f_measure);
    CHECK(curve[0].scores.sbd == natural.sbd);
    for (std::size_t i = 0; i < 5; ++i) CHECK(curve[i].epsilon == eps[i]);
  }
  const std::vector<double> unsorted{0.1, 0.05};
  CHECK_THROWS_AS(security_curve(model, samples, unsorted, Norm::linf, 2, true, 1, {}, 1),
                  std::invalid_argument);
  const auto dir = std::filesystem::temp_directory_path() / "plequiv_test_attacks";
  std::filesystem::create_directories(dir);
  write_security_csv(dir / "s.csv", security_curve(model, samples, eps, Norm::linf, 1, false, 1, {}, 1));
  CHECK(first_line(dir / "s.csv") == "# schema: plequiv.security_curve.v1");
  write_attack_csv(dir / "a.csv", attack_each(model, samples, AttackConfig{}, {}, 1));
  CHECK(first_line(dir / "a.csv") == std::string("# schema: ") + kAttackSchema);
  std::filesystem::remove_all(dir);
}

TEST_CASE("pgd loss trace") {
  const SegNet model = test_model();
  const auto samples = test_samples(3);
  TraceOptions opts;
  opts.max_steps = 50;
  const auto trace = mean_pgd_loss_trace(model, samples, opts, 2, 1);
  CHECK(trace.size() == 50);
  CHECK(trace == mean_pgd_loss_trace(model, samples, opts, 2, 3));
  opts.best_so_far = true;
  opts.max_steps = 12;
  const auto best = mean_pgd_loss_trace(model, samples, opts, 2, 1);
  for (std::size_t k = 1; k < best.size(); ++k) CHECK(best[k] >= best[k - 1]);
  const auto dir = std::filesystem::temp_directory_path() / "plequiv_test_trace";
  std::filesystem::create_directories(dir);
  write_trace_csv(dir / "t.csv", trace);
  std::ifstream is(dir / "t.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  CHECK(lines == 52);
  std::filesystem::remove_all(dir);
}
