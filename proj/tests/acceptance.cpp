// Acceptance suite: one PASS/FAIL line per criterion.
//
// Trained models are cached under the work directory and reused when the
// recorded training config matches; pass --retrain to ignore the cache.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "plequiv/attacks.hpp"
#include "plequiv/certify.hpp"
#include "plequiv/cli.hpp"
#include "plequiv/metrics.hpp"
#include "plequiv/stats.hpp"
#include "plequiv/train.hpp"

using namespace plequiv;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kBoundTolerance = 1e-9;
constexpr double kQuantileTolerance = 1e-10;
constexpr double kRadiusTolerance = 1e-4;
constexpr double kGradTolerance = 1e-4;
constexpr double kSbdTolerance = 0.05;
constexpr double kHalfTolerance = 1e-6;
constexpr double kScoreGain = 1.25;
constexpr double kCurveSlack = 0.02;
constexpr double kPlateauRatio = 0.9;

constexpr std::size_t kEpochs = 30;
const char* const kMethods[] = {"standard", "fbf", "fbf_trades"};

struct Verdict {
  bool pass = false;
  std::string detail;
  // Time already spent on this criterion elsewhere, e.g. cached training.
  double extra_seconds = 0.0;
};

struct Context {
  fs::path work;
  bool retrain = false;
  std::ofstream log;
  std::vector<fs::path> manifests;
  std::map<std::string, fs::path> models;
  // Wall time of training runs reused from the cache.
  double cached_training_seconds = 0.0;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

// Runs a CLI command and returns its manifest.
json run_command(Context& ctx, const std::string& command, const json& config, const fs::path& dir) {
  fs::remove_all(dir);
  ctx.log << "== " << command << " -> " << dir.string() << '\n';
  const int code = cli::execute(command, config, dir, ctx.log, ctx.log);
  ctx.log.flush();
  if (code != cli::kOk) {
    throw std::runtime_error(command + " exited with code " + std::to_string(code) + " (see " +
                             (ctx.work / "acceptance.log").string() + ")");
  }
  ctx.manifests.push_back(dir / cli::kManifestName);
  return read_json(dir / cli::kManifestName);
}

json train_config(const std::string& method) {
  return {{"threads", 1}, {"train", {{"method", method}, {"epochs", kEpochs}}}};
}

// Trains `method` with the default dataset or reuses a cached run with the same config.
fs::path trained_model(Context& ctx, const std::string& method) {
  if (auto it = ctx.models.find(method); it != ctx.models.end()) return it->second;
  const fs::path dir = ctx.work / "models" / method;
  const json resolved = cli::resolve_config("train", train_config(method));
  json manifest;
  bool cached = false;
  if (!ctx.retrain && fs::exists(dir / cli::kManifestName) && fs::exists(dir / "model.bin")) {
    manifest = read_json(dir / cli::kManifestName);
    cached = manifest.at("exit_code") == 0 && manifest.at("config") == resolved;
  }
  if (cached) {
    ctx.log << "== reusing " << dir.string() << '\n';
    ctx.cached_training_seconds += manifest.at("wall_seconds").get<double>();
  } else {
    run_command(ctx, "train", resolved, dir);
  }
  ctx.models[method] = dir / "model.bin";
  return dir / "model.bin";
}

// Criterion 1.
Verdict confidence_bound(Context&) {
  double worst = 0.0;
  std::size_t cases = 0;
  for (unsigned n = 1; n <= 30; ++n) {
    for (unsigned k = 0; k <= n; ++k) {
      for (double alpha : {0.01, 0.05, 0.1}) {
        worst = std::max(worst, std::abs(lower_conf_bound(k, n, alpha) -
                                         oracle::tail_bisection(k, n, alpha)));
        ++cases;
      }
    }
  }
  return {worst <= kBoundTolerance,
          std::to_string(cases) + " cases, max |diff| " + fmt(worst, 3)};
}

// Criterion 2.
Verdict quantile_round_trip(Context&) {
  double worst = 0.0;
  for (int i = -6000; i <= 6000; ++i) {
    const double x = i * 1e-3;
    const double back = static_cast<double>(std_normal_quantile(std_normal_cdf(x)));
    worst = std::max(worst, std::abs(back - x));
  }
  return {worst <= kQuantileTolerance, "max |error| " + fmt(worst, 3) + " on 12001 points"};
}

// Criterion 3.
Verdict maximum_radius(Context&) {
  const Evaluator constant = [](std::span<const Tensor> xs) {
    std::vector<Prediction> out(xs.size());
    for (auto& p : out) p.instances = InstanceMap(32, 64);
    return out;
  };
  CertifyOptions opts;
  opts.sigma = 0.1;
  opts.n = 160;
  opts.alpha = 0.05;
  const Tensor x0(Shape{3, 32, 64}, 0.0);
  const CertOutcome o =
      certify_probabilistic_equivalence(constant, x0, std::nullopt, 0, opts, EquivalenceSpec{});
  const double closed = 0.1 * oracle::phi_inverse(std::pow(0.05, 1.0 / 160.0));
  const double r = o.radius.value_or(0.0);
  return {o.status == CertStatus::certified && std::abs(r - closed) <= kRadiusTolerance &&
              std::abs(r - 0.2085) <= kRadiusTolerance,
          "radius " + fmt(r, 8) + ", closed form " + fmt(closed, 8)};
}

// Criterion 4.
int linear_class(const Tensor& x) { return 0.8 * x[0] - 0.6 * x[1] > 0.0 ? 1 : 0; }

Verdict classification_reduction(Context&) {
  const Evaluator f = [](std::span<const Tensor> xs) {
    std::vector<Prediction> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i].label = linear_class(xs[i]);
    return out;
  };
  std::vector<EvalPoint> points;
  CounterRng rng(3, 0, 0);
  for (int i = 0; i < 50; ++i) {
    points.push_back({Tensor(Shape{2}, {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)}), {}});
  }
  CertifyOptions opts;
  opts.sigma = 0.25;
  auto spec_for = [](double t) {
    EquivalenceSpec s;
    s.metric = MetricKind::accuracy;
    s.threshold = t;
    return s;
  };
  const std::uint64_t seed = 17;
  const auto base = certify_dataset(f, points, opts, spec_for(0.1), seed);
  std::size_t mismatches = 0, certified = 0;
  for (double t : {0.5, 0.9}) {
    const auto other = certify_dataset(f, points, opts, spec_for(t), seed);
    for (std::size_t i = 0; i < points.size(); ++i) {
      mismatches += other[i].status != base[i].status || other[i].count != base[i].count ||
                    other[i].radius != base[i].radius;
    }
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto ref = oracle::smoothing_certificate(linear_class, points[i].x, opts.sigma,
                                                   static_cast<unsigned>(opts.n), opts.alpha,
                                                   derive_seed(seed, i));
    const bool same_status = (base[i].status == CertStatus::certified) == ref.certified;
    const bool same_radius =
        !ref.certified || std::abs(*base[i].radius - ref.radius) <= 1e-8 * ref.radius;
    mismatches += !same_status || !same_radius || base[i].count != ref.count;
    certified += ref.certified;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 50 points (" +
                               std::to_string(certified) + " certified)"};
}

// Criterion 5.
Verdict worked_example(Context&) {
  const double base = 0.674, t = 0.1;
  const bool first = is_equivalent_distance(relative_distance(0.661, base), t);
  const bool second = is_equivalent_distance(relative_distance(0.573, base), t);
  const double threshold = (1.0 - t) * base;
  return {first && !second && std::abs(threshold - 0.6066) < 1e-12,
          std::string("0.661 ") + (first ? "equivalent" : "inequivalent") + ", 0.573 " +
              (second ? "equivalent" : "inequivalent") + ", threshold " + fmt(threshold, 6)};
}

// Criterion 6.
Verdict degenerate_sbd(Context&) {
  InstanceMap gt(32, 64);
  for (std::size_t r = 0; r < 32; ++r) {
    for (int lane = 0; lane < 3; ++lane) {
      const std::size_t c = 12 + 20 * static_cast<std::size_t>(lane);
      gt.at(r, c) = gt.at(r, c + 1) = lane + 1;
    }
  }
  const double sbd = symmetric_best_dice(InstanceMap(32, 64, 1), gt);
  return {std::abs(sbd - 0.25) <= kSbdTolerance, "SBD " + fmt(sbd)};
}

// Criterion 7.
Verdict gradients(Context&) {
  double worst = 0.0;
  std::string worst_name;
  auto cases = gradcheck::primitive_cases();
  cases.push_back(gradcheck::network_case());
  for (const auto& c : cases) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const double e = gradcheck::relative_error(c, s);
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  return {worst < kGradTolerance, std::to_string(cases.size()) +
                                      " cases x 100 instances, max relative error " + fmt(worst, 3) +
                                      " (" + worst_name + ")"};
}

// Criterion 8.
bool same_parameters(const SegNet& a, const SegNet& b) {
  const auto& pa = a.parameters();
  const auto& pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!(pa[i].tensor == pb[i].tensor)) return false;
  }
  return pa.size() == pb.size();
}

Verdict training_reductions(Context&) {
  DatasetConfig dc;
  dc.train_size = 48;
  dc.val_size = 4;
  dc.test_size = 1;
  const LaneDataset ds = gen_lane_dataset(dc);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.val_attack.steps = 2;
  const TrainResult standard = train(cfg, ds);
  cfg.method = TrainMethod::fbf;
  cfg.epsilon = 0.0;
  const TrainResult fbf = train(cfg, ds);
  bool losses_equal = true;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    losses_equal = losses_equal &&
                   fbf.history.records[e].train_loss == standard.history.records[e].train_loss;
  }
  const bool fbf_equal = same_parameters(fbf.final_model, standard.final_model) && losses_equal;

  TrainConfig tc;
  tc.method = TrainMethod::fbf_trades;
  tc.beta = 0.0;
  const SegNet& model = standard.final_model;
  std::size_t trades_equal = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const LaneSample& s = ds.train[i];
    Tape tape;
    const BoundSegNet net = bind(tape, model, false);
    const double plain = sample_loss(net, s.image, s, tc.disc, tc.pos_weight).value()[0];
    trades_equal += trades_total_loss(model, s.image, s, tc, i) == plain;
  }
  return {fbf_equal && trades_equal == 8,
          std::string("FBF(eps=0) ") + (fbf_equal ? "bit-identical" : "differs") +
              " to standard over 3 epochs; TRADES(beta=0) loss equal on " +
              std::to_string(trades_equal) + "/8 samples"};
}

// Criterion 9.
Verdict table_analog(Context& ctx) {
  std::map<std::string, json> summary;
  for (const char* m : kMethods) {
    const json cfg = {{"model", trained_model(ctx, m).string()}, {"threads", 1}, {"limit", 0}};
    summary[m] = run_command(ctx, "attack", cfg, ctx.work / "runs" / (std::string("attack_") + m))
                     .at("summary");
  }
  auto nat = [&](const std::string& m) { return summary[m].at("natural_f_measure").get<double>(); };
  auto adv = [&](const std::string& m) {
    return summary[m].at("adversarial_f_measure").get<double>();
  };
  bool pass = nat("standard") > 0.7 && adv("standard") < 0.1;
  std::string detail;
  for (const char* m : kMethods) {
    if (std::string(m) != "standard") {
      pass = pass && std::abs(nat(m) - nat("standard")) <= 0.05 && adv(m) > 0.3;
    }
    detail += std::string(detail.empty() ? "" : "; ") + m + " natural F " + fmt(nat(m), 3) +
              " adversarial F " + fmt(adv(m), 3);
  }
  return {pass, detail, ctx.cached_training_seconds};
}

// Criterion 10.
Verdict score_separation(Context& ctx) {
  std::map<std::string, double> score;
  for (const char* m : kMethods) {
    const json cfg = {{"evaluator", {{"kind", "model"}, {"model", trained_model(ctx, m).string()}}},
                      {"limit", 40},
                      {"equivalence", {{"mode", "supervised"}, {"threshold", 0.1}}},
                      {"certify", {{"sigma", 0.1}, {"n", 160}, {"alpha", 0.05}}}};
    score[m] = run_command(ctx, "certify", cfg, ctx.work / "runs" / (std::string("certify_") + m))
                   .at("summary")
                   .at("robustness_score")
                   .get<double>();
  }
  const double base = score["standard"];
  const bool pass = score["fbf"] >= kScoreGain * base && score["fbf_trades"] >= kScoreGain * base;
  std::string detail;
  for (const char* m : kMethods) {
    detail += std::string(detail.empty() ? "" : ", ") + m + " " + fmt(score[m]);
  }
  return {pass, "robustness score " + detail + " (need >= " + fmt(kScoreGain, 3) + "x standard)"};
}

// Criterion 11.
Verdict security_dominance(Context& ctx) {
  std::map<std::string, json> points;
  for (const char* m : kMethods) {
    const json cfg = {{"model", trained_model(ctx, m).string()}, {"limit", 0}};
    points[m] = run_command(ctx, "security-curve", cfg,
                            ctx.work / "runs" / (std::string("security_") + m))
                    .at("summary")
                    .at("points");
  }
  auto combined = [&](const std::string& m, std::size_t i) {
    return points[m][i].at("f_measure").get<double>() + points[m][i].at("sbd").get<double>();
  };
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < points["standard"].size(); ++i) {
    const double eps = points["standard"][i].at("epsilon").get<double>();
    detail += std::string(detail.empty() ? "" : "; ") + "eps " + fmt(eps * 255, 3) + "/255:";
    for (const char* m : kMethods) detail += std::string(" ") + fmt(combined(m, i), 3);
    if (eps < 4.0 / 255.0 - 1e-12) continue;
    for (const char* m : {"fbf", "fbf_trades"}) {
      pass = pass && combined(m, i) >= combined("standard", i) - kCurveSlack;
    }
  }
  return {pass, "F+SBD standard/fbf/fbf_trades " + detail};
}

// Criterion 12.
std::vector<double> read_trace(const fs::path& p) {
  std::ifstream is(p);
  std::vector<double> out;
  for (std::string line; std::getline(is, line);) {
    if (line.empty() || line[0] == '#' || !std::isdigit(static_cast<unsigned char>(line[0]))) continue;
    out.push_back(std::stod(line.substr(line.find(',') + 1)));
  }
  return out;
}

Verdict pgd_plateau(Context& ctx) {
  bool pass = true;
  std::string detail;
  for (const char* m : kMethods) {
    const fs::path dir = ctx.work / "runs" / (std::string("trace_") + m);
    const json cfg = {{"model", trained_model(ctx, m).string()},
                      {"limit", 10},
                      {"trace", {{"max_steps", 50}}}};
    run_command(ctx, "pgd-trace", cfg, dir);
    const auto trace = read_trace(dir / "pgd_trace.csv");
    if (trace.size() != 50) throw std::runtime_error("trace has " + std::to_string(trace.size()) + " rows");
    const double ratio = trace[9] / trace[49];
    pass = pass && trace[9] >= kPlateauRatio * trace[49];
    detail += std::string(detail.empty() ? "" : ", ") + m + " " + fmt(ratio);
  }
  return {pass, "loss(10)/loss(50): " + detail};
}

// Criterion 13.
Verdict soundness_harness(Context&) {
  const double sigma = 0.25;
  const Evaluator step = [](std::span<const Tensor> xs) {
    std::vector<Prediction> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i].label = xs[i][0] > 0.0;
    return out;
  };
  EquivalenceSpec spec;
  spec.metric = MetricKind::accuracy;
  spec.threshold = 0.5;
  CertifyOptions opts;
  opts.sigma = sigma;
  opts.n = 2000;
  bool pass = true;
  double worst_half = 0.0;
  std::size_t probes = 0;
  for (double x0 : {0.1, 0.3, 0.6}) {
    const Tensor x(Shape{1}, {x0});
    const CertOutcome o = certify_probabilistic_equivalence(step, x, std::nullopt, 9, opts, spec);
    if (o.status != CertStatus::certified) return {false, "x0 = " + fmt(x0) + " abstained"};
    SoundnessOptions so;
    so.probe_count = 4000;
    so.explicit_directions = {Tensor(Shape{1}, {-1.0}), Tensor(Shape{1}, {1.0})};
    const SoundnessReport report = empirical_soundness_check(step, x, std::nullopt, spec, sigma, o, so);
    pass = pass && report.passed;
    probes += report.probes.size();
    // The equivalence probability at distance R toward the boundary is Phi((x0 - R) / sigma).
    const double exact_radius =
        sigma * static_cast<double>(std_normal_quantile(std_normal_cdf(x0 / sigma)));
    worst_half = std::max(worst_half, std::abs(oracle::phi((x0 - exact_radius) / sigma) - 0.5));
  }
  pass = pass && worst_half <= kHalfTolerance;
  return {pass, std::to_string(probes) + " probes inside certified radii, |P(R) - 1/2| <= " +
                    fmt(worst_half, 3)};
}

// Criterion 14.
Verdict reproducibility(Context& ctx) {
  const json data = {{"dataset", {{"train_size", 24}, {"val_size", 4}, {"test_size", 4}}}};
  json train = data;
  train["train"] = {{"method", "fbf_trades"}, {"epochs", 2}, {"trades_steps", 2}};
  run_command(ctx, "train", train, ctx.work / "runs" / "replay_train");
  run_command(ctx, "gen-data", data, ctx.work / "runs" / "replay_gen");
  std::size_t runs = 0, outputs = 0;
  std::vector<std::string> failed;
  for (const auto& manifest : ctx.manifests) {
    const json m = read_json(manifest);
    const std::size_t recorded =
        m.at("config").contains("threads") ? m.at("config").at("threads").get<std::size_t>() : 1;
    const std::size_t threads = recorded == 2 ? 3 : 2;
    std::ostringstream out;
    const int code = cli::replay(manifest, manifest.parent_path() / "replay", threads, out, ctx.log);
    ctx.log << out.str();
    ++runs;
    outputs += m.at("outputs").size();
    if (code != cli::kOk || out.str().find("MISMATCH") != std::string::npos) {
      failed.push_back(manifest.parent_path().filename().string());
    }
  }
  std::string detail = std::to_string(runs) + " runs, " + std::to_string(outputs) +
                       " outputs replayed with a different thread count";
  for (const auto& f : failed) detail += "; mismatch in " + f;
  return {failed.empty() && runs > 0, detail};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Verdict(Context&)> check;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = PLEQUIV_ACCEPTANCE_DIR;
  bool retrain = false;
  std::vector<int> only;
  app.add_option("--work", work, "directory for cached models and run outputs");
  app.add_flag("--retrain", retrain, "ignore cached models");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.work = work;
  ctx.retrain = retrain;
  fs::create_directories(ctx.work);
  ctx.log.open(ctx.work / "acceptance.log", std::ios::trunc);

  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<Criterion> criteria{
      {1, "confidence-bound oracle", 5, confidence_bound},
      {2, "gaussian quantile round trip", 5, quantile_round_trip},
      {3, "maximum-radius closed form", 10, maximum_radius},
      {4, "classification reduction", 60, classification_reduction},
      {5, "supervised worked example", 1, worked_example},
      {6, "degenerate SBD", 1, degenerate_sbd},
      {7, "gradient correctness", 120, gradients},
      {8, "training reductions", 300, training_reductions},
      {9, "robust training table analog", 1800, table_analog},
      {10, "robustness-score separation", 1200, score_separation},
      {11, "security-curve dominance", 900, security_dominance},
      {12, "PGD plateau", 300, pgd_plateau},
      {13, "soundness harness", 60, soundness_harness},
      {14, "reproducibility", inf, reproducibility},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() +
        v.extra_seconds;
    const bool in_time = seconds < c.limit_seconds;
    const bool pass = v.pass && in_time;
    failures += !pass;
    std::ostringstream line;
    line << "criterion " << c.id << ": " << (pass ? "PASS" : "FAIL") << "  " << c.name << " - "
         << v.detail << " [" << fmt(seconds, 3) << " s";
    if (std::isfinite(c.limit_seconds)) line << ", limit " << fmt(c.limit_seconds, 4) << " s";
    if (!in_time) line << ", too slow";
    line << "]";
    std::cout << line.str() << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
