#include "plequiv/cli.hpp"

#include <cctype>
#include <charconv>
#include <chrono>
#include <ctime>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "plequiv/attacks.hpp"
#include "plequiv/certify.hpp"
#include "plequiv/external.hpp"
#include "plequiv/format.hpp"
#include "plequiv/json_io.hpp"
#include "plequiv/lane_data.hpp"
#include "plequiv/segnet.hpp"
#include "plequiv/train.hpp"

namespace plequiv::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

double parse_plain(std::string_view text, std::string_view whole) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw UsageError("not a number: '" + std::string(whole) + "'");
  }
  return v;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_digest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a_hex(ss.str());
}

// ---------------------------------------------------------------------------
// Config schemas

json data_defaults() {
  return {{"dataset", DatasetConfig{}}, {"data_dir", ""}, {"split", "test"}, {"limit", 0}};
}

json command_defaults(const std::string& command) {
  if (command == "gen-data") return {{"dataset", DatasetConfig{}}};
  json d = data_defaults();
  d["threads"] = 1;
  if (command == "train") {
    d.erase("split");
    d.erase("limit");
    d["train"] = TrainConfig{};
    d["resume"] = "";
  } else if (command == "certify") {
    d["limit"] = 40;
    d["evaluator"] = {{"kind", ""}, {"model", ""}, {"command", ""}, {"threshold", 0.5}};
    d["cluster"] = ClusterParams{};
    d["certify"] = CertifyOptions{};
    d["equivalence"] = EquivalenceSpec{};
    d["seed"] = 0;
    d["curve"] = {{"max_radius", 0.25}, {"points", 51}};
  } else if (command == "attack") {
    d["model"] = "";
    d["cluster"] = ClusterParams{};
    d["attack"] = AttackConfig{};
  } else if (command == "security-curve") {
    d["model"] = "";
    d["cluster"] = ClusterParams{};
    d["epsilons"] = {0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0};
    d["norm"] = "linf";
    d["steps"] = 10;
    d["random_start"] = true;
    d["seed"] = 0;
  } else if (command == "pgd-trace") {
    d["limit"] = 10;
    d["model"] = "";
    d["trace"] = {{"epsilon", 8.0 / 255.0}, {"step", 2.0 / 255.0}, {"max_steps", 50},
                  {"random_start", true}, {"best_so_far", false}, {"loss", "full"},
                  {"pos_weight", kLanePosWeight}};
    d["seed"] = 0;
  } else {
    throw UsageError("unknown command '" + command + "'");
  }
  return d;
}

// Merges `patch` into `base` key by key; objects recurse, everything else replaces.
void merge(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw UsageError(where + ": expected a JSON object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      // Typed sections validate their own keys on conversion.
      slot.update(it.value());
    } else {
      slot = it.value();
    }
  }
}

TraceOptions trace_from_json(const json& j) {
  reject_unknown_keys(j, {"epsilon", "step", "max_steps", "random_start", "best_so_far", "loss",
                          "pos_weight"},
                      "trace");
  TraceOptions t;
  t.epsilon = j.at("epsilon").get<double>();
  t.step = j.at("step").get<double>();
  t.max_steps = j.at("max_steps").get<std::size_t>();
  t.random_start = j.at("random_start").get<bool>();
  t.best_so_far = j.at("best_so_far").get<bool>();
  t.loss = parse_attack_loss(j.at("loss").get<std::string>());
  t.pos_weight = j.at("pos_weight").get<double>();
  if (!(t.epsilon >= 0.0) || !(t.step > 0.0) || t.max_steps < 1 || !(t.pos_weight > 0.0)) {
    throw std::invalid_argument("trace: need epsilon >= 0, step > 0, max_steps >= 1, pos_weight > 0");
  }
  return t;
}

struct Evaluation {
  std::string kind;
  std::string model;
  std::string command;
  double threshold = 0.5;
};

Evaluation evaluator_from_json(const json& j) {
  reject_unknown_keys(j, {"kind", "model", "command", "threshold"}, "evaluator");
  Evaluation e{j.at("kind").get<std::string>(), j.at("model").get<std::string>(),
               j.at("command").get<std::string>(), j.at("threshold").get<double>()};
  if (e.kind == "model") {
    if (e.model.empty()) throw std::invalid_argument("evaluator: kind 'model' needs a model path");
  } else if (e.kind == "external") {
    if (e.command.empty()) throw std::invalid_argument("evaluator: kind 'external' needs a command");
  } else if (e.kind != "constant") {
    throw std::invalid_argument(
        "evaluator: choose one of --model, --external or --builtin constant");
  }
  return e;
}

// Round-trips every typed section so the stored config is complete and checked.
json normalize(const std::string& command, json c) {
  c["dataset"] = c.at("dataset").get<DatasetConfig>();
  c.at("dataset").get<DatasetConfig>().validate();
  if (command == "gen-data") return c;
  if (c.at("threads").get<std::size_t>() < 1) throw std::invalid_argument("threads must be >= 1");
  if (c.contains("split")) parse_split(c.at("split").get<std::string>());
  if (c.contains("limit")) c.at("limit").get<std::size_t>();
  c.at("data_dir").get<std::string>();
  if (command == "train") {
    TrainConfig t = c.at("train").get<TrainConfig>();
    t.threads = c.at("threads").get<std::size_t>();
    t.validate();
    c["train"] = t;
    c.at("resume").get<std::string>();
  } else if (command == "certify") {
    evaluator_from_json(c.at("evaluator"));
    c["cluster"] = c.at("cluster").get<ClusterParams>();
    const auto opts = c.at("certify").get<CertifyOptions>();
    if (!(opts.sigma > 0.0) || opts.n < 1 || !(opts.alpha > 0.0 && opts.alpha < 1.0) ||
        opts.batch_size < 1) {
      throw std::invalid_argument("certify: need sigma > 0, n >= 1, 0 < alpha < 1, batch_size >= 1");
    }
    c["certify"] = opts;
    const auto spec = c.at("equivalence").get<EquivalenceSpec>();
    spec.validate();
    c["equivalence"] = spec;
    c.at("seed").get<std::uint64_t>();
    const json& curve = c.at("curve");
    reject_unknown_keys(curve, {"max_radius", "points"}, "curve");
    if (!(curve.at("max_radius").get<double>() > 0.0) || curve.at("points").get<std::size_t>() < 2) {
      throw std::invalid_argument("curve: need max_radius > 0 and points >= 2");
    }
  } else if (command == "attack") {
    c["cluster"] = c.at("cluster").get<ClusterParams>();
    const auto a = c.at("attack").get<AttackConfig>();
    a.validate();
    c["attack"] = a;
  } else if (command == "security-curve") {
    c["cluster"] = c.at("cluster").get<ClusterParams>();
    const auto eps = c.at("epsilons").get<std::vector<double>>();
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (!(eps[i] >= 0.0) || (i > 0 && !(eps[i] > eps[i - 1]))) {
        throw std::invalid_argument("epsilons must be nonnegative and increasing");
      }
    }
    parse_norm(c.at("norm").get<std::string>());
    if (c.at("steps").get<std::size_t>() < 1) throw std::invalid_argument("steps must be >= 1");
    c.at("random_start").get<bool>();
    c.at("seed").get<std::uint64_t>();
  } else if (command == "pgd-trace") {
    trace_from_json(c.at("trace"));
    c.at("seed").get<std::uint64_t>();
  }
  if (command != "train" && command != "certify" && c.at("model").get<std::string>().empty()) {
    throw std::invalid_argument(command + ": a model checkpoint is required (--model)");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Running commands

struct Run {
  std::string command;
  json config;
  fs::path dir;
  std::ostream& out;
  std::vector<fs::path> outputs;
  json inputs = json::array();
  json summary = json::object();
  std::uint64_t seed = 0;

  void add_input(const fs::path& path) {
    inputs.push_back({{"path", path.string()}, {"fnv1a", file_digest(path)}});
  }
};

std::vector<LaneSample> load_samples(const json& c, Split split, std::size_t limit,
                                     DatasetConfig& resolved) {
  const std::string data_dir = c.at("data_dir").get<std::string>();
  std::vector<LaneSample> samples;
  if (!data_dir.empty()) {
    LaneDataset ds = load_dataset(data_dir);
    resolved = ds.config;
    samples = ds.split(split);
  } else {
    resolved = c.at("dataset").get<DatasetConfig>();
    const std::size_t count = split == Split::train ? resolved.train_size
                              : split == Split::val ? resolved.val_size
                                                    : resolved.test_size;
    const std::size_t n = limit > 0 ? std::min(limit, count) : count;
    for (std::size_t i = 0; i < n; ++i) samples.push_back(gen_lane_sample(resolved, split, i));
  }
  if (limit > 0 && samples.size() > limit) samples.resize(limit);
  if (samples.empty()) throw std::runtime_error("no samples in the selected split");
  return samples;
}

std::vector<LaneSample> load_eval_samples(Run& run) {
  DatasetConfig resolved;
  auto samples = load_samples(run.config, parse_split(run.config.at("split").get<std::string>()),
                              run.config.at("limit").get<std::size_t>(), resolved);
  run.config["dataset"] = resolved;
  return samples;
}

SegNet load_model_input(Run& run, const std::string& path) {
  run.add_input(path);
  return load_model(path);
}

int cmd_gen_data(Run& run) {
  const DatasetConfig cfg = run.config.at("dataset").get<DatasetConfig>();
  run.seed = cfg.seed;
  const LaneDataset ds = gen_lane_dataset(cfg);
  save_dataset(run.dir, ds);
  for (const auto& f : dataset_files(ds)) run.outputs.push_back(f);
  run.out << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
          << " train/val/test samples to " << run.dir.string() << '\n';
  return kOk;
}

int cmd_train(Run& run) {
  TrainConfig cfg = run.config.at("train").get<TrainConfig>();
  run.seed = cfg.seed;
  LaneDataset ds;
  const std::string data_dir = run.config.at("data_dir").get<std::string>();
  if (!data_dir.empty()) {
    ds = load_dataset(data_dir);
  } else {
    ds = gen_lane_dataset(run.config.at("dataset").get<DatasetConfig>());
  }
  run.config["dataset"] = ds.config;
  if (cfg.model.in_channels != ds.config.channels) {
    throw std::runtime_error("model expects " + std::to_string(cfg.model.in_channels) +
                             " channels, dataset has " + std::to_string(ds.config.channels));
  }
  std::optional<TrainState> resume;
  const std::string resume_path = run.config.at("resume").get<std::string>();
  if (!resume_path.empty()) {
    run.add_input(resume_path);
    resume = load_train_state(resume_path);
    run.out << "resuming at epoch " << resume->next_epoch << '\n';
  }
  const fs::path state_path = run.dir / "state.bin";
  const TrainResult result = train(cfg, ds, std::move(resume), [&](const TrainState& state) {
    const EpochRecord& r = state.history.records.back();
    run.out << "epoch " << r.epoch << " loss " << format_real(r.train_loss) << " natural F "
            << format_real(r.natural.f_measure) << " SBD " << format_real(r.natural.sbd)
            << " adversarial F " << format_real(r.adversarial.f_measure) << " SBD "
            << format_real(r.adversarial.sbd) << '\n';
    save_train_state(state_path, state);
  });
  write_history_csv(run.dir / "history.csv", result.history);
  save_model(run.dir / "model.bin", result.best_model);
  save_model(run.dir / "final.bin", result.final_model);
  run.outputs = {"history.csv", "model.bin", "final.bin"};
  if (fs::exists(state_path)) run.outputs.push_back("state.bin");
  if (result.history.best_epoch) {
    const std::size_t best = *result.history.best_epoch;
    for (const auto& r : result.history.records) {
      if (r.epoch != best) continue;
      run.out << "best epoch " << best << ": natural F " << format_real(r.natural.f_measure)
              << " SBD " << format_real(r.natural.sbd) << ", adversarial F "
              << format_real(r.adversarial.f_measure) << " SBD " << format_real(r.adversarial.sbd)
              << '\n';
      run.summary["best_epoch"] = best;
      run.summary["best_score"] = result.history.best_score;
    }
  }
  return kOk;
}

int cmd_certify(Run& run) {
  const json& c = run.config;
  const Evaluation ev = evaluator_from_json(c.at("evaluator"));
  const auto opts = c.at("certify").get<CertifyOptions>();
  const auto spec = c.at("equivalence").get<EquivalenceSpec>();
  const auto cluster = c.at("cluster").get<ClusterParams>();
  run.seed = c.at("seed").get<std::uint64_t>();
  const std::size_t threads = c.at("threads").get<std::size_t>();
  const auto samples = load_eval_samples(run);

  std::vector<EvalPoint> points;
  for (const auto& s : samples) {
    Prediction gt;
    gt.instances = s.inst_gt;
    points.push_back({s.image, gt});
  }

  std::optional<SegNet> model;
  std::optional<ExternalModel> external;
  Evaluator f;
  if (ev.kind == "model") {
    model = load_model_input(run, ev.model);
    f = make_segnet_evaluator(*model, cluster);
  } else if (ev.kind == "external") {
    external.emplace(ev.command, ev.threshold);
    f = make_external_evaluator(*external);
  } else {
    f = [](std::span<const Tensor> inputs) {
      std::vector<Prediction> preds(inputs.size());
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& x = inputs[i];
        preds[i].instances = InstanceMap(x.rank() == 3 ? x.dim(1) : 1, x.rank() == 3 ? x.dim(2) : 1);
      }
      return preds;
    };
  }

  const auto outcomes = certify_dataset(f, points, opts, spec, run.seed, threads);
  const double max_r = c.at("curve").at("max_radius").get<double>();
  const std::size_t n_grid = c.at("curve").at("points").get<std::size_t>();
  std::vector<double> grid(n_grid);
  for (std::size_t i = 0; i < n_grid; ++i) {
    grid[i] = max_r * static_cast<double>(i) / static_cast<double>(n_grid - 1);
  }
  write_outcomes_csv(run.dir / "outcomes.csv", outcomes);
  write_curve_csv(run.dir / "robustness_curve.csv", robustness_curve(outcomes, grid));
  run.outputs = {"outcomes.csv", "robustness_curve.csv"};

  std::size_t certified = 0, errors = 0;
  for (const auto& o : outcomes) {
    certified += o.status == CertStatus::certified;
    errors += o.status == CertStatus::error;
  }
  const double score = mean_radius(outcomes);
  run.summary = {{"robustness_score", score},
                 {"certified", certified},
                 {"abstain", outcomes.size() - certified - errors},
                 {"error", errors}};
  run.out << "robustness_score " << format_real(score) << '\n';
  run.out << "certified " << certified << ", abstain " << outcomes.size() - certified - errors
          << ", error " << errors << " of " << outcomes.size() << " points\n";
  return errors > 0 ? kPartialFailure : kOk;
}

int cmd_attack(Run& run) {
  const SegNet model = load_model_input(run, run.config.at("model").get<std::string>());
  const auto cfg = run.config.at("attack").get<AttackConfig>();
  run.seed = cfg.seed;
  const auto samples = load_eval_samples(run);
  const auto rows = attack_each(model, samples, cfg, run.config.at("cluster").get<ClusterParams>(),
                                run.config.at("threads").get<std::size_t>());
  write_attack_csv(run.dir / "attack.csv", rows);
  run.outputs = {"attack.csv"};
  const AttackEvaluation mean = mean_evaluation(rows);
  run.summary = {{"natural_f_measure", mean.natural.f_measure},
                 {"natural_sbd", mean.natural.sbd},
                 {"adversarial_f_measure", mean.adversarial.f_measure},
                 {"adversarial_sbd", mean.adversarial.sbd}};
  run.out << "natural F " << format_real(mean.natural.f_measure) << " SBD "
          << format_real(mean.natural.sbd) << ", adversarial F "
          << format_real(mean.adversarial.f_measure) << " SBD " << format_real(mean.adversarial.sbd)
          << '\n';
  return kOk;
}

int cmd_security_curve(Run& run) {
  const SegNet model = load_model_input(run, run.config.at("model").get<std::string>());
  const json& c = run.config;
  run.seed = c.at("seed").get<std::uint64_t>();
  const auto samples = load_eval_samples(run);
  const auto eps = c.at("epsilons").get<std::vector<double>>();
  const auto curve = security_curve(
      model, samples, eps, parse_norm(c.at("norm").get<std::string>()),
      c.at("steps").get<std::size_t>(), c.at("random_start").get<bool>(), run.seed,
      c.at("cluster").get<ClusterParams>(), c.at("threads").get<std::size_t>());
  write_security_csv(run.dir / "security_curve.csv", curve);
  run.outputs = {"security_curve.csv"};
  run.summary["points"] = json::array();
  for (const auto& p : curve) {
    run.summary["points"].push_back(
        {{"epsilon", p.epsilon}, {"f_measure", p.scores.f_measure}, {"sbd", p.scores.sbd}});
    run.out << "epsilon " << format_real(p.epsilon) << " F " << format_real(p.scores.f_measure)
            << " SBD " << format_real(p.scores.sbd) << '\n';
  }
  return kOk;
}

int cmd_pgd_trace(Run& run) {
  const SegNet model = load_model_input(run, run.config.at("model").get<std::string>());
  run.seed = run.config.at("seed").get<std::uint64_t>();
  const auto samples = load_eval_samples(run);
  const TraceOptions opts = trace_from_json(run.config.at("trace"));
  const auto trace = mean_pgd_loss_trace(model, samples, opts, run.seed,
                                         run.config.at("threads").get<std::size_t>());
  write_trace_csv(run.dir / "pgd_trace.csv", trace);
  run.outputs = {"pgd_trace.csv"};
  run.summary = {{"first_loss", trace.front()}, {"last_loss", trace.back()}};
  run.out << "mean loss after 1 step " << format_real(trace.front()) << ", after " << trace.size()
          << " steps " << format_real(trace.back()) << '\n';
  return kOk;
}

void write_manifest(const Run& run, const std::string& started, double seconds, int code) {
  json outputs = json::array();
  for (const auto& p : run.outputs) {
    outputs.push_back({{"path", p.generic_string()}, {"fnv1a", file_digest(run.dir / p)}});
  }
  const json manifest = {{"schema", kManifestSchema},
                         {"command", run.command},
                         {"version", kVersion},
                         {"seed", run.seed},
                         {"config", run.config},
                         {"started_utc", started},
                         {"finished_utc", utc_now()},
                         {"wall_seconds", seconds},
                         {"exit_code", code},
                         {"inputs", run.inputs},
                         {"outputs", outputs},
                         {"summary", run.summary}};
  std::ofstream os(run.dir / kManifestName, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (run.dir / kManifestName).string());
  os << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Flags

enum class Kind { real, integer, text, boolean, real_list };

struct Binding {
  std::string pointer;
  Kind kind;
  std::string value;
  CLI::Option* option = nullptr;
};

json convert(const Binding& b) {
  switch (b.kind) {
    case Kind::real:
      return parse_real(b.value);
    case Kind::integer: {
      std::uint64_t v = 0;
      const std::string t = trim(b.value);
      const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw UsageError("not a nonnegative integer: '" + b.value + "'");
      }
      return v;
    }
    case Kind::boolean: {
      const std::string t = trim(b.value);
      if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
      if (t == "false" || t == "0" || t == "off" || t == "no") return false;
      throw UsageError("not a boolean: '" + b.value + "'");
    }
    case Kind::real_list:
      return parse_real_list(b.value);
    case Kind::text:
      break;
  }
  return b.value;
}

class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  void add(const std::string& name, const std::string& pointer, Kind kind,
           const std::string& help) {
    bindings_.push_back({pointer, kind, "", nullptr});
    Binding& b = bindings_.back();
    b.option = app_->add_option(name, b.value, help + " [" + pointer.substr(1) + "]");
  }

  void apply(json& config) const {
    for (const auto& b : bindings_) {
      if (b.option->count() == 0) continue;
      config[json::json_pointer(b.pointer)] = convert(b);
    }
  }

 private:
  CLI::App* app_;
  std::deque<Binding> bindings_;
};

struct Subcommand {
  CLI::App* app = nullptr;
  std::unique_ptr<Flags> flags;
  std::string config_path;
  std::string out_dir;
  std::string model;
  std::string external;
  std::string builtin;
};

void add_dataset_flags(Flags& f, bool generating) {
  const std::string p = "/dataset/";
  f.add(generating ? "--seed" : "--dataset-seed", p + "seed", Kind::integer, "dataset seed");
  f.add("--height", p + "height", Kind::integer, "image height");
  f.add("--width", p + "width", Kind::integer, "image width");
  f.add("--train-size", p + "train_size", Kind::integer, "training samples");
  f.add("--val-size", p + "val_size", Kind::integer, "validation samples");
  f.add("--test-size", p + "test_size", Kind::integer, "test samples");
  f.add("--lane-contrast", p + "lane_contrast", Kind::real, "lane brightness");
  f.add("--chroma-cue", p + "chroma_cue", Kind::real, "lane tint");
  f.add("--noise-level", p + "noise_level", Kind::real, "pixel noise std");
  f.add("--texture-amplitude", p + "texture_amplitude", Kind::real, "background texture");
}

void add_data_source_flags(Flags& f, bool eval) {
  f.add("--data", "/data_dir", Kind::text, "dataset directory written by gen-data");
  if (eval) {
    f.add("--split", "/split", Kind::text, "train, val or test");
    f.add("--limit", "/limit", Kind::integer, "use the first N samples (0 = all)");
  }
  f.add("--threads", "/threads", Kind::integer, "worker threads");
}

int dispatch(Run& run) {
  if (run.command == "gen-data") return cmd_gen_data(run);
  if (run.command == "train") return cmd_train(run);
  if (run.command == "certify") return cmd_certify(run);
  if (run.command == "attack") return cmd_attack(run);
  if (run.command == "security-curve") return cmd_security_curve(run);
  if (run.command == "pgd-trace") return cmd_pgd_trace(run);
  throw UsageError("unknown command '" + run.command + "'");
}

}  // namespace

double parse_real(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return parse_plain(text, text);
  const double num = parse_plain(text.substr(0, slash), text);
  const double den = parse_plain(text.substr(slash + 1), text);
  if (den == 0.0) throw UsageError("zero denominator in '" + std::string(text) + "'");
  return num / den;
}

std::vector<double> parse_real_list(std::string_view text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(parse_real(text.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::vector<std::string> command_names() {
  return {"gen-data", "train", "certify", "attack", "security-curve", "pgd-trace"};
}

json resolve_config(const std::string& command, const json& user) {
  json c = command_defaults(command);
  try {
    merge(c, user, "");
    return normalize(command, std::move(c));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
}

int execute(const std::string& command, const json& config, const fs::path& out_dir,
            std::ostream& out, std::ostream& err) {
  json resolved;
  try {
    resolved = resolve_config(command, config);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  Run run{command, resolved, out_dir, out, {}, json::array(), json::object(), 0};
  try {
    fs::create_directories(out_dir);
    const int code = dispatch(run);
    write_manifest(run, started,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                   code);
    return code;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

int replay(const fs::path& manifest_path, const fs::path& out_dir, std::size_t threads,
           std::ostream& out, std::ostream& err) {
  json manifest;
  try {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot read " + manifest_path.string());
    manifest = json::parse(is);
    if (manifest.at("schema") != kManifestSchema) throw std::runtime_error("not a run manifest");
  } catch (const std::exception& e) {
    err << "error: " << manifest_path.string() << ": " << e.what() << '\n';
    return kUsage;
  }
  json config = manifest.at("config");
  if (threads > 0 && config.contains("threads")) config["threads"] = threads;
  if (threads > 0 && config.contains("train")) config["train"]["threads"] = threads;
  const std::string command = manifest.at("command").get<std::string>();
  const int code = execute(command, config, out_dir, out, err);
  if (code != kOk && code != kPartialFailure) return code;
  bool all_match = true;
  for (const auto& entry : manifest.at("outputs")) {
    const std::string rel = entry.at("path").get<std::string>();
    const fs::path produced = out_dir / rel;
    const bool match =
        fs::exists(produced) && file_digest(produced) == entry.at("fnv1a").get<std::string>();
    all_match = all_match && match;
    out << (match ? "match    " : "MISMATCH ") << rel << '\n';
  }
  if (!all_match) {
    err << "error: replay differs from " << manifest_path.string() << '\n';
    return kRuntime;
  }
  out << "replay reproduced " << manifest.at("outputs").size() << " outputs\n";
  return code;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Probabilistic local equivalence certification and robust lane segmentation"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::map<std::string, Subcommand> subs;
  auto make = [&](const std::string& name, const std::string& help) -> Subcommand& {
    Subcommand& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.flags = std::make_unique<Flags>(s.app);
    s.app->add_option("--config", s.config_path, "JSON config file");
    s.app->add_option("--out", s.out_dir, "output directory")->required();
    return s;
  };

  {
    auto& s = make("gen-data", "generate the synthetic lane dataset");
    add_dataset_flags(*s.flags, true);
  }
  {
    auto& s = make("train", "train a segmentation model");
    auto& f = *s.flags;
    add_dataset_flags(f, false);
    add_data_source_flags(f, false);
    const std::string p = "/train/";
    f.add("--method", p + "method", Kind::text, "standard, fbf or fbf_trades");
    f.add("--epochs", p + "epochs", Kind::integer, "epochs");
    f.add("--batch-size", p + "batch_size", Kind::integer, "batch size");
    f.add("--lr", p + "lr", Kind::real, "learning rate");
    f.add("--momentum", p + "momentum", Kind::real, "momentum");
    f.add("--epsilon", p + "epsilon", Kind::real, "L-inf budget, e.g. 8/255");
    f.add("--fgsm-step", p + "fgsm_step", Kind::real, "FBF ascent step");
    f.add("--trades-steps", p + "trades_steps", Kind::integer, "TRADES inner steps");
    f.add("--trades-step", p + "trades_step", Kind::real, "TRADES inner step size");
    f.add("--beta", p + "beta", Kind::real, "TRADES weight");
    f.add("--epsilon-warmup", p + "epsilon_warmup", Kind::integer, "epsilon ramp epochs");
    f.add("--pos-weight", p + "pos_weight", Kind::real, "lane-pixel loss weight");
    f.add("--seed", p + "seed", Kind::integer, "master seed");
    f.add("--val-limit", p + "val_limit", Kind::integer, "validation samples (0 = all)");
    f.add("--selection", p + "selection", Kind::text, "natural, adversarial or sum");
    f.add("--resume", "/resume", Kind::text, "checkpoint (state.bin) to resume from");
  }
  {
    auto& s = make("certify", "certify probabilistic local equivalence");
    auto& f = *s.flags;
    add_dataset_flags(f, false);
    add_data_source_flags(f, true);
    s.app->add_option("--model", s.model, "model checkpoint [evaluator.model]");
    s.app->add_option("--external", s.external, "command of an external model [evaluator.command]");
    s.app->add_option("--builtin", s.builtin, "built-in evaluator: constant")
        ->check(CLI::IsMember({"constant"}));
    f.add("--prob-threshold", "/evaluator/threshold", Kind::real, "external lane threshold");
    f.add("--sigma", "/certify/sigma", Kind::real, "noise std");
    f.add("--n", "/certify/n", Kind::integer, "probes per point");
    f.add("--alpha", "/certify/alpha", Kind::real, "confidence level");
    f.add("--batch-size", "/certify/batch_size", Kind::integer, "probes per evaluator call");
    f.add("--metric", "/equivalence/metric", Kind::text, "accuracy, f_measure or sbd");
    f.add("--t", "/equivalence/threshold", Kind::real, "equivalence threshold t");
    f.add("--mode", "/equivalence/mode", Kind::text, "unsupervised or supervised");
    f.add("--literal-ratio", "/equivalence/literal_pseudocode_ratio", Kind::boolean,
          "supervised ratio with base score in the numerator");
    f.add("--seed", "/seed", Kind::integer, "master seed");
    f.add("--cluster-radius", "/cluster/radius", Kind::real, "embedding cluster radius");
    f.add("--curve-max", "/curve/max_radius", Kind::real, "largest radius on the curve");
    f.add("--curve-points", "/curve/points", Kind::integer, "curve grid size");
  }
  {
    auto& s = make("attack", "evaluate a model under PGD");
    auto& f = *s.flags;
    add_dataset_flags(f, false);
    add_data_source_flags(f, true);
    f.add("--model", "/model", Kind::text, "model checkpoint");
    f.add("--norm", "/attack/norm", Kind::text, "linf or l2");
    f.add("--epsilon", "/attack/epsilon", Kind::real, "budget, e.g. 8/255");
    f.add("--step", "/attack/step", Kind::real, "step size");
    f.add("--steps", "/attack/steps", Kind::integer, "iterations");
    f.add("--random-start", "/attack/random_start", Kind::boolean, "start uniformly in the ball");
    f.add("--loss", "/attack/loss", Kind::text, "full or segmentation");
    f.add("--seed", "/attack/seed", Kind::integer, "master seed");
    f.add("--cluster-radius", "/cluster/radius", Kind::real, "embedding cluster radius");
  }
  {
    auto& s = make("security-curve", "performance under PGD across budgets");
    auto& f = *s.flags;
    add_dataset_flags(f, false);
    add_data_source_flags(f, true);
    f.add("--model", "/model", Kind::text, "model checkpoint");
    f.add("--epsilons", "/epsilons", Kind::real_list, "comma-separated budgets, e.g. 0,2/255,4/255");
    f.add("--norm", "/norm", Kind::text, "linf or l2");
    f.add("--steps", "/steps", Kind::integer, "PGD iterations");
    f.add("--random-start", "/random_start", Kind::boolean, "start uniformly in the ball");
    f.add("--seed", "/seed", Kind::integer, "master seed");
    f.add("--cluster-radius", "/cluster/radius", Kind::real, "embedding cluster radius");
  }
  {
    auto& s = make("pgd-trace", "mean attack loss per PGD iteration");
    auto& f = *s.flags;
    add_dataset_flags(f, false);
    add_data_source_flags(f, true);
    f.add("--model", "/model", Kind::text, "model checkpoint");
    f.add("--epsilon", "/trace/epsilon", Kind::real, "budget, e.g. 8/255");
    f.add("--step", "/trace/step", Kind::real, "step size");
    f.add("--max-steps", "/trace/max_steps", Kind::integer, "iterations");
    f.add("--random-start", "/trace/random_start", Kind::boolean, "start uniformly in the ball");
    f.add("--best-so-far", "/trace/best_so_far", Kind::boolean, "report the running maximum");
    f.add("--loss", "/trace/loss", Kind::text, "full or segmentation");
    f.add("--seed", "/seed", Kind::integer, "master seed");
  }

  std::string manifest_path, replay_out;
  std::size_t replay_threads = 0;
  CLI::App* replay_app = app.add_subcommand("replay", "re-run a manifest and compare outputs");
  replay_app->add_option("manifest", manifest_path, "run_manifest.json")->required();
  replay_app->add_option("--out", replay_out, "output directory (default: <run>/replay)");
  replay_app->add_option("--threads", replay_threads, "override the recorded thread count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  if (replay_app->parsed()) {
    const fs::path dir =
        replay_out.empty() ? fs::path(manifest_path).parent_path() / "replay" : fs::path(replay_out);
    return replay(manifest_path, dir, replay_threads, out, err);
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    json config = json::object();
    try {
      if (!s.config_path.empty()) {
        std::ifstream is(s.config_path);
        if (!is) throw UsageError("cannot read config " + s.config_path);
        try {
          config = json::parse(is);
        } catch (const json::exception& e) {
          throw UsageError("config " + s.config_path + ": " + e.what());
        }
      }
      json full = command_defaults(name);
      merge(full, config, "");
      s.flags->apply(full);
      int chosen = 0;
      if (!s.model.empty()) {
        full["evaluator"]["kind"] = "model";
        full["evaluator"]["model"] = s.model;
        ++chosen;
      }
      if (!s.external.empty()) {
        full["evaluator"]["kind"] = "external";
        full["evaluator"]["command"] = s.external;
        ++chosen;
      }
      if (!s.builtin.empty()) {
        full["evaluator"]["kind"] = s.builtin;
        ++chosen;
      }
      if (chosen > 1) throw UsageError("give only one of --model, --external, --builtin");
      config = std::move(full);
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kUsage;
    }
    return execute(name, config, s.out_dir, out, err);
  }
  err << "error: no command given\n";
  return kUsage;
}

}  // namespace plequiv::cli
