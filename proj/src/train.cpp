#include "plequiv/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "plequiv/format.hpp"
#include "plequiv/stats.hpp"
#include "plequiv/tensor_io.hpp"

namespace plequiv {
namespace {

constexpr std::uint64_t kOrderStream = 0x6f726472ULL;   // "ordr"
constexpr std::uint64_t kDeltaStream = 0x64656c74ULL;   // "delt"
constexpr std::uint64_t kTradesStream = 0x74726164ULL;  // "trad"
constexpr double kTradesInitScale = 0.001;
constexpr const char* kHistorySchema = "plequiv.train_history.v1";
// History rows in a checkpoint; wall time is not stored so checkpoints are reproducible.
constexpr std::size_t kStateColumns = 7;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, kOrderStream, epoch);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Var batch_mean(std::vector<Var>& losses) {
  Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
  return ad::scale(total, 1.0 / static_cast<double>(losses.size()));
}

std::vector<Tensor> param_grads(const BoundSegNet& net) {
  std::vector<Tensor> grads;
  grads.reserve(net.params.size());
  for (const auto& p : net.params) grads.push_back(p.grad());
  return grads;
}

void check_finite_loss(double loss, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error("training diverged: loss " + format_real(loss) + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch) +
                             "; try a smaller learning rate");
  }
}

Tensor seg_probs_of(const SegNet& model, const Tensor& x) {
  Tape tape;
  return segnet_forward(bind(tape, model, false), tape.constant(x), false).seg_probs.value();
}

struct Batch {
  std::vector<const LaneSample*> samples;
  std::vector<std::size_t> indices;
};

std::vector<Batch> make_batches(std::span<const LaneSample> data, const TrainConfig& cfg,
                                std::size_t epoch) {
  if (data.empty()) throw std::invalid_argument("training data is empty");
  const auto order = epoch_order(data.size(), cfg.seed, epoch);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    Batch b;
    for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
      b.samples.push_back(&data[order[k]]);
      b.indices.push_back(order[k]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// Weight update on inputs `xs`; returns the batch loss.
double update_step(SegNet& model, SgdMomentum& opt, const Batch& batch, std::span<const Tensor> xs,
                   std::span<const Tensor> trades_inputs, double beta, const TrainConfig& cfg,
                   std::size_t epoch, std::size_t batch_index) {
  Tape tape;
  const BoundSegNet net = bind(tape, model, true);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    losses.push_back(trades_inputs.empty()
                         ? sample_loss(net, xs[i], *batch.samples[i], cfg.disc, cfg.pos_weight)
                         : trades_total_loss(net, xs[i], trades_inputs[i], *batch.samples[i],
                                             cfg.disc, beta, cfg.pos_weight));
  }
  const Var loss = batch_mean(losses);
  const double value = loss.value()[0];
  check_finite_loss(value, epoch, batch_index);
  tape.backward(loss);
  opt.step(model.parameters(), param_grads(net));
  return value;
}

double selection_score(Selection s, const EpochRecord& r) {
  switch (s) {
    case Selection::natural: return r.natural.combined();
    case Selection::adversarial: return r.adversarial.combined();
    case Selection::sum: return r.natural.combined() + r.adversarial.combined();
  }
  return 0.0;
}

std::vector<NamedTensor> prefixed(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors) out.push_back({prefix + t.name, t.tensor});
  return out;
}

std::vector<NamedTensor> unprefixed(const std::vector<NamedTensor>& tensors,
                                    const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) == 0) out.push_back({t.name.substr(prefix.size()), t.tensor});
  }
  return out;
}

}  // namespace

std::string to_string(TrainMethod method) {
  switch (method) {
    case TrainMethod::standard: return "standard";
    case TrainMethod::fbf: return "fbf";
    case TrainMethod::fbf_trades: return "fbf_trades";
  }
  return "?";
}

TrainMethod parse_train_method(const std::string& name) {
  if (name == "standard") return TrainMethod::standard;
  if (name == "fbf") return TrainMethod::fbf;
  if (name == "fbf_trades" || name == "fbf+trades") return TrainMethod::fbf_trades;
  throw std::invalid_argument("unknown training method '" + name + "' (standard | fbf | fbf_trades)");
}

std::string to_string(Selection selection) {
  switch (selection) {
    case Selection::natural: return "natural";
    case Selection::adversarial: return "adversarial";
    case Selection::sum: return "sum";
  }
  return "?";
}

Selection parse_selection(const std::string& name) {
  if (name == "natural") return Selection::natural;
  if (name == "adversarial") return Selection::adversarial;
  if (name == "sum") return Selection::sum;
  throw std::invalid_argument("unknown selection '" + name + "' (natural | adversarial | sum)");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("train: momentum must be in [0, 1)");
  }
  // epsilon = 0 is admitted so the adversarial methods can be checked against standard training.
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("train: epsilon must be >= 0");
  }
  if (fgsm_step && !(*fgsm_step >= 0.0)) throw std::invalid_argument("train: fgsm_step must be >= 0");
  if (trades_steps < 1) throw std::invalid_argument("train: trades_steps must be >= 1");
  if (trades_step && !(*trades_step >= 0.0)) {
    throw std::invalid_argument("train: trades_step must be >= 0");
  }
  if (beta && !(*beta >= 0.0)) throw std::invalid_argument("train: beta must be >= 0");
  if (!(pos_weight > 0.0) || !std::isfinite(pos_weight)) {
    throw std::invalid_argument("train: pos_weight must be positive");
  }
  val_attack.validate();
}

double TrainConfig::resolved_fgsm_step() const { return fgsm_step.value_or(1.25 * epsilon); }
double TrainConfig::resolved_trades_step() const { return trades_step.value_or(epsilon / 10.0); }
double TrainConfig::resolved_beta(std::size_t height, std::size_t width) const {
  if (beta) return *beta;
  return kReferenceBeta * kReferencePixels / static_cast<double>(height * width);
}

double TrainConfig::epsilon_scale(std::size_t epoch) const {
  if (epoch + 1 >= epsilon_warmup) return 1.0;
  return static_cast<double>(epoch + 1) / static_cast<double>(epsilon_warmup);
}

void SgdMomentum::step(std::vector<NamedTensor>& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("sgd: gradient count mismatch");
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.tensor.shape(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = velocity_[k].data();
    auto w = params[k].tensor.data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
  }
}

Var sample_loss(const BoundSegNet& net, const Tensor& x, const LaneSample& sample,
                const DiscriminativeParams& disc, double pos_weight) {
  Tape& tape = *net.params.front().tape();
  return segmentation_loss(segnet_forward(net, tape.constant(x), true), sample, disc, pos_weight);
}

std::vector<Tensor> trades_adversarial_inputs(const SegNet& model, std::span<const Tensor> xs,
                                              std::size_t steps, double step, double epsilon,
                                              std::span<const std::uint64_t> seeds) {
  if (seeds.size() != xs.size()) throw std::invalid_argument("trades: one seed per input required");
  std::vector<Tensor> base, adv;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    base.push_back(seg_probs_of(model, xs[i]));
    CounterRng rng(seeds[i], kTradesStream, 0);
    Tensor start = xs[i];
    for (double& v : start.data()) v += kTradesInitScale * rng.normal();
    adv.push_back(project(start, xs[i], Norm::linf, epsilon));
  }
  for (std::size_t s = 0; s < steps; ++s) {
    Tape tape;
    const BoundSegNet net = bind(tape, model, false);
    std::vector<Var> leaves, kls;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      leaves.push_back(tape.leaf(adv[i], true));
      const Var q = segnet_forward(net, leaves.back(), false).seg_probs;
      kls.push_back(ad::binary_kl_div(tape.constant(base[i]), q));
    }
    Var total = kls.front();
    for (std::size_t i = 1; i < kls.size(); ++i) total = ad::add(total, kls[i]);
    tape.backward(total);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor g = leaves[i].grad();
      Tensor next = adv[i];
      for (std::size_t j = 0; j < next.size(); ++j) next[j] += step * sign(g[j]);
      adv[i] = project(next, xs[i], Norm::linf, epsilon);
    }
  }
  return adv;
}

Var trades_total_loss(const BoundSegNet& net, const Tensor& x, const Tensor& x_adv,
                      const LaneSample& sample, const DiscriminativeParams& disc, double beta,
                      double pos_weight) {
  Tape& tape = *net.params.front().tape();
  const SegNetVars natural = segnet_forward(net, tape.constant(x), true);
  const Var base = segmentation_loss(natural, sample, disc, pos_weight);
  const SegNetVars perturbed = segnet_forward(net, tape.constant(x_adv), false);
  const Var kl = ad::binary_kl_div(natural.seg_probs, perturbed.seg_probs);
  return ad::add(base, ad::scale(kl, beta));
}

double trades_total_loss(const SegNet& model, const Tensor& x, const LaneSample& sample,
                         const TrainConfig& cfg, std::uint64_t seed) {
  const std::uint64_t seeds[] = {seed};
  const auto adv = trades_adversarial_inputs(model, std::span<const Tensor>(&x, 1), cfg.trades_steps,
                                             cfg.resolved_trades_step(), cfg.epsilon, seeds);
  Tape tape;
  const BoundSegNet net = bind(tape, model, false);
  const double beta = cfg.resolved_beta(sample.seg_gt.dim(0), sample.seg_gt.dim(1));
  return trades_total_loss(net, x, adv.front(), sample, cfg.disc, beta, cfg.pos_weight).value()[0];
}

EpochStats standard_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                          const TrainConfig& cfg, std::size_t epoch) {
  const auto start_calls = Tape::backward_calls();
  EpochStats stats;
  const auto batches = make_batches(data, cfg, epoch);
  double total = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    std::vector<Tensor> xs;
    for (const auto* s : batches[b].samples) xs.push_back(s->image);
    total += update_step(model, opt, batches[b], xs, {}, 0.0, cfg, epoch, b);
  }
  stats.batches = batches.size();
  stats.mean_loss = total / static_cast<double>(batches.size());
  stats.backward_calls = Tape::backward_calls() - start_calls;
  return stats;
}

EpochStats fbf_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                     const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.method == TrainMethod::standard) {
    throw std::invalid_argument("fbf_epoch: method must be fbf or fbf_trades");
  }
  const auto start_calls = Tape::backward_calls();
  const double ramp = cfg.epsilon_scale(epoch);
  const double eps = ramp * cfg.epsilon;
  const double alpha = ramp * cfg.resolved_fgsm_step();
  const std::uint64_t epoch_seed = derive_seed(cfg.seed, epoch);
  EpochStats stats;
  const auto batches = make_batches(data, cfg, epoch);
  double total = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Batch& batch = batches[b];
    const std::size_t B = batch.samples.size();
    // delta ~ U(-eps, eps), kept so that x + delta stays in the domain.
    std::vector<Tensor> deltas;
    for (std::size_t i = 0; i < B; ++i) {
      const Tensor& x = batch.samples[i]->image;
      CounterRng rng(epoch_seed, kDeltaStream, batch.indices[i]);
      Tensor d(x.shape());
      for (std::size_t j = 0; j < d.size(); ++j) {
        const double v = rng.uniform(-eps, eps);
        d[j] = std::clamp(x[j] + v, kDomainLo, kDomainHi) - x[j];
      }
      deltas.push_back(std::move(d));
    }
    std::vector<Tensor> grads;
    {
      Tape tape;
      const BoundSegNet net = bind(tape, model, false);
      std::vector<Var> leaves, losses;
      for (std::size_t i = 0; i < B; ++i) {
        Tensor xd = batch.samples[i]->image;
        for (std::size_t j = 0; j < xd.size(); ++j) xd[j] += deltas[i][j];
        leaves.push_back(tape.leaf(std::move(xd), true));
        losses.push_back(segmentation_loss(segnet_forward(net, leaves.back(), true),
                                           *batch.samples[i], cfg.disc, cfg.pos_weight));
      }
      const Var loss = batch_mean(losses);
      check_finite_loss(loss.value()[0], epoch, b);
      tape.backward(loss);
      for (const auto& l : leaves) grads.push_back(l.grad());
    }
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < B; ++i) {
      const Tensor& x = batch.samples[i]->image;
      Tensor xd = x;
      for (std::size_t j = 0; j < xd.size(); ++j) xd[j] += deltas[i][j] + alpha * sign(grads[i][j]);
      xd = project(xd, x, Norm::linf, eps);
      stats.max_delta = std::max(stats.max_delta, linf_norm(difference(xd, x)));
      xs.push_back(std::move(xd));
    }
    std::vector<Tensor> trades_inputs;
    double beta = 0.0;
    if (cfg.method == TrainMethod::fbf_trades) {
      std::vector<std::uint64_t> seeds;
      for (std::size_t idx : batch.indices) seeds.push_back(derive_seed(epoch_seed, kTradesStream, idx));
      trades_inputs = trades_adversarial_inputs(model, xs, cfg.trades_steps,
                                                ramp * cfg.resolved_trades_step(), eps, seeds);
      for (std::size_t i = 0; i < B; ++i) {
        stats.max_trades_offset =
            std::max(stats.max_trades_offset, linf_norm(difference(trades_inputs[i], xs[i])));
      }
      beta = cfg.resolved_beta(batch.samples.front()->seg_gt.dim(0),
                               batch.samples.front()->seg_gt.dim(1));
    }
    total += update_step(model, opt, batch, xs, trades_inputs, beta, cfg, epoch, b);
  }
  stats.batches = batches.size();
  stats.mean_loss = total / static_cast<double>(batches.size());
  stats.backward_calls = Tape::backward_calls() - start_calls;
  return stats;
}

EpochStats run_epoch(SegNet& model, SgdMomentum& opt, std::span<const LaneSample> data,
                     const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.method == TrainMethod::standard) return standard_epoch(model, opt, data, cfg, epoch);
  return fbf_epoch(model, opt, data, cfg, epoch);
}

TrainResult train(const TrainConfig& cfg, const LaneDataset& dataset,
                  std::optional<TrainState> resume, const EpochCallback& on_epoch) {
  cfg.validate();
  TrainState state;
  if (resume) {
    state = std::move(*resume);
    std::vector<Tensor> velocity = std::move(state.optimizer.velocity());
    state.optimizer = SgdMomentum(cfg.lr, cfg.momentum);
    state.optimizer.velocity() = std::move(velocity);
  } else {
    state.model = SegNet::initialized(cfg.model, cfg.seed);
    state.best_model = state.model;
    state.optimizer = SgdMomentum(cfg.lr, cfg.momentum);
  }
  std::span<const LaneSample> val(dataset.val);
  if (cfg.val_limit > 0 && cfg.val_limit < val.size()) val = val.first(cfg.val_limit);

  for (std::size_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochStats stats = run_epoch(state.model, state.optimizer, dataset.train, cfg, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = stats.mean_loss;
    rec.backward_calls = stats.backward_calls;
    if (!val.empty()) {
      const AttackEvaluation ev =
          evaluate_under_attack(state.model, val, cfg.val_attack, cfg.cluster, cfg.threads);
      rec.natural = ev.natural;
      rec.adversarial = ev.adversarial;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double score = selection_score(cfg.selection, rec);
    if (!state.history.best_epoch || score > state.history.best_score) {
      state.history.best_epoch = epoch;
      state.history.best_score = score;
      state.best_model = state.model;
    }
    state.history.records.push_back(rec);
    state.next_epoch = epoch + 1;
    if (on_epoch) on_epoch(state);
  }
  return {state.model, state.best_model, state.history};
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
  std::vector<NamedTensor> tensors = prefixed(state.model.to_tensors(), "model/");
  for (auto& t : prefixed(state.best_model.to_tensors(), "best/")) tensors.push_back(std::move(t));
  const auto& velocity = state.optimizer.velocity();
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    tensors.push_back({"velocity/" + std::to_string(i), velocity[i]});
  }
  tensors.push_back({"meta/next_epoch", Tensor::scalar(static_cast<double>(state.next_epoch))});
  tensors.push_back({"meta/velocity_count", Tensor::scalar(static_cast<double>(velocity.size()))});
  const auto& h = state.history;
  tensors.push_back({"meta/best", Tensor(Shape{3}, {h.best_epoch ? 1.0 : 0.0,
                                                    h.best_epoch ? static_cast<double>(*h.best_epoch) : 0.0,
                                                    h.best_score})});
  Tensor rows(Shape{h.records.size(), kStateColumns});
  for (std::size_t r = 0; r < h.records.size(); ++r) {
    const auto& e = h.records[r];
    const double vals[kStateColumns] = {static_cast<double>(e.epoch), e.train_loss,
                                        e.natural.f_measure, e.natural.sbd,
                                        e.adversarial.f_measure, e.adversarial.sbd,
                                        static_cast<double>(e.backward_calls)};
    for (std::size_t c = 0; c < kStateColumns; ++c) rows[r * kStateColumns + c] = vals[c];
  }
  tensors.push_back({"meta/history", rows});
  save_tensors(path, tensors);
}

TrainState load_train_state(const std::filesystem::path& path) {
  const auto tensors = load_tensors(path);
  TrainState state;
  state.model = SegNet::from_tensors(unprefixed(tensors, "model/"));
  state.best_model = SegNet::from_tensors(unprefixed(tensors, "best/"));
  const auto count = static_cast<std::size_t>(find_tensor(tensors, "meta/velocity_count")[0]);
  for (std::size_t i = 0; i < count; ++i) {
    state.optimizer.velocity().push_back(find_tensor(tensors, "velocity/" + std::to_string(i)));
  }
  state.next_epoch = static_cast<std::size_t>(find_tensor(tensors, "meta/next_epoch")[0]);
  const Tensor& best = find_tensor(tensors, "meta/best");
  if (best.size() != 3) throw std::runtime_error(path.string() + ": malformed meta/best");
  if (best[0] != 0.0) state.history.best_epoch = static_cast<std::size_t>(best[1]);
  state.history.best_score = best[2];
  const Tensor& rows = find_tensor(tensors, "meta/history");
  if (rows.rank() != 2 || rows.dim(1) != kStateColumns) {
    throw std::runtime_error(path.string() + ": malformed meta/history");
  }
  for (std::size_t r = 0; r < rows.dim(0); ++r) {
    const double* v = rows.data().data() + r * kStateColumns;
    EpochRecord e;
    e.epoch = static_cast<std::size_t>(v[0]);
    e.train_loss = v[1];
    e.natural = {v[2], v[3]};
    e.adversarial = {v[4], v[5]};
    e.backward_calls = static_cast<std::uint64_t>(v[6]);
    state.history.records.push_back(e);
  }
  return state;
}

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kHistorySchema << '\n';
  os << "epoch,train_loss,natural_f_measure,natural_sbd,natural_combined,adversarial_f_measure,"
        "adversarial_sbd,adversarial_combined,backward_calls,best\n";
  for (const auto& r : history.records) {
    os << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.natural.f_measure)
       << ',' << format_real(r.natural.sbd) << ',' << format_real(r.natural.combined()) << ','
       << format_real(r.adversarial.f_measure) << ',' << format_real(r.adversarial.sbd) << ','
       << format_real(r.adversarial.combined()) << ',' << r.backward_calls << ','
       << (history.best_epoch && *history.best_epoch == r.epoch ? 1 : 0) << '\n';
  }
}

}  // namespace plequiv
