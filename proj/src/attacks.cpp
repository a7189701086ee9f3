#include "plequiv/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "plequiv/format.hpp"
#include "plequiv/parallel.hpp"
#include "plequiv/stats.hpp"

namespace plequiv {
namespace {

constexpr std::uint64_t kStartStream = 0x73746172ULL;  // "star"
constexpr const char* kSecuritySchema = "plequiv.security_curve.v1";
constexpr const char* kTraceSchema = "plequiv.pgd_trace.v1";

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor random_start(const Tensor& x, Norm norm, double epsilon, std::uint64_t point_seed) {
  CounterRng rng(point_seed, kStartStream, 0);
  Tensor out = x;
  if (norm == Norm::linf) {
    for (double& v : out.data()) v += rng.uniform(-epsilon, epsilon);
  } else {
    Tensor dir(x.shape());
    for (double& v : dir.data()) v = rng.normal();
    const double len = l2_norm(dir);
    const double r =
        epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(std::max<std::size_t>(1, x.size())));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += len > 0.0 ? dir[i] * r / len : 0.0;
  }
  return project(out, x, norm, epsilon);
}

Tensor ascent_step(const Tensor& x, const Tensor& grad, Norm norm, double step) {
  Tensor out = x;
  if (norm == Norm::linf) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += step * sign(grad[i]);
    return out;
  }
  const double len = l2_norm(grad);
  if (!(len > 0.0)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step * grad[i] / len;
  return out;
}

double loss_value(const InputLoss& loss, const Tensor& x) {
  Tape tape;
  return loss(tape, tape.constant(x)).value()[0];
}

SegScores mean_scores(std::span<const SegScores> scores) {
  SegScores m;
  if (scores.empty()) return m;
  for (const auto& s : scores) {
    m.f_measure += s.f_measure;
    m.sbd += s.sbd;
  }
  m.f_measure /= static_cast<double>(scores.size());
  m.sbd /= static_cast<double>(scores.size());
  return m;
}

}  // namespace

std::string to_string(Norm norm) { return norm == Norm::linf ? "linf" : "l2"; }

Norm parse_norm(const std::string& name) {
  if (name == "linf" || name == "Linf" || name == "inf") return Norm::linf;
  if (name == "l2" || name == "L2") return Norm::l2;
  throw std::invalid_argument("unknown norm '" + name + "' (linf | l2)");
}

std::string to_string(AttackLoss loss) { return loss == AttackLoss::full ? "full" : "segmentation"; }

AttackLoss parse_attack_loss(const std::string& name) {
  if (name == "full") return AttackLoss::full;
  if (name == "segmentation") return AttackLoss::segmentation;
  throw std::invalid_argument("unknown attack loss '" + name + "' (full | segmentation)");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("attack: epsilon must be positive, got " + format_real(epsilon));
  }
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw std::invalid_argument("attack: step must be positive, got " + format_real(step));
  }
  if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
  if (!(pos_weight > 0.0) || !std::isfinite(pos_weight)) {
    throw std::invalid_argument("attack: pos_weight must be positive");
  }
}

Tensor project(const Tensor& x, const Tensor& center, Norm norm, double epsilon) {
  require_same_shape(x, center, "project");
  Tensor out = x;
  if (norm == Norm::linf) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      double v = std::clamp(out[i], center[i] - epsilon, center[i] + epsilon);
      while (std::abs(v - center[i]) > epsilon) v = std::nextafter(v, center[i]);
      out[i] = v;
    }
  } else {
    Tensor d = difference(out, center);
    double len = l2_norm(d);
    if (len > epsilon) {
      double factor = epsilon / len;
      // Rounding can leave the scaled norm a few ulps above epsilon.
      while (true) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = center[i] + d[i] * factor;
        if (l2_norm(difference(out, center)) <= epsilon) break;
        factor = std::nextafter(factor, 0.0) * (1.0 - 1e-15);
      }
    }
  }
  // Clipping toward a center inside the domain never increases the distance.
  for (double& v : out.data()) v = std::clamp(v, kDomainLo, kDomainHi);
  return out;
}

Tensor fgsm(const InputLoss& loss, const Tensor& x, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  if (epsilon == 0.0) return x;
  const Tensor g = grad_wrt_input(loss, x);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + epsilon * sign(g[i]), kDomainLo, kDomainHi);
  }
  return out;
}

Tensor pgd(const InputLoss& loss, const Tensor& x, const AttackConfig& cfg,
           std::uint64_t point_seed) {
  cfg.validate();
  Tensor adv = cfg.random_start ? random_start(x, cfg.norm, cfg.epsilon, point_seed) : x;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const Tensor g = grad_wrt_input(loss, adv);
    adv = project(ascent_step(adv, g, cfg.norm, cfg.step), x, cfg.norm, cfg.epsilon);
  }
  return adv;
}

InputLoss attack_objective(const SegNet& model, const LaneSample& target, AttackLoss loss,
                           const DiscriminativeParams& disc, double pos_weight) {
  return [&model, &target, loss, disc, pos_weight](Tape& tape, Var x) {
    const BoundSegNet net = bind(tape, model, false);
    const SegNetVars out = segnet_forward(net, x, loss == AttackLoss::full);
    if (loss == AttackLoss::segmentation) {
      return ad::sigmoid_cross_entropy(
          out.seg_logits, target.seg_gt.reshaped(out.seg_logits.shape()), pos_weight);
    }
    return segmentation_loss(out, target, disc, pos_weight);
  };
}

Tensor fgsm(const SegNet& model, const Tensor& x, const LaneSample& target, double epsilon,
            AttackLoss loss, double pos_weight) {
  return fgsm(attack_objective(model, target, loss, {}, pos_weight), x, epsilon);
}

Tensor pgd(const SegNet& model, const Tensor& x, const LaneSample& target, const AttackConfig& cfg,
           std::uint64_t point_seed) {
  return pgd(attack_objective(model, target, cfg.loss, {}, cfg.pos_weight), x, cfg, point_seed);
}

std::vector<AttackEvaluation> attack_each(const SegNet& model, std::span<const LaneSample> samples,
                                          const AttackConfig& cfg, const ClusterParams& cluster,
                                          std::size_t threads) {
  cfg.validate();
  std::vector<AttackEvaluation> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const LaneSample& s = samples[i];
    out[i].natural = score_prediction(predict(model, s.image, cluster), s);
    const Tensor adv = pgd(model, s.image, s, cfg, derive_seed(cfg.seed, i));
    out[i].adversarial = score_prediction(predict(model, adv, cluster), s);
  });
  return out;
}

AttackEvaluation evaluate_under_attack(const SegNet& model, std::span<const LaneSample> samples,
                                       const AttackConfig& cfg, const ClusterParams& cluster,
                                       std::size_t threads) {
  return mean_evaluation(attack_each(model, samples, cfg, cluster, threads));
}

AttackEvaluation mean_evaluation(std::span<const AttackEvaluation> rows) {
  std::vector<SegScores> natural, adversarial;
  for (const auto& e : rows) {
    natural.push_back(e.natural);
    adversarial.push_back(e.adversarial);
  }
  return {mean_scores(natural), mean_scores(adversarial)};
}

void write_attack_csv(const std::filesystem::path& path, std::span<const AttackEvaluation> rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kAttackSchema << '\n';
  os << "index,natural_f,natural_sbd,adversarial_f,adversarial_sbd\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << i << ',' << format_real(rows[i].natural.f_measure) << ','
       << format_real(rows[i].natural.sbd) << ',' << format_real(rows[i].adversarial.f_measure)
       << ',' << format_real(rows[i].adversarial.sbd) << '\n';
  }
}

std::vector<SecurityPoint> security_curve(const SegNet& model, std::span<const LaneSample> samples,
                                          std::span<const double> epsilons, Norm norm,
                                          std::size_t steps, bool random_start, std::uint64_t seed,
                                          const ClusterParams& cluster, std::size_t threads) {
  if (steps < 1) throw std::invalid_argument("security_curve: steps must be >= 1");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] >= 0.0) || (i > 0 && !(epsilons[i] > epsilons[i - 1]))) {
      throw std::invalid_argument("security_curve: epsilons must be nonnegative and increasing");
    }
  }
  std::vector<SecurityPoint> curve;
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    const double eps = epsilons[e];
    std::vector<SegScores> scores(samples.size());
    AttackConfig cfg;
    cfg.norm = norm;
    cfg.epsilon = eps;
    cfg.step = 3.0 * eps / (2.0 * static_cast<double>(steps));
    cfg.steps = steps;
    cfg.random_start = random_start;
    cfg.seed = derive_seed(seed, e);
    parallel_for(samples.size(), threads, [&](std::size_t i) {
      const LaneSample& s = samples[i];
      const Tensor x =
          eps == 0.0 ? s.image : pgd(model, s.image, s, cfg, derive_seed(cfg.seed, i));
      scores[i] = score_prediction(predict(model, x, cluster), s);
    });
    curve.push_back({eps, mean_scores(scores)});
  }
  return curve;
}

void write_security_csv(const std::filesystem::path& path, std::span<const SecurityPoint> curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kSecuritySchema << '\n';
  os << "epsilon,f_measure,sbd,combined\n";
  for (const auto& p : curve) {
    os << format_real(p.epsilon) << ',' << format_real(p.scores.f_measure) << ','
       << format_real(p.scores.sbd) << ',' << format_real(p.scores.combined()) << '\n';
  }
}

std::vector<double> pgd_loss_trace(const InputLoss& loss, const Tensor& x,
                                   const TraceOptions& options, std::uint64_t point_seed) {
  if (options.max_steps < 1) throw std::invalid_argument("pgd_loss_trace: max_steps must be >= 1");
  AttackConfig cfg;
  cfg.epsilon = options.epsilon;
  cfg.step = options.step;
  cfg.validate();
  Tensor adv = options.random_start ? random_start(x, Norm::linf, cfg.epsilon, point_seed) : x;
  std::vector<double> trace;
  trace.reserve(options.max_steps);
  for (std::size_t s = 0; s < options.max_steps; ++s) {
    const Tensor g = grad_wrt_input(loss, adv);
    adv = project(ascent_step(adv, g, Norm::linf, cfg.step), x, Norm::linf, cfg.epsilon);
    double v = loss_value(loss, adv);
    if (options.best_so_far && !trace.empty()) v = std::max(v, trace.back());
    trace.push_back(v);
  }
  return trace;
}

std::vector<double> mean_pgd_loss_trace(const SegNet& model, std::span<const LaneSample> samples,
                                        const TraceOptions& options, std::uint64_t seed,
                                        std::size_t threads) {
  std::vector<std::vector<double>> traces(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    traces[i] = pgd_loss_trace(attack_objective(model, samples[i], options.loss, {}, options.pos_weight),
                               samples[i].image, options, derive_seed(seed, i));
  });
  std::vector<double> mean(options.max_steps, 0.0);
  if (samples.empty()) return mean;
  for (const auto& t : traces) {
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += t[k];
  }
  for (double& v : mean) v /= static_cast<double>(samples.size());
  return mean;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const double> trace) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "# schema: " << kTraceSchema << '\n';
  os << "step,loss\n";
  for (std::size_t k = 0; k < trace.size(); ++k) os << k + 1 << ',' << format_real(trace[k]) << '\n';
}

}  // namespace plequiv
