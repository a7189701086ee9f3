#include "plequiv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace plequiv {

InstanceMap::InstanceMap(std::size_t h, std::size_t w, std::vector<int> values)
    : height(h), width(w), ids(std::move(values)) {
  if (ids.size() != h * w) throw std::invalid_argument("instance map: size does not match H x W");
}

int InstanceMap::max_id() const {
  return ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end());
}

InstanceMap InstanceMap::normalized() const {
  InstanceMap out(height, width);
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] <= 0) continue;
    auto [it, inserted] = relabel.emplace(ids[i], static_cast<int>(relabel.size()) + 1);
    out.ids[i] = it->second;
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const InstanceMap& map) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P2\n" << map.width << ' ' << map.height << '\n' << std::max(1, map.max_id()) << '\n';
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c) os << ' ';
      os << map.at(r, c);
    }
    os << '\n';
  }
}

InstanceMap read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw std::runtime_error(path.string() + ": truncated PGM");
  };
  if (next_token() != "P2") throw std::runtime_error(path.string() + ": not a plain PGM (P2)");
  const std::size_t width = std::stoul(next_token());
  const std::size_t height = std::stoul(next_token());
  const int maxval = std::stoi(next_token());
  if (width == 0 || height == 0) throw std::runtime_error(path.string() + ": empty grid");
  InstanceMap map(height, width);
  for (int& v : map.ids) {
    v = std::stoi(next_token());
    if (v < 0 || v > maxval) throw std::runtime_error(path.string() + ": id outside [0, maxval]");
  }
  return map;
}

MetricKind parse_metric(const std::string& name) {
  if (name == "accuracy") return MetricKind::accuracy;
  if (name == "f_measure" || name == "f1") return MetricKind::f_measure;
  if (name == "sbd") return MetricKind::sbd;
  throw std::invalid_argument("unknown metric '" + name + "' (accuracy | f_measure | sbd)");
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::f_measure: return "f_measure";
    case MetricKind::sbd: return "sbd";
  }
  return "?";
}

EquivalenceMode parse_mode(const std::string& name) {
  if (name == "unsupervised") return EquivalenceMode::unsupervised;
  if (name == "supervised") return EquivalenceMode::supervised;
  throw std::invalid_argument("unknown equivalence mode '" + name +
                              "' (unsupervised | supervised)");
}

std::string to_string(EquivalenceMode mode) {
  return mode == EquivalenceMode::supervised ? "supervised" : "unsupervised";
}

double accuracy_metric(int a, int b) { return a == b ? 1.0 : 0.0; }

double f_measure(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("f_measure: shape mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  if (tp + fp + fn == 0) return 1.0;
  if (tp == 0) return 0.0;
  // 2PR / (P + R) simplifies to 2TP / (2TP + FP + FN).
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

double f_measure(const InstanceMap& pred, const InstanceMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("f_measure: shape mismatch");
  }
  std::vector<std::uint8_t> p(pred.size()), g(gt.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = pred.ids[i] > 0;
    g[i] = gt.ids[i] > 0;
  }
  return f_measure(p, g);
}

namespace {

struct Overlap {
  std::vector<double> size_a, size_b;
  std::vector<std::vector<double>> inter;  // [region of a][region of b]
};

Overlap overlap(const InstanceMap& a, const InstanceMap& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("symmetric_best_dice: shape mismatch");
  }
  std::map<int, std::size_t> ia{{0, 0}}, ib{{0, 0}};
  for (int id : a.ids) ia.emplace(std::max(id, 0), ia.size());
  for (int id : b.ids) ib.emplace(std::max(id, 0), ib.size());
  Overlap o;
  o.size_a.assign(ia.size(), 0.0);
  o.size_b.assign(ib.size(), 0.0);
  o.inter.assign(ia.size(), std::vector<double>(ib.size(), 0.0));
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    const std::size_t ra = ia.at(std::max(a.ids[i], 0));
    const std::size_t rb = ib.at(std::max(b.ids[i], 0));
    o.size_a[ra] += 1.0;
    o.size_b[rb] += 1.0;
    o.inter[ra][rb] += 1.0;
  }
  return o;
}

double dice(double inter, double size_a, double size_b) {
  if (size_a + size_b == 0.0) return 1.0;
  return 2.0 * inter / (size_a + size_b);
}

double directed_best_dice(const Overlap& o, bool a_to_b) {
  const auto& from = a_to_b ? o.size_a : o.size_b;
  const auto& to = a_to_b ? o.size_b : o.size_a;
  double total = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < to.size(); ++j) {
      const double inter = a_to_b ? o.inter[i][j] : o.inter[j][i];
      best = std::max(best, dice(inter, from[i], to[j]));
    }
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

double best_dice(const InstanceMap& a, const InstanceMap& b) {
  return directed_best_dice(overlap(a, b), true);
}

double symmetric_best_dice(const InstanceMap& a, const InstanceMap& b) {
  const Overlap o = overlap(a, b);
  return std::min(directed_best_dice(o, true), directed_best_dice(o, false));
}

double score(MetricKind kind, const Prediction& a, const Prediction& b) {
  switch (kind) {
    case MetricKind::accuracy: return accuracy_metric(a.label, b.label);
    case MetricKind::f_measure: return f_measure(a.instances, b.instances);
    case MetricKind::sbd: return symmetric_best_dice(a.instances, b.instances);
  }
  throw std::logic_error("score: unknown metric");
}

double induced_distance(double m_score) { return 1.0 - m_score; }

double relative_distance(double m_prime, double m_base) {
  if (m_base == 0.0) {
    return m_prime == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  }
  return 1.0 - m_prime / m_base;
}

void EquivalenceSpec::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("equivalence threshold t must lie in (0, 1)");
  }
}

bool is_equivalent_distance(double distance, double threshold) { return distance < threshold; }

EquivalenceJudge::EquivalenceJudge(EquivalenceSpec spec, Prediction base,
                                   std::optional<Prediction> ground_truth)
    : spec_(spec), base_(std::move(base)), ground_truth_(std::move(ground_truth)) {
  spec_.validate();
  if (spec_.mode == EquivalenceMode::supervised) {
    if (!ground_truth_) {
      throw std::invalid_argument("supervised equivalence requires a ground-truth label");
    }
    base_score_ = score(spec_.metric, base_, *ground_truth_);
  }
}

double EquivalenceJudge::distance(const Prediction& probe) const {
  if (spec_.mode == EquivalenceMode::unsupervised) {
    return induced_distance(score(spec_.metric, base_, probe));
  }
  const double probe_score = score(spec_.metric, probe, *ground_truth_);
  if (spec_.literal_pseudocode_ratio) return relative_distance(*base_score_, probe_score);
  return relative_distance(probe_score, *base_score_);
}

bool EquivalenceJudge::operator()(const Prediction& probe) const {
  return is_equivalent_distance(distance(probe), spec_.threshold);
}

bool is_equivalent(const EquivalenceSpec& spec, const Prediction& base, const Prediction& probe,
                   const std::optional<Prediction>& ground_truth) {
  return EquivalenceJudge(spec, base, ground_truth)(probe);
}

}  // namespace plequiv
