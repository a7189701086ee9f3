#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace plequiv {

/// H x W grid of region ids: 0 is background, 1..K are instances.
struct InstanceMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> ids;

  InstanceMap() = default;
  InstanceMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), ids(h * w, fill) {}
  InstanceMap(std::size_t h, std::size_t w, std::vector<int> values);

  int& at(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  int at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  std::size_t size() const { return ids.size(); }
  int max_id() const;
  /// Relabels instance ids to 1..K in order of first appearance (row-major).
  InstanceMap normalized() const;

  friend bool operator==(const InstanceMap&, const InstanceMap&) = default;
};

/// Plain-text PGM (P2) grid, maxval = max(1, largest id).
void write_pgm(const std::filesystem::path& path, const InstanceMap& map);
InstanceMap read_pgm(const std::filesystem::path& path);

/// Output of an evaluated function, as seen by the scoring metrics. Classifiers
/// fill `label`; segmenters fill `instances` (nonzero ids form the binary mask).
struct Prediction {
  int label = 0;
  InstanceMap instances;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

enum class MetricKind { accuracy, f_measure, sbd };
enum class EquivalenceMode { unsupervised, supervised };

MetricKind parse_metric(const std::string& name);
std::string to_string(MetricKind kind);
EquivalenceMode parse_mode(const std::string& name);
std::string to_string(EquivalenceMode mode);

double accuracy_metric(int a, int b);

/// 2PR / (P + R) on the positive class; 0 when P + R = 0. Two empty masks agree
/// perfectly and score 1.
double f_measure(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double f_measure(const InstanceMap& pred, const InstanceMap& gt);

/// Mean over regions of `a` of the best Dice overlap with any region of `b`.
/// Background (id 0) is always one of the regions, even when empty.
double best_dice(const InstanceMap& a, const InstanceMap& b);
/// min(best_dice(a, b), best_dice(b, a)).
double symmetric_best_dice(const InstanceMap& a, const InstanceMap& b);

/// M(a, b) for the chosen metric kind.
double score(MetricKind kind, const Prediction& a, const Prediction& b);

/// 1 - M(f(x), f(x')).
double induced_distance(double m_score);

/// 1 - m_prime / m_base, with d = 1 when both are 0 and d = -inf when only the
/// base score is 0.
double relative_distance(double m_prime, double m_base);

struct EquivalenceSpec {
  MetricKind metric = MetricKind::sbd;
  double threshold = 0.1;
  EquivalenceMode mode = EquivalenceMode::unsupervised;
  /// Supervised mode only: use 1 - M(f(x0), y) / M(f(x'), y), base score in the
  /// numerator, instead of the relative distance.
  bool literal_pseudocode_ratio = false;

  void validate() const;
};

/// Strict `distance < threshold`.
bool is_equivalent_distance(double distance, double threshold);

/// Judges probes against a fixed base output; the supervised base score
/// M(f(x0), y) is computed once at construction.
class EquivalenceJudge {
 public:
  EquivalenceJudge(EquivalenceSpec spec, Prediction base,
                   std::optional<Prediction> ground_truth = std::nullopt);

  double distance(const Prediction& probe) const;
  bool operator()(const Prediction& probe) const;

  const EquivalenceSpec& spec() const { return spec_; }
  std::optional<double> base_score() const { return base_score_; }

 private:
  EquivalenceSpec spec_;
  Prediction base_;
  std::optional<Prediction> ground_truth_;
  std::optional<double> base_score_;
};

bool is_equivalent(const EquivalenceSpec& spec, const Prediction& base, const Prediction& probe,
                   const std::optional<Prediction>& ground_truth = std::nullopt);

}  // namespace plequiv
