#include "plequiv/json_io.hpp"

#include <stdexcept>

namespace plequiv {
namespace {

using nlohmann::json;

template <typename T>
void read(const json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

void read(const json& j, const char* key, std::optional<double>& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  if (it->is_null()) {
    out.reset();
  } else if (it->is_number()) {
    out = it->get<double>();
  } else {
    throw std::invalid_argument(std::string("config key '") + key + "' must be a number or null");
  }
}

template <typename E, typename Parse>
void read_enum(const json& j, const char* key, E& out, Parse parse) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_string()) {
    throw std::invalid_argument(std::string("config key '") + key + "' must be a string");
  }
  out = parse(it->get<std::string>());
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void require_object(const json& j, const std::string& what) {
  if (!j.is_object()) throw std::invalid_argument(what + " config must be a JSON object");
}

}  // namespace

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const std::string& what) {
  require_object(j, what);
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    for (const char* k : known) found = found || key == k;
    if (!found) throw std::invalid_argument("unknown " + what + " config key '" + key + "'");
  }
}

void to_json(json& j, const DatasetConfig& c) {
  j = json{{"height", c.height},
           {"width", c.width},
           {"channels", c.channels},
           {"min_lanes", c.min_lanes},
           {"max_lanes", c.max_lanes},
           {"thickness", c.thickness},
           {"lane_contrast", c.lane_contrast},
           {"chroma_cue", c.chroma_cue},
           {"min_distractors", c.min_distractors},
           {"max_distractors", c.max_distractors},
           {"distractor_min_length", c.distractor_min_length},
           {"distractor_max_length", c.distractor_max_length},
           {"texture_amplitude", c.texture_amplitude},
           {"noise_level", c.noise_level},
           {"train_size", c.train_size},
           {"val_size", c.val_size},
           {"test_size", c.test_size},
           {"seed", c.seed}};
}

void from_json(const json& j, DatasetConfig& c) {
  reject_unknown_keys(j,
                      {"height", "width", "channels", "min_lanes", "max_lanes", "thickness",
                       "lane_contrast", "chroma_cue", "min_distractors", "max_distractors",
                       "distractor_min_length", "distractor_max_length", "texture_amplitude",
                       "noise_level", "train_size", "val_size", "test_size", "seed"},
                      "dataset");
  read(j, "height", c.height);
  read(j, "width", c.width);
  read(j, "channels", c.channels);
  read(j, "min_lanes", c.min_lanes);
  read(j, "max_lanes", c.max_lanes);
  read(j, "thickness", c.thickness);
  read(j, "lane_contrast", c.lane_contrast);
  read(j, "chroma_cue", c.chroma_cue);
  read(j, "min_distractors", c.min_distractors);
  read(j, "max_distractors", c.max_distractors);
  read(j, "distractor_min_length", c.distractor_min_length);
  read(j, "distractor_max_length", c.distractor_max_length);
  read(j, "texture_amplitude", c.texture_amplitude);
  read(j, "noise_level", c.noise_level);
  read(j, "train_size", c.train_size);
  read(j, "val_size", c.val_size);
  read(j, "test_size", c.test_size);
  read(j, "seed", c.seed);
}

void to_json(json& j, const SegNetConfig& c) {
  j = json{{"in_channels", c.in_channels},
           {"trunk_width", c.trunk_width},
           {"head_width", c.head_width},
           {"embed_dim", c.embed_dim},
           {"trunk_dilation", c.trunk_dilation},
           {"coord_channels", c.coord_channels}};
}

void from_json(const json& j, SegNetConfig& c) {
  reject_unknown_keys(j, {"in_channels", "trunk_width", "head_width", "embed_dim", "trunk_dilation",
                          "coord_channels"},
                      "model");
  read(j, "in_channels", c.in_channels);
  read(j, "trunk_width", c.trunk_width);
  read(j, "head_width", c.head_width);
  read(j, "embed_dim", c.embed_dim);
  read(j, "trunk_dilation", c.trunk_dilation);
  read(j, "coord_channels", c.coord_channels);
}

void to_json(json& j, const DiscriminativeParams& c) {
  j = json{{"delta_v", c.delta_v},
           {"delta_d", c.delta_d},
           {"weight_var", c.weight_var},
           {"weight_dist", c.weight_dist},
           {"weight_reg", c.weight_reg}};
}

void from_json(const json& j, DiscriminativeParams& c) {
  reject_unknown_keys(j, {"delta_v", "delta_d", "weight_var", "weight_dist", "weight_reg"},
                      "discriminative loss");
  read(j, "delta_v", c.delta_v);
  read(j, "delta_d", c.delta_d);
  read(j, "weight_var", c.weight_var);
  read(j, "weight_dist", c.weight_dist);
  read(j, "weight_reg", c.weight_reg);
}

void to_json(json& j, const ClusterParams& c) {
  j = json{{"threshold", c.threshold}, {"radius", c.radius}, {"max_rounds", c.max_rounds}};
}

void from_json(const json& j, ClusterParams& c) {
  reject_unknown_keys(j, {"threshold", "radius", "max_rounds"}, "cluster");
  read(j, "threshold", c.threshold);
  read(j, "radius", c.radius);
  read(j, "max_rounds", c.max_rounds);
}

void to_json(json& j, const AttackConfig& c) {
  j = json{{"norm", to_string(c.norm)},
           {"epsilon", c.epsilon},
           {"step", c.step},
           {"steps", c.steps},
           {"random_start", c.random_start},
           {"loss", to_string(c.loss)},
           {"pos_weight", c.pos_weight},
           {"seed", c.seed}};
}

void from_json(const json& j, AttackConfig& c) {
  reject_unknown_keys(
      j, {"norm", "epsilon", "step", "steps", "random_start", "loss", "pos_weight", "seed"}, "attack");
  read_enum(j, "norm", c.norm, parse_norm);
  read(j, "epsilon", c.epsilon);
  read(j, "step", c.step);
  read(j, "steps", c.steps);
  read(j, "random_start", c.random_start);
  read_enum(j, "loss", c.loss, parse_attack_loss);
  read(j, "pos_weight", c.pos_weight);
  read(j, "seed", c.seed);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"method", to_string(c.method)},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"epsilon", c.epsilon},
           {"fgsm_step", optional_number(c.fgsm_step)},
           {"trades_steps", c.trades_steps},
           {"trades_step", optional_number(c.trades_step)},
           {"beta", optional_number(c.beta)},
           {"epsilon_warmup", c.epsilon_warmup},
           {"pos_weight", c.pos_weight},
           {"seed", c.seed},
           {"model", c.model},
           {"disc", c.disc},
           {"cluster", c.cluster},
           {"val_attack", c.val_attack},
           {"val_limit", c.val_limit},
           {"selection", to_string(c.selection)},
           {"threads", c.threads}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"method", "epochs", "batch_size", "lr", "momentum", "epsilon", "fgsm_step",
                       "trades_steps", "trades_step", "beta", "epsilon_warmup", "pos_weight", "seed",
                       "model", "disc", "cluster", "val_attack", "val_limit", "selection",
                       "threads"},
                      "train");
  read_enum(j, "method", c.method, parse_train_method);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "lr", c.lr);
  read(j, "momentum", c.momentum);
  read(j, "epsilon", c.epsilon);
  read(j, "fgsm_step", c.fgsm_step);
  read(j, "trades_steps", c.trades_steps);
  read(j, "trades_step", c.trades_step);
  read(j, "beta", c.beta);
  read(j, "epsilon_warmup", c.epsilon_warmup);
  read(j, "pos_weight", c.pos_weight);
  read(j, "seed", c.seed);
  read(j, "model", c.model);
  read(j, "disc", c.disc);
  read(j, "cluster", c.cluster);
  read(j, "val_attack", c.val_attack);
  read(j, "val_limit", c.val_limit);
  read_enum(j, "selection", c.selection, parse_selection);
  read(j, "threads", c.threads);
}

void to_json(json& j, const CertifyOptions& c) {
  j = json{{"sigma", c.sigma}, {"n", c.n}, {"alpha", c.alpha}, {"batch_size", c.batch_size}};
}

void from_json(const json& j, CertifyOptions& c) {
  reject_unknown_keys(j, {"sigma", "n", "alpha", "batch_size"}, "certify");
  read(j, "sigma", c.sigma);
  read(j, "n", c.n);
  read(j, "alpha", c.alpha);
  read(j, "batch_size", c.batch_size);
}

void to_json(json& j, const EquivalenceSpec& c) {
  j = json{{"metric", to_string(c.metric)},
           {"threshold", c.threshold},
           {"mode", to_string(c.mode)},
           {"literal_pseudocode_ratio", c.literal_pseudocode_ratio}};
}

void from_json(const json& j, EquivalenceSpec& c) {
  reject_unknown_keys(j, {"metric", "threshold", "mode", "literal_pseudocode_ratio"},
                      "equivalence");
  read_enum(j, "metric", c.metric, parse_metric);
  read(j, "threshold", c.threshold);
  read_enum(j, "mode", c.mode, parse_mode);
  read(j, "literal_pseudocode_ratio", c.literal_pseudocode_ratio);
}

}  // namespace plequiv
