#include "plequiv/segnet.hpp"

#include <cmath>
#include <stdexcept>

#include "plequiv/stats.hpp"

namespace plequiv {
namespace {

constexpr std::uint64_t kInitStream = 0x696e6974ULL;  // "init"

struct LayerSpec {
  const char* name;
  std::size_t out, in, k;
};

std::vector<LayerSpec> layer_specs(const SegNetConfig& c) {
  return {
      {"trunk.0", c.trunk_width, c.in_channels, 3},
      {"trunk.1", c.trunk_width, c.trunk_width, 3},
      {"trunk.2", c.trunk_width, c.trunk_width, 3},
      {"seg.0", c.head_width, c.trunk_width, 3},
      {"seg.1", 1, c.head_width, 1},
      {"emb.0", c.head_width, c.trunk_width + (c.coord_channels ? 2 : 0), 3},
      {"emb.1", c.embed_dim, c.head_width, 1},
  };
}

enum Layer : std::size_t { kTrunk0, kTrunk1, kTrunk2, kSeg0, kSeg1, kEmb0, kEmb1 };

Var conv_layer(const BoundSegNet& net, std::size_t layer, Var x, std::size_t dilation = 1) {
  const std::size_t k = net.params[2 * layer].value().dim(2);
  return ad::conv2d(x, net.params[2 * layer], net.params[2 * layer + 1], 1, dilation * (k / 2),
                    dilation);
}

Tensor coordinate_maps(std::size_t height, std::size_t width) {
  Tensor maps(Shape{2, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      maps.at(0, y, x) = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(width) - 1.0;
      maps.at(1, y, x) = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(height) - 1.0;
    }
  }
  return maps;
}

}  // namespace

SegNet::SegNet(SegNetConfig config) : config_(config) {
  if (config.in_channels == 0 || config.trunk_width == 0 || config.head_width == 0 ||
      config.embed_dim == 0) {
    throw std::invalid_argument("segnet: all widths must be positive");
  }
  for (std::size_t d : config.trunk_dilation) {
    if (d == 0) throw std::invalid_argument("segnet: dilation must be >= 1");
  }
  for (const auto& l : layer_specs(config_)) {
    params_.push_back({std::string(l.name) + ".weight", Tensor(Shape{l.out, l.in, l.k, l.k})});
    params_.push_back({std::string(l.name) + ".bias", Tensor(Shape{l.out})});
  }
}

SegNet SegNet::initialized(SegNetConfig config, std::uint64_t seed) {
  SegNet net(config);
  for (std::size_t i = 0; i < net.params_.size(); i += 2) {
    Tensor& w = net.params_[i].tensor;
    const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    const double stddev = std::sqrt(2.0 / fan_in);
    CounterRng rng(seed, kInitStream, i);
    for (double& v : w.data()) v = stddev * rng.normal();
  }
  return net;
}

std::size_t SegNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

std::vector<NamedTensor> SegNet::to_tensors() const {
  std::vector<NamedTensor> out = params_;
  out.push_back({"meta/segnet_config",
                 Tensor(Shape{8}, {static_cast<double>(config_.in_channels),
                                   static_cast<double>(config_.trunk_width),
                                   static_cast<double>(config_.head_width),
                                   static_cast<double>(config_.embed_dim),
                                   static_cast<double>(config_.trunk_dilation[0]),
                                   static_cast<double>(config_.trunk_dilation[1]),
                                   static_cast<double>(config_.trunk_dilation[2]),
                                   config_.coord_channels ? 1.0 : 0.0})});
  return out;
}

SegNet SegNet::from_tensors(const std::vector<NamedTensor>& tensors) {
  const Tensor& meta = find_tensor(tensors, "meta/segnet_config");
  if (meta.size() != 8) throw std::runtime_error("segnet: malformed config tensor");
  SegNetConfig config;
  config.in_channels = static_cast<std::size_t>(meta[0]);
  config.trunk_width = static_cast<std::size_t>(meta[1]);
  config.head_width = static_cast<std::size_t>(meta[2]);
  config.embed_dim = static_cast<std::size_t>(meta[3]);
  for (std::size_t i = 0; i < 3; ++i) {
    config.trunk_dilation[i] = static_cast<std::size_t>(meta[4 + i]);
  }
  config.coord_channels = meta[7] != 0.0;
  SegNet net(config);
  for (auto& p : net.params_) {
    const Tensor& stored = find_tensor(tensors, p.name);
    if (!stored.same_shape(p.tensor)) {
      throw std::runtime_error("segnet: parameter " + p.name + " has shape " +
                               shape_string(stored.shape()) + ", expected " +
                               shape_string(p.tensor.shape()));
    }
    p.tensor = stored;
  }
  return net;
}

BoundSegNet bind(Tape& tape, const SegNet& model, bool trainable) {
  BoundSegNet bound;
  bound.model = &model;
  for (const auto& p : model.parameters()) bound.params.push_back(tape.leaf(p.tensor, trainable));
  return bound;
}

SegNetVars segnet_forward(const BoundSegNet& net, Var x, bool with_embedding) {
  const SegNetConfig& cfg = net.model->config();
  if (x.value().rank() != 3 || x.value().dim(0) != cfg.in_channels) {
    throw std::invalid_argument("segnet: expected input with " + std::to_string(cfg.in_channels) +
                                " channels, got " + shape_string(x.value().shape()));
  }
  const auto& d = cfg.trunk_dilation;
  Var h = ad::relu(conv_layer(net, kTrunk0, x, d[0]));
  h = ad::relu(conv_layer(net, kTrunk1, h, d[1]));
  h = ad::relu(conv_layer(net, kTrunk2, h, d[2]));
  SegNetVars out;
  out.seg_logits = conv_layer(net, kSeg1, ad::relu(conv_layer(net, kSeg0, h)));
  out.seg_probs = ad::sigmoid(out.seg_logits);
  if (with_embedding) {
    Var e = h;
    if (cfg.coord_channels) {
      Tape& tape = *x.tape();
      e = ad::concat_channels(h, tape.constant(coordinate_maps(x.value().dim(1), x.value().dim(2))));
    }
    out.embedding = conv_layer(net, kEmb1, ad::relu(conv_layer(net, kEmb0, e)));
  }
  return out;
}

SegOutput segnet_forward(const SegNet& model, const Tensor& x) {
  Tape tape;
  const BoundSegNet net = bind(tape, model, false);
  const SegNetVars vars = segnet_forward(net, tape.constant(x), true);
  const Tensor& probs = vars.seg_probs.value();
  SegOutput out;
  out.seg_probs = probs.reshaped(Shape{probs.dim(1), probs.dim(2)});
  out.embedding = vars.embedding.value();
  return out;
}

Var segmentation_loss(const SegNetVars& out, const LaneSample& sample,
                      const DiscriminativeParams& disc, double pos_weight) {
  Var seg = ad::sigmoid_cross_entropy(out.seg_logits, sample.seg_gt, pos_weight);
  Var inst = ad::discriminative_loss(out.embedding, sample.inst_gt.ids, disc);
  return ad::add(seg, inst);
}

InstanceMap cluster_instances(const Tensor& seg_probs, const Tensor& embedding,
                              const ClusterParams& params) {
  if (seg_probs.rank() != 2 || embedding.rank() != 3 || embedding.dim(1) != seg_probs.dim(0) ||
      embedding.dim(2) != seg_probs.dim(1)) {
    throw std::invalid_argument("cluster_instances: inconsistent shapes " +
                                shape_string(seg_probs.shape()) + " and " +
                                shape_string(embedding.shape()));
  }
  const std::size_t H = seg_probs.dim(0), W = seg_probs.dim(1), E = embedding.dim(0);
  const std::size_t pixels = H * W;
  InstanceMap map(H, W);
  std::vector<std::size_t> unassigned;
  for (std::size_t i = 0; i < pixels; ++i) {
    if (seg_probs[i] > params.threshold) unassigned.push_back(i);
  }
  const double r2 = params.radius * params.radius;
  auto dist2 = [&](const std::vector<double>& mean, std::size_t i) {
    double s = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      const double d = embedding[e * pixels + i] - mean[e];
      s += d * d;
    }
    return s;
  };
  int next_id = 1;
  std::vector<double> mean(E);
  std::vector<char> member;
  while (!unassigned.empty()) {
    const std::size_t seed = unassigned.front();
    for (std::size_t e = 0; e < E; ++e) mean[e] = embedding[e * pixels + seed];
    member.assign(unassigned.size(), 0);
    for (int round = 0; round < params.max_rounds; ++round) {
      bool changed = false;
      for (std::size_t j = 0; j < unassigned.size(); ++j) {
        const char in = (j == 0 || dist2(mean, unassigned[j]) <= r2) ? 1 : 0;
        changed = changed || in != member[j];
        member[j] = in;
      }
      std::fill(mean.begin(), mean.end(), 0.0);
      std::size_t count = 0;
      for (std::size_t j = 0; j < unassigned.size(); ++j) {
        if (!member[j]) continue;
        ++count;
        for (std::size_t e = 0; e < E; ++e) mean[e] += embedding[e * pixels + unassigned[j]];
      }
      for (double& v : mean) v /= static_cast<double>(count);
      if (!changed) break;
    }
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < unassigned.size(); ++j) {
      if (member[j]) {
        map.ids[unassigned[j]] = next_id;
      } else {
        rest.push_back(unassigned[j]);
      }
    }
    unassigned = std::move(rest);
    ++next_id;
  }
  return map;
}

Prediction predict(const SegNet& model, const Tensor& x, const ClusterParams& params) {
  const SegOutput out = segnet_forward(model, x);
  Prediction pred;
  pred.instances = cluster_instances(out.seg_probs, out.embedding, params);
  return pred;
}

Evaluator make_segnet_evaluator(const SegNet& model, const ClusterParams& params) {
  return [&model, params](std::span<const Tensor> inputs) {
    std::vector<Prediction> out;
    out.reserve(inputs.size());
    for (const auto& x : inputs) out.push_back(predict(model, x, params));
    return out;
  };
}

SegScores score_prediction(const Prediction& pred, const LaneSample& sample) {
  return {f_measure(pred.instances, sample.inst_gt),
          symmetric_best_dice(pred.instances, sample.inst_gt)};
}

void save_model(const std::filesystem::path& path, const SegNet& model) {
  save_tensors(path, model.to_tensors());
}

SegNet load_model(const std::filesystem::path& path) {
  return SegNet::from_tensors(load_tensors(path));
}

}  // namespace plequiv
