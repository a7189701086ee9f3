#pragma once

// Central finite-difference checks for the reverse-mode tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "plequiv/autodiff.hpp"
#include "plequiv/segnet.hpp"
#include "plequiv/stats.hpp"

namespace gradcheck {

using plequiv::CounterRng;
using plequiv::Shape;
using plequiv::Tape;
using plequiv::Tensor;
using plequiv::Var;

struct Case {
  std::string name;
  /// Random inputs; the first `differentiable` are checked, the rest are constants.
  std::function<std::vector<Tensor>(CounterRng&)> inputs;
  std::size_t differentiable = 1;
  std::function<Var(Tape&, const std::vector<Var>&)> loss;
  /// Coordinates checked per instance (0 = all).
  std::size_t max_coords = 0;
};

inline Tensor random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double evaluate(const Case& c, const std::vector<Tensor>& xs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : xs) vars.push_back(tape.constant(x));
  return c.loss(tape, vars).value()[0];
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the checked coordinates.
inline double relative_error(const Case& c, std::uint64_t seed, double h = 1e-5) {
  CounterRng rng(seed, 0x6763, 0);
  std::vector<Tensor> xs = c.inputs(rng);
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < xs.size(); ++i) vars.push_back(tape.leaf(xs[i], i < c.differentiable));
  tape.backward(c.loss(tape, vars));

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < c.differentiable; ++i) {
    for (std::size_t j = 0; j < xs[i].size(); ++j) coords.emplace_back(i, j);
  }
  if (c.max_coords > 0 && coords.size() > c.max_coords) {
    CounterRng pick(seed, 0x7069, 0);
    for (std::size_t k = 0; k < c.max_coords; ++k) {
      const std::size_t r = k + static_cast<std::size_t>(pick.next_u64() % (coords.size() - k));
      std::swap(coords[k], coords[r]);
    }
    coords.resize(c.max_coords);
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (const auto& [i, j] : coords) {
    const double analytic = vars[i].grad()[j];
    const double saved = xs[i][j];
    xs[i][j] = saved + h;
    const double up = evaluate(c, xs);
    xs[i][j] = saved - h;
    const double down = evaluate(c, xs);
    xs[i][j] = saved;
    const double numeric = (up - down) / (2.0 * h);
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
  }
  const double scale = std::sqrt(std::max(a2, n2));
  if (scale < 1e-10) return std::sqrt(diff2);
  return std::sqrt(diff2) / scale;
}

// Reduces any output to a scalar with fixed random weights (the last input).
inline Var project(Var out, Var weights) { return plequiv::ad::sum(plequiv::ad::mul(out, weights)); }

inline std::vector<Case> primitive_cases() {
  namespace ad = plequiv::ad;
  std::vector<Case> cases;
  auto unary = [&](std::string name, Shape s, std::function<Var(Var)> f, double lo = -1.0,
                   double hi = 1.0) {
    cases.push_back({name,
                     [s, lo, hi](CounterRng& r) {
                       return std::vector<Tensor>{random_tensor(r, s, lo, hi), random_tensor(r, s)};
                     },
                     1, [f](Tape&, const std::vector<Var>& v) { return project(f(v[0]), v[1]); }});
  };
  auto binary = [&](std::string name, std::function<Var(Var, Var)> f) {
    cases.push_back({name,
                     [](CounterRng& r) {
                       return std::vector<Tensor>{random_tensor(r, {3, 4}), random_tensor(r, {3, 4}),
                                                  random_tensor(r, {3, 4})};
                     },
                     2, [f](Tape&, const std::vector<Var>& v) { return project(f(v[0], v[1]), v[2]); }});
  };
  binary("add", ad::add);
  binary("sub", ad::sub);
  binary("mul", ad::mul);
  unary("scale", {4, 3}, [](Var a) { return ad::scale(a, -1.7); });
  unary("add_scalar", {4, 3}, [](Var a) { return ad::add_scalar(a, 0.3); });
  auto reduction = [&](std::string name, std::function<Var(Var)> f) {
    cases.push_back({name,
                     [](CounterRng& r) { return std::vector<Tensor>{random_tensor(r, {2, 3, 4})}; },
                     1, [f](Tape&, const std::vector<Var>& v) {
                       return ad::mul(f(ad::mul(v[0], v[0])), f(v[0]));
                     }});
  };
  reduction("sum", ad::sum);
  reduction("mean", ad::mean);
  unary("relu", {3, 5}, ad::relu);
  unary("sigmoid", {3, 5}, ad::sigmoid, -4.0, 4.0);
  unary("tanh", {3, 5}, ad::tanh, -3.0, 3.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    unary("softmax axis " + std::to_string(axis), {3, 4, 5},
          [axis](Var a) { return ad::softmax(a, axis); }, -3.0, 3.0);
  }
  cases.push_back({"concat_channels",
                   [](CounterRng& r) {
                     return std::vector<Tensor>{random_tensor(r, {2, 3, 4}), random_tensor(r, {3, 3, 4}),
                                                random_tensor(r, {5, 3, 4})};
                   },
                   2, [](Tape&, const std::vector<Var>& v) {
                     return project(ad::concat_channels(v[0], v[1]), v[2]);
                   }});
  cases.push_back({"affine",
                   [](CounterRng& r) {
                     return std::vector<Tensor>{random_tensor(r, {5}), random_tensor(r, {3, 5}),
                                                random_tensor(r, {3}), random_tensor(r, {3})};
                   },
                   3, [](Tape&, const std::vector<Var>& v) {
                     return project(ad::affine(v[0], v[1], v[2]), v[3]);
                   }});
  struct ConvShape {
    std::size_t stride, pad, dilation, out_h, out_w;
  };
  // Input 2 x 7 x 8, kernel 3 x 2 x 3 x 3.
  for (ConvShape cs : {ConvShape{1, 1, 1, 7, 8}, ConvShape{2, 1, 1, 4, 4}, ConvShape{1, 0, 1, 5, 6},
                       ConvShape{1, 2, 2, 7, 8}, ConvShape{1, 4, 4, 7, 8}}) {
    cases.push_back({"conv2d stride " + std::to_string(cs.stride) + " pad " +
                         std::to_string(cs.pad) + " dilation " + std::to_string(cs.dilation),
                     [cs](CounterRng& r) {
                       return std::vector<Tensor>{random_tensor(r, {2, 7, 8}),
                                                  random_tensor(r, {3, 2, 3, 3}), random_tensor(r, {3}),
                                                  random_tensor(r, {3, cs.out_h, cs.out_w})};
                     },
                     3, [cs](Tape&, const std::vector<Var>& v) {
                       return project(ad::conv2d(v[0], v[1], v[2], cs.stride, cs.pad, cs.dilation), v[3]);
                     }});
  }
  cases.push_back({"cross_entropy",
                   [](CounterRng& r) { return std::vector<Tensor>{random_tensor(r, {4, 6}, -3, 3)}; },
                   1, [](Tape&, const std::vector<Var>& v) {
                     static const int targets[] = {0, 3, 2, 1, 3, 0};
                     return ad::cross_entropy(v[0], targets);
                   }});
  cases.push_back({"cross_entropy rank 1",
                   [](CounterRng& r) { return std::vector<Tensor>{random_tensor(r, {5}, -3, 3)}; },
                   1, [](Tape&, const std::vector<Var>& v) {
                     static const int target[] = {2};
                     return ad::cross_entropy(v[0], target);
                   }});
  for (double w : {1.0, 5.0}) {
    cases.push_back({"sigmoid_cross_entropy pos_weight " + std::to_string(static_cast<int>(w)),
                     [](CounterRng& r) {
                       Tensor t = random_tensor(r, {5, 6});
                       for (double& v : t.data()) v = v > 0.2 ? 1.0 : 0.0;
                       return std::vector<Tensor>{random_tensor(r, {5, 6}, -4, 4), t};
                     },
                     1, [w](Tape&, const std::vector<Var>& v) {
                       return ad::sigmoid_cross_entropy(v[0], v[1].value(), w);
                     }});
  }
  cases.push_back({"kl_div",
                   [](CounterRng& r) {
                     return std::vector<Tensor>{random_tensor(r, {3, 5}, -2, 2),
                                                random_tensor(r, {3, 5}, -2, 2)};
                   },
                   2, [](Tape&, const std::vector<Var>& v) {
                     return ad::kl_div(ad::softmax(v[0], 0), ad::softmax(v[1], 0));
                   }});
  cases.push_back({"binary_kl_div",
                   [](CounterRng& r) {
                     return std::vector<Tensor>{random_tensor(r, {4, 5}, -3, 3),
                                                random_tensor(r, {4, 5}, -3, 3)};
                   },
                   2, [](Tape&, const std::vector<Var>& v) {
                     return ad::binary_kl_div(ad::sigmoid(v[0]), ad::sigmoid(v[1]));
                   }});
  cases.push_back({"discriminative_loss",
                   [](CounterRng& r) {
                     Tensor ids(Shape{5, 6});
                     for (double& v : ids.data()) v = static_cast<double>(r.next_u64() % 4);
                     return std::vector<Tensor>{random_tensor(r, {3, 5, 6}, -2, 2), ids};
                   },
                   1, [](Tape&, const std::vector<Var>& v) {
                     std::vector<int> ids;
                     for (double d : v[1].value().data()) ids.push_back(static_cast<int>(d));
                     plequiv::DiscriminativeParams p;
                     p.delta_v = 0.3;
                     p.delta_d = 2.0;
                     return ad::discriminative_loss(v[0], ids, p);
                   }});
  return cases;
}

/// Full network on a tiny image: input and every parameter are checked
/// (a random subset of coordinates per instance).
inline Case network_case() {
  plequiv::SegNetConfig cfg;
  cfg.trunk_width = 4;
  cfg.head_width = 4;
  cfg.embed_dim = 3;
  const plequiv::SegNet shape_source(cfg);
  const std::size_t n_params = shape_source.parameters().size();
  Case c;
  c.name = "segnet training loss";
  c.differentiable = 1 + n_params;
  c.max_coords = 60;
  c.inputs = [cfg](CounterRng& r) {
    std::vector<Tensor> xs{random_tensor(r, {3, 8, 10})};
    const plequiv::SegNet net = plequiv::SegNet::initialized(cfg, r.next_u64());
    for (const auto& p : net.parameters()) {
      Tensor t = p.tensor;
      for (double& v : t.data()) v += r.uniform(-0.1, 0.1);
      xs.push_back(std::move(t));
    }
    return xs;
  };
  c.loss = [cfg, n_params](Tape&, const std::vector<Var>& v) {
    static const plequiv::SegNet model(cfg);
    plequiv::BoundSegNet net;
    net.model = &model;
    net.params.assign(v.begin() + 1, v.begin() + 1 + static_cast<std::ptrdiff_t>(n_params));
    plequiv::LaneSample sample;
    sample.inst_gt = plequiv::InstanceMap(8, 10);
    sample.seg_gt = Tensor(Shape{8, 10});
    for (std::size_t y = 0; y < 8; ++y) {
      sample.inst_gt.at(y, 2) = sample.inst_gt.at(y, 3) = 1;
      sample.inst_gt.at(y, 7) = 2;
      sample.seg_gt.at(y, 2) = sample.seg_gt.at(y, 3) = sample.seg_gt.at(y, 7) = 1.0;
    }
    const auto out = plequiv::segnet_forward(net, v[0], true);
    return plequiv::segmentation_loss(out, sample, {});
  };
  return c;
}

}  // namespace gradcheck
