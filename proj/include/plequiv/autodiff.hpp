#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "plequiv/tensor.hpp"

namespace plequiv {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  /// Gradient after Tape::backward. All-zero for nodes the loss does not reach.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the record is
/// already topologically sorted; backward walks it once in reverse.
/// A tape is single-threaded.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape& tape, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. `backward` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws unless loss is a scalar.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Tensor grad(std::size_t id) const;
  /// Gradient buffer of `id`, allocated (zeroed) on first use.
  Tensor& grad_buffer(std::size_t id);
  std::size_t size() const { return nodes_.size(); }

  /// Process-wide count of backward() calls; used to audit training cost.
  static std::uint64_t backward_calls();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Hyperparameters of the discriminative embedding loss.
struct DiscriminativeParams {
  double delta_v = 0.5;
  double delta_d = 1.5;
  double weight_var = 1.0;
  double weight_dist = 1.0;
  double weight_reg = 0.001;
};

namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// Stacks C1 x H x W and C2 x H x W into (C1 + C2) x H x W.
Var concat_channels(Var a, Var b);
/// a + c for a scalar constant c.
Var add_scalar(Var a, double c);
Var sum(Var a);
Var mean(Var a);

/// W (out x in) times x (in) plus b (out).
Var affine(Var x, Var weight, Var bias);
/// x: C x H x W, kernel: O x C x kh x kw, bias: O. Zero padding. Dilation > 1
/// requires stride 1.
Var conv2d(Var x, Var kernel, Var bias, std::size_t stride = 1, std::size_t pad = 0,
           std::size_t dilation = 1);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
/// Softmax along `axis` (tensors of rank <= 3).
Var softmax(Var x, std::size_t axis);

/// Softmax cross-entropy. logits: K x P (P positions; rank-1 logits mean P = 1),
/// targets: one class index per position. Mean over positions.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Binary cross-entropy with logits, targets in {0, 1} of the logits' shape.
/// Positive-target terms are scaled by pos_weight. Mean over all elements.
Var sigmoid_cross_entropy(Var logits, const Tensor& targets, double pos_weight = 1.0);

/// KL(p || q) with distributions along axis 0, summed over all positions.
/// Probabilities are clamped to [1e-12, 1 - 1e-12] before logs.
Var kl_div(Var p, Var q);
/// Sum over pixels of the Bernoulli KL between probability maps p and q.
Var binary_kl_div(Var p, Var q);

/// Hinged variance / distance / regularization embedding loss.
/// embedding: E x H x W; instances: H*W ids (0 = background, ignored).
/// Returns 0 when no instance pixel exists.
Var discriminative_loss(Var embedding, std::span<const int> instances,
                        const DiscriminativeParams& params);

}  // namespace ad

/// Scalar loss built on a fresh tape from the input variable.
using InputLoss = std::function<Var(Tape& tape, Var x)>;

/// d loss / d x at x, with everything but x held constant. Writes the loss
/// value to `loss_value` when non-null.
Tensor grad_wrt_input(const InputLoss& loss_fn, const Tensor& x, double* loss_value = nullptr);

/// Forward value of discriminative_loss split into its three unweighted terms.
struct DiscriminativeTerms {
  double variance = 0.0;
  double distance = 0.0;
  double regularization = 0.0;
};
DiscriminativeTerms discriminative_terms(const Tensor& embedding, std::span<const int> instances,
                                         const DiscriminativeParams& params);

}  // namespace plequiv
