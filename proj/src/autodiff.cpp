#include "plequiv/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace plequiv {
namespace {

std::atomic<std::uint64_t> g_backward_calls{0};

constexpr double kProbFloor = 1e-12;
constexpr double kProbCeil = 1.0 - 1e-12;

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape();
}

Tape& tape_of(Var a, const char* op) {
  if (a.tape() == nullptr) throw std::invalid_argument(std::string(op) + ": unbound variable");
  return *a.tape();
}

void accumulate(Tape& tape, std::size_t id, const Tensor& delta) {
  if (!tape.requires_grad(id)) return;
  auto g = tape.grad_buffer(id).data();
  auto d = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
}

// Dot product with four independent accumulators; fixed order keeps it deterministic.
double dot(const double* a, const double* b, std::ptrdiff_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::ptrdiff_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

struct ConvGeometry {
  std::ptrdiff_t channels, height, width;
  std::ptrdiff_t out_channels, kh, kw;
  std::ptrdiff_t stride, pad, dilation;
  std::ptrdiff_t out_h, out_w;

  // Output column range [lo, hi) whose input column ox*stride + kx - pad is in range.
  std::pair<std::ptrdiff_t, std::ptrdiff_t> col_range(std::ptrdiff_t kx) const {
    return axis_range(kx, width, out_w);
  }
  std::pair<std::ptrdiff_t, std::ptrdiff_t> row_range(std::ptrdiff_t ky) const {
    return axis_range(ky, height, out_h);
  }

 private:
  std::pair<std::ptrdiff_t, std::ptrdiff_t> axis_range(std::ptrdiff_t k, std::ptrdiff_t in,
                                                       std::ptrdiff_t out) const {
    std::ptrdiff_t lo = 0;
    if (k < pad) lo = (pad - k + stride - 1) / stride;
    const std::ptrdiff_t last = in - 1 + pad - k;
    std::ptrdiff_t hi = last < 0 ? 0 : last / stride + 1;
    hi = std::min(hi, out);
    return {lo, std::max(lo, hi)};
  }
};

void conv_forward(const ConvGeometry& g, const double* x, const double* k, const double* b,
                  double* out) {
  const std::ptrdiff_t plane = g.out_h * g.out_w;
  for (std::ptrdiff_t o = 0; o < g.out_channels; ++o) {
    double* op = out + o * plane;
    std::fill(op, op + plane, b[o]);
    for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
      const double* xp = x + c * g.height * g.width;
      for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
        const auto [ylo, yhi] = g.row_range(ky);
        for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
          const double w = k[((o * g.channels + c) * g.kh + ky) * g.kw + kx];
          const auto [xlo, xhi] = g.col_range(kx);
          for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
            const double* xr = xp + (oy * g.stride + ky - g.pad) * g.width;
            double* orow = op + oy * g.out_w;
            if (g.stride == 1) {
              const double* src = xr + kx - g.pad;
              for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) orow[ox] += w * src[ox];
            } else {
              for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) {
                orow[ox] += w * xr[ox * g.stride + kx - g.pad];
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward(const ConvGeometry& g, const double* x, const double* k, const double* gout,
                   double* gx, double* gk, double* gb) {
  const std::ptrdiff_t plane = g.out_h * g.out_w;
  for (std::ptrdiff_t o = 0; o < g.out_channels; ++o) {
    const double* gp = gout + o * plane;
    if (gb != nullptr) {
      double s = 0.0;
      for (std::ptrdiff_t i = 0; i < plane; ++i) s += gp[i];
      gb[o] += s;
    }
    for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
      const double* xp = x + c * g.height * g.width;
      double* gxp = gx != nullptr ? gx + c * g.height * g.width : nullptr;
      for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
        const auto [ylo, yhi] = g.row_range(ky);
        for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
          const std::ptrdiff_t widx = ((o * g.channels + c) * g.kh + ky) * g.kw + kx;
          const double w = k[widx];
          const auto [xlo, xhi] = g.col_range(kx);
          double acc = 0.0;
          for (std::ptrdiff_t oy = ylo; oy < yhi; ++oy) {
            const std::ptrdiff_t iy = oy * g.stride + ky - g.pad;
            const double* grow = gp + oy * g.out_w;
            if (g.stride == 1) {
              const std::ptrdiff_t shift = kx - g.pad;
              if (gk != nullptr) acc += dot(grow + xlo, xp + iy * g.width + xlo + shift, xhi - xlo);
              if (gxp != nullptr) {
                double* dst = gxp + iy * g.width + shift;
                for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) dst[ox] += w * grow[ox];
              }
            } else {
              for (std::ptrdiff_t ox = xlo; ox < xhi; ++ox) {
                const std::ptrdiff_t ix = ox * g.stride + kx - g.pad;
                if (gk != nullptr) acc += grow[ox] * xp[iy * g.width + ix];
                if (gxp != nullptr) gxp[iy * g.width + ix] += w * grow[ox];
              }
            }
          }
          if (gk != nullptr) gk[widx] += acc;
        }
      }
    }
  }
}

// Stride-1 kernels work on a zero-padded copy of the input and keep outputs in
// rows of the padded width, so each tap is a single contiguous axpy. The extra
// columns per row hold junk and are dropped.
struct WideLayout {
  std::ptrdiff_t hp, wp, len;
};

WideLayout wide_layout(const ConvGeometry& g) {
  const std::ptrdiff_t hp = g.height + 2 * g.pad, wp = g.width + 2 * g.pad;
  return {hp, wp, (g.out_h - 1) * wp + g.out_w};
}

std::vector<double> padded_input(const ConvGeometry& g, const WideLayout& w, const double* x) {
  std::vector<double> xp(static_cast<std::size_t>(g.channels * w.hp * w.wp), 0.0);
  for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
    for (std::ptrdiff_t y = 0; y < g.height; ++y) {
      const double* src = x + (c * g.height + y) * g.width;
      std::copy(src, src + g.width, xp.data() + (c * w.hp + y + g.pad) * w.wp + g.pad);
    }
  }
  return xp;
}

// dst[i] += sum_t w[t] * src[off[t] + i], taps accumulated in order.
template <int Taps>
void fused_taps(double* __restrict dst, const double* __restrict src, const double* w,
                const std::ptrdiff_t* off, std::ptrdiff_t len) {
  for (std::ptrdiff_t i = 0; i < len; ++i) {
    double acc = dst[i];
    for (int t = 0; t < Taps; ++t) acc += w[t] * src[off[t] + i];
    dst[i] = acc;
  }
}

void apply_taps(double* dst, const double* src, const double* w, const std::ptrdiff_t* off,
                std::ptrdiff_t taps, std::ptrdiff_t len) {
  switch (taps) {
    case 1: fused_taps<1>(dst, src, w, off, len); return;
    case 9: fused_taps<9>(dst, src, w, off, len); return;
    default:
      for (std::ptrdiff_t t = 0; t < taps; ++t) fused_taps<1>(dst, src, w + t, off + t, len);
  }
}

void conv_forward_wide(const ConvGeometry& g, const double* x, const double* k, const double* b,
                       double* out) {
  const WideLayout lay = wide_layout(g);
  const std::vector<double> xp = padded_input(g, lay, x);
  const std::ptrdiff_t taps = g.kh * g.kw;
  std::vector<std::ptrdiff_t> off;
  for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
    for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
      off.push_back((ky * lay.wp + kx) * g.dilation);
    }
  }
  std::vector<double> wide(static_cast<std::size_t>(lay.len));
  for (std::ptrdiff_t o = 0; o < g.out_channels; ++o) {
    std::fill(wide.begin(), wide.end(), b[o]);
    for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
      apply_taps(wide.data(), xp.data() + c * lay.hp * lay.wp, k + (o * g.channels + c) * taps,
                 off.data(), taps, lay.len);
    }
    double* op = out + o * g.out_h * g.out_w;
    for (std::ptrdiff_t oy = 0; oy < g.out_h; ++oy) {
      std::copy(wide.data() + oy * lay.wp, wide.data() + oy * lay.wp + g.out_w, op + oy * g.out_w);
    }
  }
}

void conv_backward_wide(const ConvGeometry& g, const double* x, const double* k,
                        const double* gout, double* gx, double* gk, double* gb) {
  const WideLayout lay = wide_layout(g);
  const std::vector<double> xp = padded_input(g, lay, x);
  const std::ptrdiff_t taps = g.kh * g.kw;
  const std::ptrdiff_t padded_plane = lay.hp * lay.wp;
  // Input gradient as a correlation with the flipped kernel: gw is stored with
  // a zero margin of `reach` on both sides so every tap reads in bounds.
  const std::ptrdiff_t reach = ((g.kh - 1) * lay.wp + (g.kw - 1)) * g.dilation;
  std::vector<std::ptrdiff_t> flipped;
  for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
    for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
      flipped.push_back(reach - (ky * lay.wp + kx) * g.dilation);
    }
  }
  std::vector<double> gxp(gx != nullptr ? xp.size() : 0, 0.0);
  std::vector<double> gw(static_cast<std::size_t>(padded_plane + 2 * reach), 0.0);
  double* gwc = gw.data() + reach;
  std::vector<double> wt(static_cast<std::size_t>(taps));
  const std::ptrdiff_t plane = g.out_h * g.out_w;
  for (std::ptrdiff_t o = 0; o < g.out_channels; ++o) {
    const double* gp = gout + o * plane;
    if (gb != nullptr) {
      double s = 0.0;
      for (std::ptrdiff_t i = 0; i < plane; ++i) s += gp[i];
      gb[o] += s;
    }
    for (std::ptrdiff_t oy = 0; oy < g.out_h; ++oy) {
      std::copy(gp + oy * g.out_w, gp + (oy + 1) * g.out_w, gwc + oy * lay.wp);
    }
    for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
      const double* kc = k + (o * g.channels + c) * taps;
      if (gk != nullptr) {
        for (std::ptrdiff_t ky = 0; ky < g.kh; ++ky) {
          for (std::ptrdiff_t kx = 0; kx < g.kw; ++kx) {
            const std::ptrdiff_t off = c * lay.hp * lay.wp + (ky * lay.wp + kx) * g.dilation;
            gk[(o * g.channels + c) * taps + ky * g.kw + kx] +=
                dot(gwc, xp.data() + off, lay.len);
          }
        }
      }
      if (gx != nullptr) {
        for (std::ptrdiff_t t = 0; t < taps; ++t) wt[static_cast<std::size_t>(t)] = kc[t];
        apply_taps(gxp.data() + c * padded_plane, gw.data(), wt.data(), flipped.data(), taps,
                   padded_plane);
      }
    }
  }
  if (gx == nullptr) return;
  for (std::ptrdiff_t c = 0; c < g.channels; ++c) {
    for (std::ptrdiff_t y = 0; y < g.height; ++y) {
      const double* src = gxp.data() + (c * lay.hp + y + g.pad) * lay.wp + g.pad;
      double* dst = gx + (c * g.height + y) * g.width;
      for (std::ptrdiff_t i = 0; i < g.width; ++i) dst[i] += src[i];
    }
  }
}

void check_probability_range(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!(v >= -1e-9 && v <= 1.0 + 1e-9)) {
      throw std::invalid_argument(std::string(op) + ": value " + std::to_string(v) +
                                  " is not a probability");
    }
  }
}

double clamp_prob(double v) { return std::clamp(v, kProbFloor, kProbCeil); }
double in_range(double v) { return (v >= kProbFloor && v <= kProbCeil) ? 1.0 : 0.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
Tensor Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](std::size_t p) { return nodes_[p].requires_grad; });
  if (node.requires_grad) {
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor Tape::grad(std::size_t id) const {
  const Node& node = nodes_.at(id);
  if (node.grad.empty() && !node.value.empty()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (value(loss.id()).size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_string(value(loss.id()).shape()));
  }
  if (backward_done_) throw std::logic_error("backward: tape has already been consumed");
  backward_done_ = true;
  ++g_backward_calls;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, i);
  }
}

std::uint64_t Tape::backward_calls() { return g_backward_calls.load(); }

// ---------------------------------------------------------------------------
// Ops

namespace ad {

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor g = tp.grad_buffer(self);
    accumulate(tp, ia, g);
    accumulate(tp, ib, g);
  });
}

Var concat_channels(Var a, Var b) {
  Tape& t = same_tape(a, b, "concat_channels");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_string(av.shape()) +
                                " and " + shape_string(bv.shape()));
  }
  Tensor out(Shape{av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data().begin(), av.data().end(), out.data().begin());
  std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t ia = a.id(), ib = b.id(), na = av.size();
  return t.record(std::move(out), {ia, ib}, [ia, ib, na](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_buffer(ia).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = difference(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    Tensor g = tp.grad_buffer(self);
    accumulate(tp, ia, g);
    for (double& v : g.data()) v = -v;
    accumulate(tp, ib, g);
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_buffer(ia).data();
      auto bv2 = tp.value(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib).data();
      auto av = tp.value(ia).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a, "scale");
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, factor](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    auto ga = tp.grad_buffer(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a, "add_scalar");
  Tensor out = a.value();
  for (double& v : out.data()) v += c;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    accumulate(tp, ia, tp.grad_buffer(self));
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a, "sum");
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(plequiv::sum(a.value())), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    for (double& v : tp.grad_buffer(ia).data()) v += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var affine(Var x, Var weight, Var bias) {
  Tape& t = same_tape(x, weight, "affine");
  same_tape(x, bias, "affine");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 1 || wv.rank() != 2 || bv.rank() != 1 || wv.dim(1) != xv.dim(0) ||
      wv.dim(0) != bv.dim(0)) {
    throw std::invalid_argument("affine: incompatible shapes x" + shape_string(xv.shape()) +
                                " W" + shape_string(wv.shape()) + " b" +
                                shape_string(bv.shape()));
  }
  const std::size_t out_dim = wv.dim(0), in_dim = wv.dim(1);
  Tensor out = bv;
  for (std::size_t o = 0; o < out_dim; ++o) {
    out[o] += dot(wv.data().data() + o * in_dim, xv.data().data(),
                  static_cast<std::ptrdiff_t>(in_dim));
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return t.record(std::move(out), {ix, iw, ib},
                  [ix, iw, ib, out_dim, in_dim](Tape& tp, std::size_t self) {
                    const auto g = tp.grad_buffer(self).data();
                    const auto xd = tp.value(ix).data();
                    const auto wd = tp.value(iw).data();
                    if (tp.requires_grad(ix)) {
                      auto gx = tp.grad_buffer(ix).data();
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        for (std::size_t i = 0; i < in_dim; ++i) gx[i] += wd[o * in_dim + i] * g[o];
                      }
                    }
                    if (tp.requires_grad(iw)) {
                      auto gw = tp.grad_buffer(iw).data();
                      for (std::size_t o = 0; o < out_dim; ++o) {
                        for (std::size_t i = 0; i < in_dim; ++i) gw[o * in_dim + i] += g[o] * xd[i];
                      }
                    }
                    if (tp.requires_grad(ib)) {
                      auto gb = tp.grad_buffer(ib).data();
                      for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[o];
                    }
                  });
}

Var conv2d(Var x, Var kernel, Var bias, std::size_t stride, std::size_t pad,
           std::size_t dilation) {
  Tape& t = same_tape(x, kernel, "conv2d");
  same_tape(x, bias, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || kv.rank() != 4 || bv.rank() != 1 || kv.dim(1) != xv.dim(0) ||
      kv.dim(0) != bv.dim(0) || stride == 0 || dilation == 0 || (stride != 1 && dilation != 1)) {
    throw std::invalid_argument("conv2d: incompatible shapes x" + shape_string(xv.shape()) +
                                " K" + shape_string(kv.shape()) + " b" +
                                shape_string(bv.shape()));
  }
  ConvGeometry g{};
  g.channels = static_cast<std::ptrdiff_t>(xv.dim(0));
  g.height = static_cast<std::ptrdiff_t>(xv.dim(1));
  g.width = static_cast<std::ptrdiff_t>(xv.dim(2));
  g.out_channels = static_cast<std::ptrdiff_t>(kv.dim(0));
  g.kh = static_cast<std::ptrdiff_t>(kv.dim(2));
  g.kw = static_cast<std::ptrdiff_t>(kv.dim(3));
  g.stride = static_cast<std::ptrdiff_t>(stride);
  g.pad = static_cast<std::ptrdiff_t>(pad);
  g.dilation = static_cast<std::ptrdiff_t>(dilation);
  const std::ptrdiff_t span_h = g.dilation * (g.kh - 1) + 1, span_w = g.dilation * (g.kw - 1) + 1;
  if (g.height + 2 * g.pad < span_h || g.width + 2 * g.pad < span_w) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * g.pad - span_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.pad - span_w) / g.stride + 1;
  Tensor out(Shape{kv.dim(0), static_cast<std::size_t>(g.out_h), static_cast<std::size_t>(g.out_w)});
  if (g.stride == 1) {
    conv_forward_wide(g, xv.data().data(), kv.data().data(), bv.data().data(), out.data().data());
  } else {
    conv_forward(g, xv.data().data(), kv.data().data(), bv.data().data(), out.data().data());
  }
  const std::size_t ix = x.id(), ik = kernel.id(), ib = bias.id();
  return t.record(std::move(out), {ix, ik, ib}, [g, ix, ik, ib](Tape& tp, std::size_t self) {
    double* gx = tp.requires_grad(ix) ? tp.grad_buffer(ix).data().data() : nullptr;
    double* gk = tp.requires_grad(ik) ? tp.grad_buffer(ik).data().data() : nullptr;
    double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).data().data() : nullptr;
    const auto backward = g.stride == 1 ? conv_backward_wide : conv_backward;
    backward(g, tp.value(ix).data().data(), tp.value(ik).data().data(),
             tp.grad_buffer(self).data().data(), gx, gk, gb);
  });
}

Var relu(Var x) {
  Tape& t = tape_of(x, "relu");
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    const auto xv = tp.value(ix).data();
    auto gx = tp.grad_buffer(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0.0 ? g[i] : 0.0;
  });
}

Var sigmoid(Var x) {
  Tape& t = tape_of(x, "sigmoid");
  Tensor out = x.value();
  for (double& v : out.data()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    const auto y = tp.value(self).data();
    auto gx = tp.grad_buffer(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var tanh(Var x) {
  Tape& t = tape_of(x, "tanh");
  Tensor out = x.value();
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    const auto y = tp.value(self).data();
    auto gx = tp.grad_buffer(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var softmax(Var x, std::size_t axis) {
  Tape& t = tape_of(x, "softmax");
  const Shape& shape = x.value().shape();
  if (axis >= shape.size()) throw std::invalid_argument("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  Tensor out = x.value();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * n * inner + b;
      double mx = o[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, o[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        double& v = o[base + k * inner];
        v = std::exp(v - mx);
        s += v;
      }
      for (std::size_t k = 0; k < n; ++k) o[base + k * inner] /= s;
    }
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix}, [ix, outer, inner, n](Tape& tp, std::size_t self) {
    const auto g = tp.grad_buffer(self).data();
    const auto y = tp.value(self).data();
    auto gx = tp.grad_buffer(ix).data();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t b = 0; b < inner; ++b) {
        const std::size_t base = a * n * inner + b;
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (g[i] - s);
        }
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = tape_of(logits, "cross_entropy");
  const Tensor& z = logits.value();
  if (z.rank() == 0 || z.size() == 0) throw std::invalid_argument("cross_entropy: empty logits");
  const std::size_t classes = z.dim(0);
  const std::size_t positions = z.size() / classes;
  if (targets.size() != positions) {
    throw std::invalid_argument("cross_entropy: expected " + std::to_string(positions) +
                                " targets, got " + std::to_string(targets.size()));
  }
  Tensor probs(Shape{classes, positions});
  double loss = 0.0;
  for (std::size_t p = 0; p < positions; ++p) {
    const int target = targets[p];
    if (target < 0 || static_cast<std::size_t>(target) >= classes) {
      throw std::invalid_argument("cross_entropy: target class out of range");
    }
    double mx = z[p];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, z[k * positions + p]);
    double s = 0.0;
    for (std::size_t k = 0; k < classes; ++k) s += std::exp(z[k * positions + p] - mx);
    const double lse = mx + std::log(s);
    loss += lse - z[static_cast<std::size_t>(target) * positions + p];
    for (std::size_t k = 0; k < classes; ++k) {
      probs.at(k, p) = std::exp(z[k * positions + p] - lse);
    }
  }
  loss /= static_cast<double>(positions);
  std::vector<int> tcopy(targets.begin(), targets.end());
  const std::size_t iz = logits.id();
  return t.record(Tensor::scalar(loss), {iz},
                  [iz, probs = std::move(probs), tcopy = std::move(tcopy), classes,
                   positions](Tape& tp, std::size_t self) {
                    const double g = tp.grad_buffer(self)[0] / static_cast<double>(positions);
                    auto gz = tp.grad_buffer(iz).data();
                    for (std::size_t p = 0; p < positions; ++p) {
                      for (std::size_t k = 0; k < classes; ++k) {
                        const double onehot = static_cast<int>(k) == tcopy[p] ? 1.0 : 0.0;
                        gz[k * positions + p] += g * (probs.at(k, p) - onehot);
                      }
                    }
                  });
}

Var sigmoid_cross_entropy(Var logits, const Tensor& targets, double pos_weight) {
  Tape& t = tape_of(logits, "sigmoid_cross_entropy");
  if (!(pos_weight > 0.0) || !std::isfinite(pos_weight)) {
    throw std::invalid_argument("sigmoid_cross_entropy: pos_weight must be positive");
  }
  const Tensor& z = logits.value();
  if (z.size() != targets.size()) {
    throw std::invalid_argument("sigmoid_cross_entropy: shape mismatch " +
                                shape_string(z.shape()) + " vs " + shape_string(targets.shape()));
  }
  if (z.size() == 0) throw std::invalid_argument("sigmoid_cross_entropy: empty input");
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    const double w = targets[i] > 0.5 ? pos_weight : 1.0;
    loss += w * (std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v))));
  }
  const double n = static_cast<double>(z.size());
  const std::size_t iz = logits.id();
  return t.record(Tensor::scalar(loss / n), {iz}, [iz, targets, n, pos_weight](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0] / n;
    const auto zv = tp.value(iz).data();
    auto gz = tp.grad_buffer(iz).data();
    for (std::size_t i = 0; i < zv.size(); ++i) {
      const double v = zv[i];
      const double p = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      gz[i] += g * (targets[i] > 0.5 ? pos_weight : 1.0) * (p - targets[i]);
    }
  });
}

Var kl_div(Var p, Var q) {
  Tape& t = same_tape(p, q, "kl_div");
  require_same_shape(p.value(), q.value(), "kl_div");
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  if (pv.rank() == 0 || pv.size() == 0) throw std::invalid_argument("kl_div: empty input");
  check_probability_range(pv, "kl_div");
  check_probability_range(qv, "kl_div");
  const std::size_t classes = pv.dim(0);
  const std::size_t positions = pv.size() / classes;
  for (std::size_t i = 0; i < positions; ++i) {
    double sp = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      sp += pv[k * positions + i];
      sq += qv[k * positions + i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
      throw std::invalid_argument("kl_div: operands are not distributions along axis 0");
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double pc = clamp_prob(pv[i]);
    loss += pv[i] * (std::log(pc) - std::log(clamp_prob(qv[i])));
  }
  const std::size_t ip = p.id(), iq = q.id();
  return t.record(Tensor::scalar(loss), {ip, iq}, [ip, iq](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    const auto pd = tp.value(ip).data();
    const auto qd = tp.value(iq).data();
    if (tp.requires_grad(ip)) {
      auto gp = tp.grad_buffer(ip).data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double pc = clamp_prob(pd[i]);
        gp[i] += g * (std::log(pc) - std::log(clamp_prob(qd[i])) + pd[i] / pc * in_range(pd[i]));
      }
    }
    if (tp.requires_grad(iq)) {
      auto gq = tp.grad_buffer(iq).data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        gq[i] -= g * pd[i] / clamp_prob(qd[i]) * in_range(qd[i]);
      }
    }
  });
}

Var binary_kl_div(Var p, Var q) {
  Tape& t = same_tape(p, q, "binary_kl_div");
  require_same_shape(p.value(), q.value(), "binary_kl_div");
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  check_probability_range(pv, "binary_kl_div");
  check_probability_range(qv, "binary_kl_div");
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double a = pv[i], b = qv[i];
    loss += a * (std::log(clamp_prob(a)) - std::log(clamp_prob(b))) +
            (1.0 - a) * (std::log(clamp_prob(1.0 - a)) - std::log(clamp_prob(1.0 - b)));
  }
  const std::size_t ip = p.id(), iq = q.id();
  return t.record(Tensor::scalar(loss), {ip, iq}, [ip, iq](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    const auto pd = tp.value(ip).data();
    const auto qd = tp.value(iq).data();
    if (tp.requires_grad(ip)) {
      auto gp = tp.grad_buffer(ip).data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double a = pd[i], b = qd[i];
        const double pos = std::log(clamp_prob(a)) - std::log(clamp_prob(b)) +
                           a / clamp_prob(a) * in_range(a);
        const double neg = std::log(clamp_prob(1.0 - a)) - std::log(clamp_prob(1.0 - b)) +
                           (1.0 - a) / clamp_prob(1.0 - a) * in_range(1.0 - a);
        gp[i] += g * (pos - neg);
      }
    }
    if (tp.requires_grad(iq)) {
      auto gq = tp.grad_buffer(iq).data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const double a = pd[i], b = qd[i];
        gq[i] += g * (-a / clamp_prob(b) * in_range(b) +
                      (1.0 - a) / clamp_prob(1.0 - b) * in_range(1.0 - b));
      }
    }
  });
}

}  // namespace ad

Tensor grad_wrt_input(const InputLoss& loss_fn, const Tensor& x, double* loss_value) {
  Tape tape;
  Var xv = tape.leaf(x, true);
  Var loss = loss_fn(tape, xv);
  if (loss_value != nullptr) *loss_value = loss.value()[0];
  tape.backward(loss);
  return xv.grad();
}

// ---------------------------------------------------------------------------
// Discriminative loss

namespace {

struct ClusterStats {
  std::vector<std::vector<std::size_t>> members;  // pixel indices per cluster
  std::vector<std::vector<double>> means;         // E-vector per cluster
};

ClusterStats gather_clusters(const Tensor& embedding, std::span<const int> instances) {
  if (embedding.rank() != 3) {
    throw std::invalid_argument("discriminative_loss: embedding must be E x H x W");
  }
  const std::size_t dims = embedding.dim(0);
  const std::size_t pixels = embedding.dim(1) * embedding.dim(2);
  if (instances.size() != pixels) {
    throw std::invalid_argument("discriminative_loss: instance map size mismatch");
  }
  std::map<int, std::size_t> index;
  ClusterStats stats;
  for (std::size_t i = 0; i < pixels; ++i) {
    const int id = instances[i];
    if (id <= 0) continue;
    auto [it, inserted] = index.emplace(id, stats.members.size());
    if (inserted) stats.members.emplace_back();
    stats.members[it->second].push_back(i);
  }
  // Clusters are ordered by id so the result does not depend on scan order.
  std::vector<std::vector<std::size_t>> ordered;
  ordered.reserve(index.size());
  for (const auto& [id, idx] : index) ordered.push_back(std::move(stats.members[idx]));
  stats.members = std::move(ordered);
  for (const auto& m : stats.members) {
    std::vector<double> mu(dims, 0.0);
    for (std::size_t i : m) {
      for (std::size_t e = 0; e < dims; ++e) mu[e] += embedding[e * pixels + i];
    }
    for (double& v : mu) v /= static_cast<double>(m.size());
    stats.means.push_back(std::move(mu));
  }
  return stats;
}

double distance(const std::vector<double>& a, const double* b, std::size_t stride,
                std::size_t dims) {
  double s = 0.0;
  for (std::size_t e = 0; e < dims; ++e) {
    const double d = a[e] - b[e * stride];
    s += d * d;
  }
  return std::sqrt(s);
}

double vec_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) s += (a[e] - b[e]) * (a[e] - b[e]);
  return std::sqrt(s);
}

double vec_norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

}  // namespace

DiscriminativeTerms discriminative_terms(const Tensor& embedding, std::span<const int> instances,
                                         const DiscriminativeParams& params) {
  const ClusterStats stats = gather_clusters(embedding, instances);
  DiscriminativeTerms terms;
  const std::size_t clusters = stats.members.size();
  if (clusters == 0) return terms;
  const std::size_t dims = embedding.dim(0);
  const std::size_t pixels = embedding.dim(1) * embedding.dim(2);
  const double* e = embedding.data().data();
  for (std::size_t c = 0; c < clusters; ++c) {
    double acc = 0.0;
    for (std::size_t i : stats.members[c]) {
      const double h = std::max(0.0, distance(stats.means[c], e + i, pixels, dims) - params.delta_v);
      acc += h * h;
    }
    terms.variance += acc / static_cast<double>(stats.members[c].size());
    terms.regularization += vec_norm(stats.means[c]);
  }
  terms.variance /= static_cast<double>(clusters);
  terms.regularization /= static_cast<double>(clusters);
  if (clusters > 1) {
    double acc = 0.0;
    for (std::size_t a = 0; a < clusters; ++a) {
      for (std::size_t b = 0; b < clusters; ++b) {
        if (a == b) continue;
        const double h =
            std::max(0.0, 2.0 * params.delta_d - vec_distance(stats.means[a], stats.means[b]));
        acc += h * h;
      }
    }
    terms.distance = acc / static_cast<double>(clusters * (clusters - 1));
  }
  return terms;
}

namespace ad {

Var discriminative_loss(Var embedding, std::span<const int> instances,
                        const DiscriminativeParams& params) {
  Tape& t = tape_of(embedding, "discriminative_loss");
  const DiscriminativeTerms terms = discriminative_terms(embedding.value(), instances, params);
  const double loss = params.weight_var * terms.variance + params.weight_dist * terms.distance +
                      params.weight_reg * terms.regularization;
  std::vector<int> ids(instances.begin(), instances.end());
  const std::size_t ie = embedding.id();
  return t.record(
      Tensor::scalar(loss), {ie}, [ie, ids = std::move(ids), params](Tape& tp, std::size_t self) {
        const double g = tp.grad_buffer(self)[0];
        const Tensor& emb = tp.value(ie);
        const ClusterStats stats = gather_clusters(emb, ids);
        const std::size_t clusters = stats.members.size();
        if (clusters == 0) return;
        const std::size_t dims = emb.dim(0);
        const std::size_t pixels = emb.dim(1) * emb.dim(2);
        const double* e = emb.data().data();
        auto ge = tp.grad_buffer(ie).data();
        const double inv_c = 1.0 / static_cast<double>(clusters);
        // Gradient reaching each cluster mean; distributed to members at the end.
        std::vector<std::vector<double>> gmean(clusters, std::vector<double>(dims, 0.0));
        std::vector<double> d(dims);
        for (std::size_t c = 0; c < clusters; ++c) {
          const auto& members = stats.members[c];
          const double inv_n = 1.0 / static_cast<double>(members.size());
          const double wv = g * params.weight_var * inv_c * inv_n;
          for (std::size_t i : members) {
            double r2 = 0.0;
            for (std::size_t k = 0; k < dims; ++k) {
              d[k] = stats.means[c][k] - e[k * pixels + i];
              r2 += d[k] * d[k];
            }
            const double r = std::sqrt(r2);
            const double h = r - params.delta_v;
            if (h <= 0.0 || r == 0.0) continue;
            // d/d(mu) of h^2 is +2h d/r; d/d(e_i) directly is -2h d/r.
            for (std::size_t k = 0; k < dims; ++k) {
              const double gk = wv * 2.0 * h * d[k] / r;
              gmean[c][k] += gk;
              ge[k * pixels + i] -= gk;
            }
          }
          const double norm = vec_norm(stats.means[c]);
          if (norm > 0.0) {
            for (std::size_t k = 0; k < dims; ++k) {
              gmean[c][k] += g * params.weight_reg * inv_c * stats.means[c][k] / norm;
            }
          }
        }
        if (clusters > 1) {
          const double wd =
              g * params.weight_dist / static_cast<double>(clusters * (clusters - 1));
          for (std::size_t a = 0; a < clusters; ++a) {
            for (std::size_t b = 0; b < clusters; ++b) {
              if (a == b) continue;
              const double r = vec_distance(stats.means[a], stats.means[b]);
              const double h = 2.0 * params.delta_d - r;
              if (h <= 0.0 || r == 0.0) continue;
              for (std::size_t k = 0; k < dims; ++k) {
                const double diff = stats.means[a][k] - stats.means[b][k];
                const double gk = wd * 2.0 * h * diff / r;
                gmean[a][k] -= gk;
                gmean[b][k] += gk;
              }
            }
          }
        }
        for (std::size_t c = 0; c < clusters; ++c) {
          const double inv_n = 1.0 / static_cast<double>(stats.members[c].size());
          for (std::size_t i : stats.members[c]) {
            for (std::size_t k = 0; k < dims; ++k) ge[k * pixels + i] += gmean[c][k] * inv_n;
          }
        }
      });
}

}  // namespace ad
}  // namespace plequiv
