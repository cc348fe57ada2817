#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
//
// The graph is a dynamic tape: every forward() call whose inputs require
// gradients records a node holding the inputs and a backward closure.
// backward(loss) walks the tape in reverse topological order and
// accumulates into .grad; calling it again without resetting accumulates
// again. The tape is released when the tensors that reference it go out
// of scope.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <random>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "founddiff/errors.hpp"

namespace founddiff::numcore {

class TensorError : public Error {
 public:
  explicit TensorError(const std::string& what) : Error(what) {}
};

using Shape = std::vector<int>;

inline int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first use, numel of values
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables tape recording in scope (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return make(std::move(shape), value, requires_grad);
  }
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (numel_of(shape) != static_cast<int>(values.size()))
      throw TensorError("tensor: shape " + shape_str(shape) + " does not hold " +
                        std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int numel() const { return static_cast<int>(node_->values.size()); }
  const std::vector<double>& values() const { return node_->values; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw TensorError("tensor: gradient not populated");
    return node_->grad;
  }

  // Leaf mutation: parameter initialization and optimizer updates only.
  std::vector<double>& raw_values() { return node_->values; }
  std::vector<double>& raw_grad() { return node_->ensure_grad(); }

  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw TensorError("tensor: item() on non-scalar " + shape_str(shape()));
    return node_->values[0];
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  static Tensor make(Shape shape, double fill, bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->values.assign(numel_of(shape), fill);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<detail::Node> node_;
};

enum class OpKind {
  matmul,
  conv2d_3x3_pad1,
  pointwise_conv,
  layer_norm,
  softmax_last_dim,
  softplus,
  exp,
  silu,
  add,
  mul,
  scalar_scale,
  sum,
  mean,
  concat_channels,
  transpose_2d,
  gather_sequence,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d_3x3_pad1: return "conv2d_3x3_pad1";
    case OpKind::pointwise_conv: return "pointwise_conv";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax_last_dim: return "softmax_last_dim";
    case OpKind::softplus: return "softplus";
    case OpKind::exp: return "exp";
    case OpKind::silu: return "silu";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scalar_scale: return "scalar_scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::transpose_2d: return "transpose_2d";
    case OpKind::gather_sequence: return "gather_sequence";
  }
  return "?";
}

struct OpAttrs {
  double scale = 1.0;        // scalar_scale factor
  int stride = 1;            // conv2d_3x3_pad1: 1 or 2
  double eps = 1e-12;        // layer_norm variance floor
  std::vector<int> indices;  // gather_sequence row indices
};

// Fault-injection hook for the verify command: while set to an op name,
// gradients flowing through that op are scaled by 1.01.
inline const char*& corrupt_backward_op() {
  static const char* name = nullptr;
  return name;
}

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x))
      throw TensorError(std::string("op ") + op + ": non-finite output");
}

inline Tensor make_node(const char* op, std::vector<Tensor> inputs, Shape shape,
                        std::vector<double> values,
                        std::function<void(Node&)> backprop) {
  check_finite(values, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->op = op;
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  if (rg && grad_mode()) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// Broadcast classification for add/mul.
enum class Bcast { same, channel, lastdim, scalar };

inline Bcast classify_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::same;
  if (numel_of(b) == 1) return Bcast::scalar;
  if (b.size() == 1) {
    if (a.size() == 3 && b[0] == a[0]) return Bcast::channel;
    if (a.size() >= 2 && b[0] == a.back()) return Bcast::lastdim;
  }
  throw TensorError(std::string("op ") + op + ": shapes " + shape_str(a) +
                    " and " + shape_str(b) + " do not align");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive forward/backward rules
// ---------------------------------------------------------------------------

inline Tensor forward(OpKind op, const std::vector<Tensor>& inputs,
                      const OpAttrs& attrs = {});

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return forward(OpKind::matmul, {a, b});
}
inline Tensor conv2d_3x3_pad1(const Tensor& x, const Tensor& w, int stride = 1) {
  OpAttrs at;
  at.stride = stride;
  return forward(OpKind::conv2d_3x3_pad1, {x, w}, at);
}
inline Tensor conv2d_3x3_pad1(const Tensor& x, const Tensor& w, const Tensor& b,
                              int stride = 1) {
  OpAttrs at;
  at.stride = stride;
  return forward(OpKind::conv2d_3x3_pad1, {x, w, b}, at);
}
inline Tensor pointwise_conv(const Tensor& x, const Tensor& w) {
  return forward(OpKind::pointwise_conv, {x, w});
}
inline Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  return forward(OpKind::pointwise_conv, {x, w, b});
}
inline Tensor layer_norm(const Tensor& x) {
  return forward(OpKind::layer_norm, {x});
}
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  return forward(OpKind::layer_norm, {x, gamma, beta});
}
inline Tensor softmax_last_dim(const Tensor& x) {
  return forward(OpKind::softmax_last_dim, {x});
}
inline Tensor softplus(const Tensor& x) { return forward(OpKind::softplus, {x}); }
inline Tensor vexp(const Tensor& x) { return forward(OpKind::exp, {x}); }
inline Tensor silu(const Tensor& x) { return forward(OpKind::silu, {x}); }
inline Tensor add(const Tensor& a, const Tensor& b) {
  return forward(OpKind::add, {a, b});
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return forward(OpKind::mul, {a, b});
}
inline Tensor scalar_scale(const Tensor& x, double c) {
  OpAttrs at;
  at.scale = c;
  return forward(OpKind::scalar_scale, {x}, at);
}
inline Tensor sum(const Tensor& x) { return forward(OpKind::sum, {x}); }
inline Tensor mean(const Tensor& x) { return forward(OpKind::mean, {x}); }
inline Tensor concat_channels(const std::vector<Tensor>& xs) {
  return forward(OpKind::concat_channels, xs);
}
inline Tensor transpose_2d(const Tensor& x) {
  return forward(OpKind::transpose_2d, {x});
}
inline Tensor gather_sequence(const Tensor& x, std::vector<int> indices) {
  OpAttrs at;
  at.indices = std::move(indices);
  return forward(OpKind::gather_sequence, {x}, at);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return add(a, scalar_scale(b, -1.0));
}

// Shape change without value change; gradient passes through unchanged.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw TensorError("reshape: " + shape_str(x.shape()) + " -> " +
                      shape_str(shape) + " changes element count");
  return detail::make_node(
      "reshape", {x}, std::move(shape), x.values(), [](detail::Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      });
}

inline Tensor forward(OpKind op, const std::vector<Tensor>& inputs,
                      const OpAttrs& attrs) {
  const char* name = op_name(op);
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi)
      throw TensorError(std::string("op ") + name + ": wrong input count " +
                        std::to_string(inputs.size()));
  };

  switch (op) {
    case OpKind::matmul: {
      arity(2, 2);
      const auto& a = inputs[0];
      const auto& b = inputs[1];
      if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw TensorError("op matmul: shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + " do not align");
      const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
      std::vector<double> y(static_cast<std::size_t>(n) * m, 0.0);
      const auto& av = a.values();
      const auto& bv = b.values();
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          const double* brow = &bv[p * m];
          double* yrow = &y[i * m];
          for (int j = 0; j < m; ++j) yrow[j] += aip * brow[j];
        }
      return detail::make_node(
          name, {a, b}, {n, m}, std::move(y), [n, k, m](detail::Node& nd) {
            const auto& g = nd.grad;
            const auto& av = nd.parents[0]->values;
            const auto& bv = nd.parents[1]->values;
            if (nd.parents[0]->requires_grad) {
              auto& da = nd.parents[0]->ensure_grad();
              for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                  const double gij = g[i * m + j];
                  if (gij == 0.0) continue;
                  for (int p = 0; p < k; ++p) da[i * k + p] += gij * bv[p * m + j];
                }
            }
            if (nd.parents[1]->requires_grad) {
              auto& db = nd.parents[1]->ensure_grad();
              for (int i = 0; i < n; ++i)
                for (int p = 0; p < k; ++p) {
                  const double aip = av[i * k + p];
                  if (aip == 0.0) continue;
                  const double* grow = &g[i * m];
                  double* drow = &db[p * m];
                  for (int j = 0; j < m; ++j) drow[j] += aip * grow[j];
                }
            }
          });
    }

    case OpKind::conv2d_3x3_pad1: {
      arity(2, 3);
      const auto& x = inputs[0];
      const auto& w = inputs[1];
      const bool has_bias = inputs.size() == 3;
      const int stride = attrs.stride;
      if (stride != 1 && stride != 2)
        throw TensorError("op conv2d_3x3_pad1: stride must be 1 or 2");
      if (x.rank() != 3 || w.rank() != 4 || w.shape()[1] != x.shape()[0] ||
          w.shape()[2] != 3 || w.shape()[3] != 3)
        throw TensorError("op conv2d_3x3_pad1: shapes " + shape_str(x.shape()) +
                          " and " + shape_str(w.shape()) + " do not align");
      const int ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
      const int co = w.shape()[0];
      if (has_bias && (inputs[2].rank() != 1 || inputs[2].shape()[0] != co))
        throw TensorError("op conv2d_3x3_pad1: bias shape mismatch");
      const int ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
      std::vector<double> y(static_cast<std::size_t>(co) * ho * wo, 0.0);
      const auto& xv = x.values();
      const auto& wv = w.values();
      for (int oc = 0; oc < co; ++oc) {
        double* yplane = &y[static_cast<std::size_t>(oc) * ho * wo];
        if (has_bias) {
          const double bv = inputs[2].values()[oc];
          for (int i = 0; i < ho * wo; ++i) yplane[i] = bv;
        }
        for (int ic = 0; ic < ci; ++ic) {
          const double* xplane = &xv[static_cast<std::size_t>(ic) * h * wd];
          const double* wk = &wv[(static_cast<std::size_t>(oc) * ci + ic) * 9];
          if (stride == 1 && h >= 3 && wd >= 3) {
            // interior without bounds checks, then the four borders
            const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
            const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
            const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
            for (int oy = 1; oy < h - 1; ++oy) {
              const double* xm = &xplane[(oy - 1) * wd];
              const double* x0 = &xplane[oy * wd];
              const double* xp = &xplane[(oy + 1) * wd];
              double* yrow = &yplane[oy * wd];
              for (int ox = 1; ox < wd - 1; ++ox) {
                yrow[ox] += w00 * xm[ox - 1] + w01 * xm[ox] + w02 * xm[ox + 1] +
                            w10 * x0[ox - 1] + w11 * x0[ox] + w12 * x0[ox + 1] +
                            w20 * xp[ox - 1] + w21 * xp[ox] + w22 * xp[ox + 1];
              }
            }
            auto edge = [&](int oy, int ox) {
              double acc = 0.0;
              for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int ix = ox + kx - 1;
                  if (ix < 0 || ix >= wd) continue;
                  acc += xplane[iy * wd + ix] * wk[ky * 3 + kx];
                }
              }
              yplane[oy * wd + ox] += acc;
            };
            for (int ox = 0; ox < wd; ++ox) {
              edge(0, ox);
              if (h > 1) edge(h - 1, ox);
            }
            for (int oy = 1; oy < h - 1; ++oy) {
              edge(oy, 0);
              if (wd > 1) edge(oy, wd - 1);
            }
          } else {
            for (int oy = 0; oy < ho; ++oy) {
              const int iy0 = oy * stride - 1;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix0 = ox * stride - 1;
                double acc = 0.0;
                for (int ky = 0; ky < 3; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= h) continue;
                  const double* xrow = &xplane[iy * wd];
                  const double* wrow = &wk[ky * 3];
                  for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= wd) continue;
                    acc += xrow[ix] * wrow[kx];
                  }
                }
                yplane[oy * wo + ox] += acc;
              }
            }
          }
        }
      }
      std::vector<Tensor> ins(inputs.begin(), inputs.end());
      return detail::make_node(
          name, ins, {co, ho, wo}, std::move(y),
          [ci, h, wd, co, ho, wo, stride, has_bias](detail::Node& nd) {
            const auto& g = nd.grad;
            const auto& xv = nd.parents[0]->values;
            const auto& wv = nd.parents[1]->values;
            const bool need_dx = nd.parents[0]->requires_grad;
            const bool need_dw = nd.parents[1]->requires_grad;
            std::vector<double>* dx = need_dx ? &nd.parents[0]->ensure_grad() : nullptr;
            std::vector<double>* dw = need_dw ? &nd.parents[1]->ensure_grad() : nullptr;
            for (int oc = 0; oc < co; ++oc) {
              const double* gplane = &g[static_cast<std::size_t>(oc) * ho * wo];
              for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = &xv[static_cast<std::size_t>(ic) * h * wd];
                const double* wk = &wv[(static_cast<std::size_t>(oc) * ci + ic) * 9];
                double* dxplane = need_dx ? &(*dx)[static_cast<std::size_t>(ic) * h * wd] : nullptr;
                double* dwk = need_dw ? &(*dw)[(static_cast<std::size_t>(oc) * ci + ic) * 9] : nullptr;
                if (stride == 1) {
                  // per-tap shifted accumulations with precomputed valid spans
                  for (int ky = 0; ky < 3; ++ky) {
                    const int sy = ky - 1;
                    const int oy_lo = std::max(0, -sy), oy_hi = std::min(ho, h - sy);
                    for (int kx = 0; kx < 3; ++kx) {
                      const int sx = kx - 1;
                      const int ox_lo = std::max(0, -sx), ox_hi = std::min(wo, wd - sx);
                      if (need_dx) {
                        const double wv_ = wk[ky * 3 + kx];
                        if (wv_ != 0.0) {
                          for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const double* grow = &gplane[oy * wo];
                            double* drow = &dxplane[(oy + sy) * wd + sx];
                            for (int ox = ox_lo; ox < ox_hi; ++ox)
                              drow[ox] += wv_ * grow[ox];
                          }
                        }
                      }
                      if (need_dw) {
                        double acc = 0.0;
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                          const double* grow = &gplane[oy * wo];
                          const double* xrow = &xplane[(oy + sy) * wd + sx];
                          for (int ox = ox_lo; ox < ox_hi; ++ox)
                            acc += grow[ox] * xrow[ox];
                        }
                        dwk[ky * 3 + kx] += acc;
                      }
                    }
                  }
                } else {
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy0 = oy * stride - 1;
                    for (int ox = 0; ox < wo; ++ox) {
                      const double gv = gplane[oy * wo + ox];
                      if (gv == 0.0) continue;
                      const int ix0 = ox * stride - 1;
                      for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                          const int ix = ix0 + kx;
                          if (ix < 0 || ix >= wd) continue;
                          if (need_dx) dxplane[iy * wd + ix] += gv * wk[ky * 3 + kx];
                          if (need_dw) dwk[ky * 3 + kx] += gv * xplane[iy * wd + ix];
                        }
                      }
                    }
                  }
                }
              }
              if (has_bias && nd.parents[2]->requires_grad) {
                auto& db = nd.parents[2]->ensure_grad();
                double acc = 0.0;
                for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
                db[oc] += acc;
              }
            }
          });
    }

    case OpKind::pointwise_conv: {
      arity(2, 3);
      const auto& x = inputs[0];
      const auto& w = inputs[1];
      const bool has_bias = inputs.size() == 3;
      if (x.rank() != 3 || w.rank() != 2 || w.shape()[1] != x.shape()[0])
        throw TensorError("op pointwise_conv: shapes " + shape_str(x.shape()) +
                          " and " + shape_str(w.shape()) + " do not align");
      const int ci = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
      const int co = w.shape()[0];
      if (has_bias && (inputs[2].rank() != 1 || inputs[2].shape()[0] != co))
        throw TensorError("op pointwise_conv: bias shape mismatch");
      std::vector<double> y(static_cast<std::size_t>(co) * hw, 0.0);
      const auto& xv = x.values();
      const auto& wv = w.values();
      for (int oc = 0; oc < co; ++oc) {
        double* yrow = &y[static_cast<std::size_t>(oc) * hw];
        if (has_bias) {
          const double bv = inputs[2].values()[oc];
          for (int i = 0; i < hw; ++i) yrow[i] = bv;
        }
        for (int ic = 0; ic < ci; ++ic) {
          const double wv_ = wv[oc * ci + ic];
          if (wv_ == 0.0) continue;
          const double* xrow = &xv[static_cast<std::size_t>(ic) * hw];
          for (int i = 0; i < hw; ++i) yrow[i] += wv_ * xrow[i];
        }
      }
      std::vector<Tensor> ins(inputs.begin(), inputs.end());
      return detail::make_node(
          name, ins, {co, x.shape()[1], x.shape()[2]}, std::move(y),
          [ci, hw, co, has_bias](detail::Node& nd) {
            const auto& g = nd.grad;
            const auto& xv = nd.parents[0]->values;
            const auto& wv = nd.parents[1]->values;
            if (nd.parents[0]->requires_grad) {
              auto& dx = nd.parents[0]->ensure_grad();
              for (int oc = 0; oc < co; ++oc) {
                const double* grow = &g[static_cast<std::size_t>(oc) * hw];
                for (int ic = 0; ic < ci; ++ic) {
                  const double wv_ = wv[oc * ci + ic];
                  if (wv_ == 0.0) continue;
                  double* dxrow = &dx[static_cast<std::size_t>(ic) * hw];
                  for (int i = 0; i < hw; ++i) dxrow[i] += wv_ * grow[i];
                }
              }
            }
            if (nd.parents[1]->requires_grad) {
              auto& dw = nd.parents[1]->ensure_grad();
              for (int oc = 0; oc < co; ++oc) {
                const double* grow = &g[static_cast<std::size_t>(oc) * hw];
                for (int ic = 0; ic < ci; ++ic) {
                  const double* xrow = &xv[static_cast<std::size_t>(ic) * hw];
                  double acc = 0.0;
                  for (int i = 0; i < hw; ++i) acc += grow[i] * xrow[i];
                  dw[oc * ci + ic] += acc;
                }
              }
            }
            if (has_bias && nd.parents[2]->requires_grad) {
              auto& db = nd.parents[2]->ensure_grad();
              for (int oc = 0; oc < co; ++oc) {
                const double* grow = &g[static_cast<std::size_t>(oc) * hw];
                double acc = 0.0;
                for (int i = 0; i < hw; ++i) acc += grow[i];
                db[oc] += acc;
              }
            }
          });
    }

    case OpKind::layer_norm: {
      arity(1, 3);
      const auto& x = inputs[0];
      if (x.rank() < 1) throw TensorError("op layer_norm: rank-0 input");
      const int d = x.shape().back();
      const int rows = x.numel() / d;
      const bool affine = inputs.size() == 3;
      if (affine && (inputs[1].numel() != d || inputs[2].numel() != d))
        throw TensorError("op layer_norm: affine parameter shape mismatch");
      const double eps = attrs.eps;
      const auto& xv = x.values();
      std::vector<double> y(xv.size());
      std::vector<double> inv_std(rows), mu(rows);
      for (int r = 0; r < rows; ++r) {
        const double* row = &xv[static_cast<std::size_t>(r) * d];
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += row[j];
        m /= d;
        double v = 0.0;
        for (int j = 0; j < d; ++j) {
          const double c = row[j] - m;
          v += c * c;
        }
        v /= d;
        const double is = 1.0 / std::sqrt(v + eps);
        mu[r] = m;
        inv_std[r] = is;
        double* yrow = &y[static_cast<std::size_t>(r) * d];
        for (int j = 0; j < d; ++j) yrow[j] = (row[j] - m) * is;
        if (affine) {
          const auto& gv = inputs[1].values();
          const auto& bv = inputs[2].values();
          for (int j = 0; j < d; ++j) yrow[j] = yrow[j] * gv[j] + bv[j];
        }
      }
      std::vector<Tensor> ins(inputs.begin(), inputs.end());
      return detail::make_node(
          name, ins, x.shape(), std::move(y),
          [rows, d, affine, mu, inv_std](detail::Node& nd) {
            const auto& g = nd.grad;
            const auto& xv = nd.parents[0]->values;
            const std::vector<double>* gamma =
                affine ? &nd.parents[1]->values : nullptr;
            std::vector<double>* dgamma =
                affine && nd.parents[1]->requires_grad ? &nd.parents[1]->ensure_grad() : nullptr;
            std::vector<double>* dbeta =
                affine && nd.parents[2]->requires_grad ? &nd.parents[2]->ensure_grad() : nullptr;
            std::vector<double>* dx =
                nd.parents[0]->requires_grad ? &nd.parents[0]->ensure_grad() : nullptr;
            std::vector<double> xhat(d), gy(d);
            for (int r = 0; r < rows; ++r) {
              const double* xrow = &xv[static_cast<std::size_t>(r) * d];
              const double* grow = &g[static_cast<std::size_t>(r) * d];
              const double is = inv_std[r], m = mu[r];
              for (int j = 0; j < d; ++j) {
                xhat[j] = (xrow[j] - m) * is;
                gy[j] = affine ? grow[j] * (*gamma)[j] : grow[j];
              }
              if (dgamma)
                for (int j = 0; j < d; ++j) (*dgamma)[j] += grow[j] * xhat[j];
              if (dbeta)
                for (int j = 0; j < d; ++j) (*dbeta)[j] += grow[j];
              if (dx) {
                double mg = 0.0, mgx = 0.0;
                for (int j = 0; j < d; ++j) {
                  mg += gy[j];
                  mgx += gy[j] * xhat[j];
                }
                mg /= d;
                mgx /= d;
                double* dxrow = &(*dx)[static_cast<std::size_t>(r) * d];
                for (int j = 0; j < d; ++j)
                  dxrow[j] += is * (gy[j] - mg - xhat[j] * mgx);
              }
            }
          });
    }

    case OpKind::softmax_last_dim: {
      arity(1, 1);
      const auto& x = inputs[0];
      const int d = x.shape().back();
      const int rows = x.numel() / d;
      const auto& xv = x.values();
      std::vector<double> y(xv.size());
      for (int r = 0; r < rows; ++r) {
        const double* row = &xv[static_cast<std::size_t>(r) * d];
        double* yrow = &y[static_cast<std::size_t>(r) * d];
        double mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
          yrow[j] = std::exp(row[j] - mx);
          z += yrow[j];
        }
        for (int j = 0; j < d; ++j) yrow[j] /= z;
      }
      auto yc = y;  // backward needs outputs
      return detail::make_node(
          name, {x}, x.shape(), std::move(y), [rows, d, yc](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            const auto& g = nd.grad;
            for (int r = 0; r < rows; ++r) {
              const double* s = &yc[static_cast<std::size_t>(r) * d];
              const double* grow = &g[static_cast<std::size_t>(r) * d];
              double dot = 0.0;
              for (int j = 0; j < d; ++j) dot += grow[j] * s[j];
              double* dxrow = &dx[static_cast<std::size_t>(r) * d];
              for (int j = 0; j < d; ++j) dxrow[j] += s[j] * (grow[j] - dot);
            }
          });
    }

    case OpKind::softplus:
    case OpKind::exp:
    case OpKind::silu: {
      arity(1, 1);
      const auto& x = inputs[0];
      const auto& xv = x.values();
      std::vector<double> y(xv.size());
      if (op == OpKind::softplus) {
        for (std::size_t i = 0; i < xv.size(); ++i)
          y[i] = xv[i] > 30.0 ? xv[i] : std::log1p(std::exp(xv[i]));
      } else if (op == OpKind::exp) {
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = std::exp(xv[i]);
      } else {
        for (std::size_t i = 0; i < xv.size(); ++i)
          y[i] = xv[i] * detail::sigmoid(xv[i]);
      }
      auto yc = (op == OpKind::exp) ? y : std::vector<double>{};
      return detail::make_node(
          name, {x}, x.shape(), std::move(y), [op, yc](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            const auto& g = nd.grad;
            const auto& xv = nd.parents[0]->values;
            for (std::size_t i = 0; i < xv.size(); ++i) {
              double d;
              if (op == OpKind::softplus) {
                d = detail::sigmoid(xv[i]);
              } else if (op == OpKind::exp) {
                d = yc[i];
              } else {
                const double s = detail::sigmoid(xv[i]);
                d = s * (1.0 + xv[i] * (1.0 - s));
              }
              dx[i] += g[i] * d;
            }
          });
    }

    case OpKind::add:
    case OpKind::mul: {
      arity(2, 2);
      const auto& a = inputs[0];
      const auto& b = inputs[1];
      const auto bc = detail::classify_broadcast(a.shape(), b.shape(), name);
      const auto& av = a.values();
      const auto& bv = b.values();
      std::vector<double> y(av.size());
      const bool is_add = op == OpKind::add;
      const int hw = a.rank() == 3 ? a.shape()[1] * a.shape()[2] : 1;
      const int d = a.shape().back();
      for (std::size_t i = 0; i < av.size(); ++i) {
        double bi;
        switch (bc) {
          case detail::Bcast::same: bi = bv[i]; break;
          case detail::Bcast::scalar: bi = bv[0]; break;
          case detail::Bcast::channel: bi = bv[i / hw]; break;
          case detail::Bcast::lastdim: bi = bv[i % d]; break;
          default: bi = 0.0;
        }
        y[i] = is_add ? av[i] + bi : av[i] * bi;
      }
      return detail::make_node(
          name, {a, b}, a.shape(), std::move(y),
          [bc, is_add, hw, d](detail::Node& nd) {
            const auto& g = nd.grad;
            const auto& av = nd.parents[0]->values;
            const auto& bv = nd.parents[1]->values;
            auto bval = [&](std::size_t i) {
              switch (bc) {
                case detail::Bcast::same: return bv[i];
                case detail::Bcast::scalar: return bv[0];
                case detail::Bcast::channel: return bv[i / hw];
                case detail::Bcast::lastdim: return bv[i % d];
              }
              return 0.0;
            };
            if (nd.parents[0]->requires_grad) {
              auto& da = nd.parents[0]->ensure_grad();
              for (std::size_t i = 0; i < g.size(); ++i)
                da[i] += is_add ? g[i] : g[i] * bval(i);
            }
            if (nd.parents[1]->requires_grad) {
              auto& db = nd.parents[1]->ensure_grad();
              for (std::size_t i = 0; i < g.size(); ++i) {
                const double contrib = is_add ? g[i] : g[i] * av[i];
                switch (bc) {
                  case detail::Bcast::same: db[i] += contrib; break;
                  case detail::Bcast::scalar: db[0] += contrib; break;
                  case detail::Bcast::channel: db[i / hw] += contrib; break;
                  case detail::Bcast::lastdim: db[i % d] += contrib; break;
                }
              }
            }
          });
    }

    case OpKind::scalar_scale: {
      arity(1, 1);
      const auto& x = inputs[0];
      const double c = attrs.scale;
      std::vector<double> y(x.values());
      for (auto& v : y) v *= c;
      return detail::make_node(
          name, {x}, x.shape(), std::move(y), [c](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * nd.grad[i];
          });
    }

    case OpKind::sum:
    case OpKind::mean: {
      arity(1, 1);
      const auto& x = inputs[0];
      double acc = 0.0;
      for (double v : x.values()) acc += v;
      const double scale = op == OpKind::mean ? 1.0 / x.numel() : 1.0;
      return detail::make_node(
          name, {x}, {1}, {acc * scale}, [scale](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            const double g = nd.grad[0] * scale;
            for (auto& v : dx) v += g;
          });
    }

    case OpKind::concat_channels: {
      if (inputs.empty()) throw TensorError("op concat_channels: no inputs");
      const auto& first = inputs[0].shape();
      int total0 = 0;
      int inner = 1;
      for (std::size_t k = 1; k < first.size(); ++k) inner *= first[k];
      std::vector<int> offsets;
      for (const auto& t : inputs) {
        const auto& s = t.shape();
        if (s.size() != first.size() ||
            !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
          throw TensorError("op concat_channels: trailing dims differ: " +
                            shape_str(first) + " vs " + shape_str(s));
        offsets.push_back(total0 * inner);
        total0 += s[0];
      }
      Shape out = first;
      out[0] = total0;
      std::vector<double> y;
      y.reserve(static_cast<std::size_t>(total0) * inner);
      for (const auto& t : inputs)
        y.insert(y.end(), t.values().begin(), t.values().end());
      std::vector<Tensor> ins(inputs.begin(), inputs.end());
      return detail::make_node(
          name, ins, std::move(out), std::move(y), [offsets](detail::Node& nd) {
            for (std::size_t p = 0; p < nd.parents.size(); ++p) {
              if (!nd.parents[p]->requires_grad) continue;
              auto& dp = nd.parents[p]->ensure_grad();
              const double* g = &nd.grad[offsets[p]];
              for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g[i];
            }
          });
    }

    case OpKind::transpose_2d: {
      arity(1, 1);
      const auto& x = inputs[0];
      if (x.rank() != 2) throw TensorError("op transpose_2d: needs rank-2 input");
      const int n = x.shape()[0], m = x.shape()[1];
      const auto& xv = x.values();
      std::vector<double> y(xv.size());
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) y[static_cast<std::size_t>(j) * n + i] = xv[static_cast<std::size_t>(i) * m + j];
      return detail::make_node(
          name, {x}, {m, n}, std::move(y), [n, m](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < m; ++j)
                dx[static_cast<std::size_t>(i) * m + j] += nd.grad[static_cast<std::size_t>(j) * n + i];
          });
    }

    case OpKind::gather_sequence: {
      arity(1, 1);
      const auto& x = inputs[0];
      if (x.rank() != 2) throw TensorError("op gather_sequence: needs rank-2 input");
      const int l = x.shape()[0], d = x.shape()[1];
      const auto idx = attrs.indices;
      for (int i : idx)
        if (i < 0 || i >= l)
          throw TensorError("op gather_sequence: index " + std::to_string(i) +
                            " out of range [0," + std::to_string(l) + ")");
      const int lo = static_cast<int>(idx.size());
      const auto& xv = x.values();
      std::vector<double> y(static_cast<std::size_t>(lo) * d);
      for (int i = 0; i < lo; ++i)
        std::memcpy(&y[static_cast<std::size_t>(i) * d], &xv[static_cast<std::size_t>(idx[i]) * d],
                    sizeof(double) * d);
      return detail::make_node(
          name, {x}, {lo, d}, std::move(y), [idx, d, lo](detail::Node& nd) {
            auto& dx = nd.parents[0]->ensure_grad();
            for (int i = 0; i < lo; ++i) {
              const double* g = &nd.grad[static_cast<std::size_t>(i) * d];
              double* t = &dx[static_cast<std::size_t>(idx[i]) * d];
              for (int j = 0; j < d; ++j) t[j] += g[j];
            }
          });
    }
  }
  throw TensorError("unknown op");
}

// Row-wise L2 normalization of a rank-2 tensor; rows with tiny norm are
// guarded by eps inside the square root.
inline Tensor l2norm_rows(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw TensorError("l2norm_rows: needs rank-2 input");
  const int n = x.shape()[0], d = x.shape()[1];
  const auto& xv = x.values();
  std::vector<double> y(xv.size());
  std::vector<double> inv_norm(n);
  for (int i = 0; i < n; ++i) {
    const double* row = &xv[static_cast<std::size_t>(i) * d];
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += row[j] * row[j];
    const double in = 1.0 / std::sqrt(s + eps);
    inv_norm[i] = in;
    for (int j = 0; j < d; ++j) y[static_cast<std::size_t>(i) * d + j] = row[j] * in;
  }
  return detail::make_node(
      "l2norm_rows", {x}, x.shape(), std::move(y),
      [n, d, inv_norm](detail::Node& nd) {
        auto& dx = nd.parents[0]->ensure_grad();
        const auto& xv = nd.parents[0]->values;
        for (int i = 0; i < n; ++i) {
          const double* row = &xv[static_cast<std::size_t>(i) * d];
          const double* g = &nd.grad[static_cast<std::size_t>(i) * d];
          const double in = inv_norm[i];
          double dot = 0.0;
          for (int j = 0; j < d; ++j) dot += g[j] * row[j];
          dot *= in * in;
          double* t = &dx[static_cast<std::size_t>(i) * d];
          for (int j = 0; j < d; ++j) t[j] += in * (g[j] - row[j] * dot);
        }
      });
}

// Extension point for module-level differentiable operations (selective
// scan, contrastive losses). The closure receives the node after its grad
// is populated and must accumulate into the parents' grads.
inline Tensor make_custom_op(const char* name, std::vector<Tensor> inputs,
                             Shape out_shape, std::vector<double> out_values,
                             std::function<void(detail::Node&)> backprop) {
  return detail::make_node(name, std::move(inputs), std::move(out_shape),
                           std::move(out_values), std::move(backprop));
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative DFS post-order; nodes sorted so that consumers precede inputs.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Propagate on clean buffers so earlier passes cannot leak into this one,
  // then fold the previous grads back in: repeated backward calls accumulate.
  std::unordered_map<detail::Node*, std::vector<double>> stash;
  for (detail::Node* node : order)
    if (!node->grad.empty()) {
      stash.emplace(node, std::move(node->grad));
      node->grad.clear();
    }

  root->ensure_grad()[0] = 1.0;
  const char* corrupt = corrupt_backward_op();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backprop || node->grad.empty()) continue;
    if (corrupt && std::strcmp(node->op, corrupt) == 0)
      for (auto& g : node->grad) g *= 1.01;
    node->backprop(*node);
  }

  for (auto& [node, old] : stash) {
    auto& g = node->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += old[i];
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

// Returns max over all input elements of
//   |analytic - central difference| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                         std::vector<Tensor> inputs, double eps = 1e-5) {
  if (eps <= 0.0) throw TensorError("grad_check: eps must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = fn(inputs);
  if (y.numel() != 1) throw TensorError("grad_check: fn must return a scalar");
  backward(y);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].raw_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double yp = fn(inputs).item();
      vals[i] = keep - eps;
      const double ym = fn(inputs).item();
      vals[i] = keep;
      const double numeric = (yp - ym) / (2.0 * eps);
      if (!std::isfinite(numeric))
        throw TensorError("grad_check: non-finite numeric gradient at input " +
                          std::to_string(k) + " element " + std::to_string(i));
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Same check restricted to a deterministic random subset of elements per
// input; for large parameter sets where the full sweep is too slow.
inline double grad_check_sampled(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                 std::vector<Tensor> inputs, double eps,
                                 int per_tensor_cap, std::uint64_t seed) {
  if (eps <= 0.0) throw TensorError("grad_check_sampled: eps must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = fn(inputs);
  if (y.numel() != 1) throw TensorError("grad_check_sampled: fn must return a scalar");
  backward(y);

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));

  std::mt19937_64 pick(seed);
  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].raw_values();
    std::vector<std::size_t> idx(vals.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (static_cast<int>(idx.size()) > per_tensor_cap) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        std::swap(idx[i], idx[i + pick() % (idx.size() - i)]);
      idx.resize(per_tensor_cap);
    }
    for (std::size_t i : idx) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double yp = fn(inputs).item();
      vals[i] = keep - eps;
      const double ym = fn(inputs).item();
      vals[i] = keep;
      const double numeric = (yp - ym) / (2.0 * eps);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) /
                                  std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

}  // namespace founddiff::numcore
