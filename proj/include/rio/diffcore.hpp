#pragma once

// Minimal reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward evaluation; Var is a handle
// into it. Calling backward() on a scalar node replays the tape in reverse
// and returns one gradient array per bound parameter. Everything is
// templated on the storage scalar so the same graph can be evaluated in
// float (training) and double (finite-difference checks).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rio/error.hpp"

namespace rio::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename S>
struct ParamTensorT {
  std::string name;
  Shape shape;
  std::vector<S> values;
};
using ParamTensor = ParamTensorT<float>;

/// One gradient array per parameter, in binding order.
template <typename S>
using GradientSetT = std::vector<std::vector<S>>;
using GradientSet = GradientSetT<float>;

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const { return tape->node(id).shape; }
  const std::vector<S>& value() const { return tape->node(id).value; }
  std::size_t size() const { return tape->node(id).value.size(); }
};

template <typename S>
class Tape {
 public:
  struct Node {
    std::string op;
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    int param_slot = -1;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t param_count() const { return param_count_; }

  Var<S> constant(Shape shape, std::vector<S> values, std::string op = "constant") {
    check_size(op, shape, values.size());
    return push(std::move(op), std::move(shape), std::move(values), false, nullptr);
  }

  Var<S> scalar(S value) { return constant({}, {value}); }

  /// Binds a learnable tensor to gradient slot `slot`.
  Var<S> parameter(std::size_t slot, const ParamTensorT<S>& p) {
    check_size("parameter " + p.name, p.shape, p.values.size());
    Var<S> v = push("param:" + p.name, p.shape, p.values, true, nullptr);
    nodes_[v.id].param_slot = static_cast<int>(slot);
    param_count_ = std::max(param_count_, slot + 1);
    param_sizes_.resize(param_count_, 0);
    param_sizes_[slot] = p.values.size();
    return v;
  }

  std::vector<Var<S>> bind(const std::vector<ParamTensorT<S>>& params) {
    std::vector<Var<S>> vars;
    vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(parameter(i, params[i]));
    return vars;
  }

  /// Appends an op node. `backward` is only kept when some input needs a
  /// gradient.
  Var<S> push(std::string op, Shape shape, std::vector<S> value, bool requires_grad,
              std::function<void(Tape&, std::size_t)> backward) {
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<S>{this, nodes_.size() - 1};
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, allocated (zeroed) on first use.
  std::vector<S>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), S(0));
    return n.grad;
  }

  const std::vector<S>& value(std::size_t id) const { return nodes_[id].value; }

  [[noreturn]] void shape_error(const std::string& op, const std::string& detail) const {
    throw Error(ErrorCode::ShapeMismatch,
                "node #" + std::to_string(nodes_.size()) + " (" + op + "): " + detail);
  }

  /// Reverse sweep from a scalar node. Parameters the loss does not depend
  /// on receive zero gradients.
  GradientSetT<S> backward(Var<S> loss) {
    if (loss.tape != this) throw Error(ErrorCode::NonScalarLoss, "loss belongs to another tape");
    if (nodes_[loss.id].value.size() != 1) {
      throw Error(ErrorCode::NonScalarLoss,
                  "loss node has shape " + shape_str(nodes_[loss.id].shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    GradientSetT<S> grads(param_count_);
    for (std::size_t i = 0; i < param_count_; ++i) grads[i].assign(param_sizes_[i], S(0));
    if (!nodes_[loss.id].requires_grad) return grads;

    grad(loss.id)[0] = S(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param_slot >= 0) {
        auto& g = grads[static_cast<std::size_t>(n.param_slot)];
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
    return grads;
  }

 private:
  void check_size(const std::string& op, const Shape& shape, std::size_t count) const {
    if (numel(shape) != count) {
      shape_error(op, "shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                          " values, got " + std::to_string(count));
    }
  }

  std::vector<Node> nodes_;
  std::size_t param_count_ = 0;
  std::vector<std::size_t> param_sizes_;
};

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRow = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMapRow = Eigen::Map<const RowMat<S>>;

template <typename S>
bool any_grad(const Tape<S>& t, std::initializer_list<std::size_t> ids) {
  for (auto id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

template <typename S>
void expect_rank(const Tape<S>& t, const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    t.shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

/// Output positions [lo, hi) whose tap k reads inside the unpadded input.
inline std::pair<std::size_t, std::size_t> conv_valid_range(std::size_t T, std::size_t To,
                                                            std::size_t stride, std::size_t pad,
                                                            std::size_t k) {
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  if (T + pad <= k) return {lo, lo};
  std::size_t hi = (T - 1 + pad - k) / stride + 1;
  hi = std::min(hi, To);
  return {std::min(lo, hi), hi};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.shape() != b.shape()) {
    t.shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<S> out(a.value());
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return t.push("add", a.shape(), std::move(out), detail::any_grad(t, {ia, ib}),
                [ia, ib](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  for (std::size_t id : {ia, ib}) {
                    if (!tp.requires_grad(id)) continue;
                    auto& d = tp.grad(id);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                });
}

template <typename S>
Var<S> scale(Var<S> x, double c) {
  Tape<S>& t = *x.tape;
  std::vector<S> out(x.value());
  for (auto& v : out) v = static_cast<S>(v * c);
  const std::size_t ix = x.id;
  return t.push("scale", x.shape(), std::move(out), t.requires_grad(ix),
                [ix, c](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  auto& d = tp.grad(ix);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += static_cast<S>(g[i] * c);
                });
}

template <typename S>
Var<S> relu(Var<S> x) {
  Tape<S>& t = *x.tape;
  std::vector<S> out(x.value());
  for (auto& v : out) v = v > S(0) ? v : S(0);
  const std::size_t ix = x.id;
  return t.push("relu", x.shape(), std::move(out), t.requires_grad(ix),
                [ix](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  const auto& xv = tp.value(ix);
                  auto& d = tp.grad(ix);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (xv[i] > S(0)) d[i] += g[i];
                });
}

/// Cuts the gradient path: the result is a constant copy of `x`.
template <typename S>
Var<S> stop_gradient(Var<S> x) {
  return x.tape->constant(x.shape(), x.value(), "stop_gradient");
}

/// Same values under a new shape of equal element count.
template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tape<S>& t = *x.tape;
  if (numel(shape) != x.size())
    t.shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  const std::size_t ix = x.id;
  return t.push("reshape", std::move(shape), x.value(), t.requires_grad(ix),
                [ix](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  auto& d = tp.grad(ix);
                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                });
}

/// Selects rows (first axis) of `x` by index.
template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<std::size_t> rows) {
  Tape<S>& t = *x.tape;
  if (x.shape().empty()) t.shape_error("gather_rows", "scalar input");
  const std::size_t n = x.shape()[0];
  const std::size_t stride = n == 0 ? 0 : x.size() / n;
  for (auto r : rows)
    if (r >= n) t.shape_error("gather_rows", "row " + std::to_string(r) + " out of range");
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<S> out(rows.size() * stride);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.begin() + static_cast<std::ptrdiff_t>(i * stride));
  const std::size_t ix = x.id;
  return t.push("gather_rows", std::move(shape), std::move(out), t.requires_grad(ix),
                [ix, rows = std::move(rows), stride](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  auto& d = tp.grad(ix);
                  for (std::size_t i = 0; i < rows.size(); ++i)
                    for (std::size_t k = 0; k < stride; ++k) d[rows[i] * stride + k] += g[i * stride + k];
                });
}

/// Stacks tensors along the first axis.
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.front().tape;
  Shape shape = parts.front().shape();
  std::size_t rows = 0;
  std::vector<S> out;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, offset)
  bool need = false;
  for (const auto& p : parts) {
    if (p.shape().size() != shape.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      t.shape_error("concat_rows", shape_str(p.shape()) + " vs " + shape_str(shape));
    }
    spans.emplace_back(p.id, out.size());
    out.insert(out.end(), p.value().begin(), p.value().end());
    rows += p.shape()[0];
    need = need || t.requires_grad(p.id);
  }
  shape[0] = rows;
  return t.push("concat_rows", std::move(shape), std::move(out), need,
                [spans = std::move(spans)](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  for (auto [id, off] : spans) {
                    if (!tp.requires_grad(id)) continue;
                    auto& d = tp.grad(id);
                    for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[off + k];
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

template <typename S>
Var<S> sum(Var<S> x) {
  Tape<S>& t = *x.tape;
  double acc = 0.0;
  for (S v : x.value()) acc += v;
  const std::size_t ix = x.id;
  return t.push("sum", {}, {static_cast<S>(acc)}, t.requires_grad(ix),
                [ix](Tape<S>& tp, std::size_t self) {
                  const S g = tp.grad(self)[0];
                  for (auto& d : tp.grad(ix)) d += g;
                });
}

template <typename S>
Var<S> mean(Var<S> x) {
  const std::size_t n = x.size();
  return scale(sum(x), n == 0 ? 0.0 : 1.0 / static_cast<double>(n));
}

/// x: [B, C, T] -> [B, C], mean over time.
template <typename S>
Var<S> mean_time(Var<S> x) {
  Tape<S>& t = *x.tape;
  detail::expect_rank(t, "mean_time", x.shape(), 3);
  const std::size_t B = x.shape()[0], C = x.shape()[1], T = x.shape()[2];
  std::vector<S> out(B * C);
  const auto& xv = x.value();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (std::size_t k = 0; k < T; ++k) acc += xv[bc * T + k];
    out[bc] = static_cast<S>(acc / static_cast<double>(T));
  }
  const std::size_t ix = x.id;
  return t.push("mean_time", {B, C}, std::move(out), t.requires_grad(ix),
                [ix, B, C, T](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  auto& d = tp.grad(ix);
                  const double inv = 1.0 / static_cast<double>(T);
                  for (std::size_t bc = 0; bc < B * C; ++bc) {
                    const S gi = static_cast<S>(g[bc] * inv);
                    for (std::size_t k = 0; k < T; ++k) d[bc * T + k] += gi;
                  }
                });
}

/// Per-sample sum of squared component errors, averaged over the batch.
/// pred, target: [B, D].
template <typename S>
Var<S> mse_loss(Var<S> pred, Var<S> target) {
  Tape<S>& t = *pred.tape;
  if (pred.shape() != target.shape() || pred.shape().size() != 2) {
    t.shape_error("mse_loss", shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t B = pred.shape()[0];
  const auto& p = pred.value();
  const auto& q = target.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = static_cast<double>(p[i]) - static_cast<double>(q[i]);
    acc += e * e;
  }
  const double inv_b = B == 0 ? 0.0 : 1.0 / static_cast<double>(B);
  const std::size_t ip = pred.id, iq = target.id;
  return t.push("mse_loss", {}, {static_cast<S>(acc * inv_b)}, detail::any_grad(t, {ip, iq}),
                [ip, iq, inv_b](Tape<S>& tp, std::size_t self) {
                  const double g = tp.grad(self)[0];
                  const auto& p = tp.value(ip);
                  const auto& q = tp.value(iq);
                  const double c = 2.0 * g * inv_b;
                  if (tp.requires_grad(ip)) {
                    auto& d = tp.grad(ip);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] += static_cast<S>(c * (static_cast<double>(p[i]) - q[i]));
                  }
                  if (tp.requires_grad(iq)) {
                    auto& d = tp.grad(iq);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      d[i] -= static_cast<S>(c * (static_cast<double>(p[i]) - q[i]));
                  }
                });
}

// ---------------------------------------------------------------------------
// Row-vector ops on [B, D]

template <typename S>
Var<S> l2_norm(Var<S> x) {
  Tape<S>& t = *x.tape;
  detail::expect_rank(t, "l2_norm", x.shape(), 2);
  const std::size_t B = x.shape()[0], D = x.shape()[1];
  const auto& xv = x.value();
  std::vector<S> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < D; ++k) acc += static_cast<double>(xv[b * D + k]) * xv[b * D + k];
    out[b] = static_cast<S>(std::sqrt(acc));
  }
  const std::size_t ix = x.id;
  return t.push("l2_norm", {B}, std::move(out), t.requires_grad(ix),
                [ix, B, D](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  const auto& y = tp.value(self);
                  const auto& xv = tp.value(ix);
                  auto& d = tp.grad(ix);
                  for (std::size_t b = 0; b < B; ++b) {
                    if (y[b] == S(0)) continue;  // subgradient 0 at the origin
                    const double c = static_cast<double>(g[b]) / y[b];
                    for (std::size_t k = 0; k < D; ++k) d[b * D + k] += static_cast<S>(c * xv[b * D + k]);
                  }
                });
}

template <typename S>
Var<S> dot(Var<S> x, Var<S> y) {
  Tape<S>& t = *x.tape;
  if (x.shape() != y.shape() || x.shape().size() != 2) {
    t.shape_error("dot", shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const std::size_t B = x.shape()[0], D = x.shape()[1];
  const auto& xv = x.value();
  const auto& yv = y.value();
  std::vector<S> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    for (std::size_t k = 0; k < D; ++k) acc += static_cast<double>(xv[b * D + k]) * yv[b * D + k];
    out[b] = static_cast<S>(acc);
  }
  const std::size_t ix = x.id, iy = y.id;
  return t.push("dot", {B}, std::move(out), detail::any_grad(t, {ix, iy}),
                [ix, iy, B, D](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  const auto& xv = tp.value(ix);
                  const auto& yv = tp.value(iy);
                  if (tp.requires_grad(ix)) {
                    auto& d = tp.grad(ix);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t k = 0; k < D; ++k) d[b * D + k] += g[b] * yv[b * D + k];
                  }
                  if (tp.requires_grad(iy)) {
                    auto& d = tp.grad(iy);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t k = 0; k < D; ++k) d[b * D + k] += g[b] * xv[b * D + k];
                  }
                });
}

/// Row-wise cosine similarity <x,y>/(|x||y|). Zero-norm rows raise
/// ZeroVector; callers gate them out first.
template <typename S>
Var<S> cosine_similarity(Var<S> x, Var<S> y) {
  Tape<S>& t = *x.tape;
  if (x.shape() != y.shape() || x.shape().size() != 2) {
    t.shape_error("cosine_similarity", shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const std::size_t B = x.shape()[0], D = x.shape()[1];
  const auto& xv = x.value();
  const auto& yv = y.value();
  std::vector<double> nx(B), ny(B), cs(B);
  std::vector<S> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double xx = 0, yy = 0, xy = 0;
    for (std::size_t k = 0; k < D; ++k) {
      const double a = xv[b * D + k], c = yv[b * D + k];
      xx += a * a;
      yy += c * c;
      xy += a * c;
    }
    nx[b] = std::sqrt(xx);
    ny[b] = std::sqrt(yy);
    if (nx[b] < 1e-12 || ny[b] < 1e-12) {
      throw Error(ErrorCode::ZeroVector, "cosine_similarity: zero-norm row " + std::to_string(b));
    }
    cs[b] = xy / (nx[b] * ny[b]);
    out[b] = static_cast<S>(cs[b]);
  }
  const std::size_t ix = x.id, iy = y.id;
  return t.push(
      "cosine_similarity", {B}, std::move(out), detail::any_grad(t, {ix, iy}),
      [ix, iy, B, D, nx = std::move(nx), ny = std::move(ny), cs = std::move(cs)](
          Tape<S>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& xv = tp.value(ix);
        const auto& yv = tp.value(iy);
        const bool gx = tp.requires_grad(ix), gy = tp.requires_grad(iy);
        for (std::size_t b = 0; b < B; ++b) {
          const double inv = 1.0 / (nx[b] * ny[b]);
          for (std::size_t k = 0; k < D; ++k) {
            const double a = xv[b * D + k], c = yv[b * D + k];
            if (gx) tp.grad(ix)[b * D + k] += static_cast<S>(g[b] * (c * inv - cs[b] * a / (nx[b] * nx[b])));
            if (gy) tp.grad(iy)[b * D + k] += static_cast<S>(g[b] * (a * inv - cs[b] * c / (ny[b] * ny[b])));
          }
        }
      });
}

/// Rotates each row of x: [B, 3] about z by its own constant angle (radians).
template <typename S>
Var<S> rotate_z(Var<S> x, std::vector<double> angles) {
  Tape<S>& t = *x.tape;
  if (x.shape().size() != 2 || x.shape()[1] != 3 || angles.size() != x.shape()[0]) {
    t.shape_error("rotate_z", shape_str(x.shape()) + " with " + std::to_string(angles.size()) +
                                  " angles");
  }
  const std::size_t B = x.shape()[0];
  const auto& xv = x.value();
  std::vector<S> out(B * 3);
  for (std::size_t b = 0; b < B; ++b) {
    const double c = std::cos(angles[b]), s = std::sin(angles[b]);
    const double vx = xv[b * 3], vy = xv[b * 3 + 1];
    out[b * 3] = static_cast<S>(c * vx - s * vy);
    out[b * 3 + 1] = static_cast<S>(s * vx + c * vy);
    out[b * 3 + 2] = xv[b * 3 + 2];
  }
  const std::size_t ix = x.id;
  return t.push("rotate_z", x.shape(), std::move(out), t.requires_grad(ix),
                [ix, B, angles = std::move(angles)](Tape<S>& tp, std::size_t self) {
                  const auto& g = tp.grad(self);
                  auto& d = tp.grad(ix);
                  for (std::size_t b = 0; b < B; ++b) {
                    const double c = std::cos(angles[b]), s = std::sin(angles[b]);
                    const double gx = g[b * 3], gy = g[b * 3 + 1];
                    d[b * 3] += static_cast<S>(c * gx + s * gy);
                    d[b * 3 + 1] += static_cast<S>(-s * gx + c * gy);
                    d[b * 3 + 2] += g[b * 3 + 2];
                  }
                });
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W^T + b with x: [B, I], W: [O, I], b: [O].
template <typename S>
Var<S> affine(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  detail::expect_rank(t, "affine", x.shape(), 2);
  detail::expect_rank(t, "affine", w.shape(), 2);
  const std::size_t B = x.shape()[0], I = x.shape()[1], O = w.shape()[0];
  if (w.shape()[1] != I || b.shape() != Shape{O}) {
    t.shape_error("affine", "x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", b " +
                                shape_str(b.shape()));
  }
  // Row by row with double accumulation: each output depends only on its row.
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  std::vector<S> out(B * O);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t o = 0; o < O; ++o) {
      double acc = bv[o];
      for (std::size_t i = 0; i < I; ++i) acc += double(xv[r * I + i]) * wv[o * I + i];
      out[r * O + o] = static_cast<S>(acc);
    }
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return t.push("affine", {B, O}, std::move(out), detail::any_grad(t, {ix, iw, ib}),
                [ix, iw, ib, B, I, O](Tape<S>& tp, std::size_t self) {
                  detail::ConstMapRow<S> G(tp.grad(self).data(), B, O);
                  if (tp.requires_grad(ix)) {
                    detail::ConstMapRow<S> W(tp.value(iw).data(), O, I);
                    detail::MapRow<S> dX(tp.grad(ix).data(), B, I);
                    dX.noalias() += G * W;
                  }
                  if (tp.requires_grad(iw)) {
                    detail::ConstMapRow<S> X(tp.value(ix).data(), B, I);
                    detail::MapRow<S> dW(tp.grad(iw).data(), O, I);
                    dW.noalias() += G.transpose() * X;
                  }
                  if (tp.requires_grad(ib)) {
                    auto& db = tp.grad(ib);
                    for (std::size_t o = 0; o < O; ++o) {
                      double acc = 0.0;
                      for (std::size_t r = 0; r < B; ++r) acc += G(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(o));
                      db[o] += static_cast<S>(acc);
                    }
                  }
                });
}

struct Conv1dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// 1-D convolution (cross-correlation) with zero padding.
/// x: [B, C, T], W: [O, C, K], b: [O] -> [B, O, (T + 2p - K)/s + 1].
template <typename S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, Conv1dGeometry geo) {
  Tape<S>& t = *x.tape;
  detail::expect_rank(t, "conv1d", x.shape(), 3);
  detail::expect_rank(t, "conv1d", w.shape(), 3);
  const std::size_t B = x.shape()[0], C = x.shape()[1], T = x.shape()[2];
  const std::size_t O = w.shape()[0], K = w.shape()[2];
  const std::size_t stride = geo.stride, pad = geo.padding;
  if (w.shape()[1] != C || b.shape() != Shape{O} || stride == 0 || T + 2 * pad < K) {
    t.shape_error("conv1d", "x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", b " +
                                shape_str(b.shape()));
  }
  const std::size_t To = (T + 2 * pad - K) / stride + 1;
  const std::size_t CK = C * K;

  // im2col per sample: col[b] is [(c, k), t_out]. Each sample then gets its
  // own GEMM of identical shape, so outputs do not depend on the batch.
  std::vector<S> col(B * CK * To);
  const auto& xv = x.value();
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t c = 0; c < C; ++c) {
      const S* src = xv.data() + (bi * C + c) * T;
      for (std::size_t k = 0; k < K; ++k) {
        S* dst = col.data() + (bi * CK + c * K + k) * To;
        const auto [lo, hi] = detail::conv_valid_range(T, To, stride, pad, k);
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
        std::fill(dst, dst + lo, S(0));
        if (stride == 1) {
          std::copy(src + (static_cast<std::ptrdiff_t>(lo) + off),
                    src + (static_cast<std::ptrdiff_t>(hi) + off), dst + lo);
        } else {
          for (std::size_t to = lo; to < hi; ++to)
            dst[to] = src[static_cast<std::ptrdiff_t>(to * stride) + off];
        }
        std::fill(dst + hi, dst + To, S(0));
      }
    }

  std::vector<S> out(B * O * To);
  detail::ConstMapRow<S> Wm(w.value().data(), O, CK);
  const auto& bv = b.value();
  for (std::size_t bi = 0; bi < B; ++bi) {
    detail::MapRow<S> Y(out.data() + bi * O * To, O, To);
    Y.noalias() = Wm * detail::ConstMapRow<S>(col.data() + bi * CK * To, CK, To);
    for (std::size_t o = 0; o < O; ++o) {
      S* row = out.data() + (bi * O + o) * To;
      for (std::size_t to = 0; to < To; ++to) row[to] += bv[o];
    }
  }

  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return t.push(
      "conv1d", {B, O, To}, std::move(out), detail::any_grad(t, {ix, iw, ib}),
      [=, col = std::move(col)](Tape<S>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ib)) {
          auto& db = tp.grad(ib);
          for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t bi = 0; bi < B; ++bi) {
              const S* row = g.data() + (bi * O + o) * To;
              for (std::size_t to = 0; to < To; ++to) acc += row[to];
            }
            db[o] += static_cast<S>(acc);
          }
        }
        if (tp.requires_grad(iw)) {
          detail::MapRow<S> dW(tp.grad(iw).data(), O, CK);
          for (std::size_t bi = 0; bi < B; ++bi) {
            detail::ConstMapRow<S> G(g.data() + bi * O * To, O, To);
            dW.noalias() += G * detail::ConstMapRow<S>(col.data() + bi * CK * To, CK, To).transpose();
          }
        }
        if (tp.requires_grad(ix)) {
          detail::ConstMapRow<S> Wm(tp.value(iw).data(), O, CK);
          detail::RowMat<S> dCol(CK, To);
          auto& dx = tp.grad(ix);
          for (std::size_t bi = 0; bi < B; ++bi) {
            dCol.noalias() = Wm.transpose() * detail::ConstMapRow<S>(g.data() + bi * O * To, O, To);
            for (std::size_t c = 0; c < C; ++c) {
              S* dst = dx.data() + (bi * C + c) * T;
              for (std::size_t k = 0; k < K; ++k) {
                const S* src = dCol.data() + (c * K + k) * To;
                const auto [lo, hi] = detail::conv_valid_range(T, To, stride, pad, k);
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
                for (std::size_t to = lo; to < hi; ++to)
                  dst[static_cast<std::ptrdiff_t>(to * stride) + off] += src[to];
              }
            }
          }
        }
      });
}

inline constexpr double kGroupNormEps = 1e-5;

/// Group normalization over (channels-in-group x time) of each sample,
/// followed by a per-channel affine. x: [B, C, T], gamma/beta: [C].
template <typename S>
Var<S> group_norm(Var<S> x, Var<S> gamma, Var<S> beta, std::size_t groups,
                  double eps = kGroupNormEps) {
  Tape<S>& t = *x.tape;
  detail::expect_rank(t, "group_norm", x.shape(), 3);
  const std::size_t B = x.shape()[0], C = x.shape()[1], T = x.shape()[2];
  if (groups == 0 || C % groups != 0 || gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    t.shape_error("group_norm", "x " + shape_str(x.shape()) + ", groups " +
                                    std::to_string(groups) + ", gamma " +
                                    shape_str(gamma.shape()));
  }
  const std::size_t cpg = C / groups, n = cpg * T;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<S> xhat(xv.size()), out(xv.size());
  std::vector<double> inv_std(B * groups);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t off = (bi * C + g * cpg) * T;
      const S* src = xv.data() + off;
      double m = 0.0;
      for (std::size_t k = 0; k < n; ++k) m += src[k];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double d = src[k] - m;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[bi * groups + g] = is;
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const std::size_t c = g * cpg + ci;
        const double gc = gv[c], bc = bv[c];
        for (std::size_t k = ci * T; k < (ci + 1) * T; ++k) {
          const double xh = (src[k] - m) * is;
          xhat[off + k] = static_cast<S>(xh);
          out[off + k] = static_cast<S>(gc * xh + bc);
        }
      }
    }
  const std::size_t ix = x.id, ig = gamma.id, ibt = beta.id;
  return t.push(
      "group_norm", x.shape(), std::move(out), detail::any_grad(t, {ix, ig, ibt}),
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& gam = tp.value(ig);
        if (tp.requires_grad(ig) || tp.requires_grad(ibt)) {
          std::vector<double> dg(C, 0.0), db(C, 0.0);
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (bi * C + c) * T;
              for (std::size_t k = 0; k < T; ++k) {
                dg[c] += static_cast<double>(g[off + k]) * xhat[off + k];
                db[c] += g[off + k];
              }
            }
          if (tp.requires_grad(ig)) {
            auto& d = tp.grad(ig);
            for (std::size_t c = 0; c < C; ++c) d[c] += static_cast<S>(dg[c]);
          }
          if (tp.requires_grad(ibt)) {
            auto& d = tp.grad(ibt);
            for (std::size_t c = 0; c < C; ++c) d[c] += static_cast<S>(db[c]);
          }
        }
        if (tp.requires_grad(ix)) {
          auto& dx = tp.grad(ix);
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t grp = 0; grp < groups; ++grp) {
              const std::size_t off = (bi * C + grp * cpg) * T;
              double mean_d = 0.0, mean_dx = 0.0;
              for (std::size_t ci = 0; ci < cpg; ++ci) {
                const double gc = gam[grp * cpg + ci];
                for (std::size_t k = ci * T; k < (ci + 1) * T; ++k) {
                  const double dxh = g[off + k] * gc;
                  mean_d += dxh;
                  mean_dx += dxh * xhat[off + k];
                }
              }
              mean_d /= static_cast<double>(n);
              mean_dx /= static_cast<double>(n);
              const double is = inv_std[bi * groups + grp];
              for (std::size_t ci = 0; ci < cpg; ++ci) {
                const double gc = gam[grp * cpg + ci];
                for (std::size_t k = ci * T; k < (ci + 1) * T; ++k) {
                  const double dxh = g[off + k] * gc;
                  dx[off + k] += static_cast<S>(is * (dxh - mean_d - xhat[off + k] * mean_dx));
                }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Graph evaluation

/// A computation description: maps bound parameters and an input node to an
/// output node. An empty Graph is the identity.
template <typename S>
using Graph = std::function<Var<S>(Tape<S>&, const std::vector<Var<S>>&, Var<S>)>;

template <typename S>
Var<S> evaluate_graph(Tape<S>& tape, const std::vector<ParamTensorT<S>>& params,
                      const Shape& input_shape, std::vector<S> input, const Graph<S>& graph) {
  auto vars = tape.bind(params);
  Var<S> x = tape.constant(input_shape, std::move(input), "input");
  if (!graph) return x;
  return graph(tape, vars, x);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  void reset() {
    step = 0;
    first_moment.clear();
    second_moment.clear();
  }
};

/// One bias-corrected Adam update, in place. Moments are created lazily on
/// the first step.
template <typename S>
void adam_step(std::vector<ParamTensorT<S>>& params, const GradientSetT<S>& grads,
               AdamState& state) {
  if (grads.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "adam_step: " + std::to_string(grads.size()) +
                                              " gradients for " + std::to_string(params.size()) +
                                              " parameters");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.values.size(), 0.0);
      state.second_moment.emplace_back(p.values.size(), 0.0);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].values.size() ||
        state.first_moment[i].size() != params[i].values.size()) {
      throw Error(ErrorCode::ShapeMismatch, "adam_step: gradient for " + params[i].name +
                                                " has " + std::to_string(grads[i].size()) +
                                                " values");
    }
  }
  const auto& hp = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    auto& p = params[i].values;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k];
      m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
      v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
      const double step = hp.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + hp.eps);
      p[k] = static_cast<S>(p[k] - step);
    }
  }
}

}  // namespace rio::diff
