#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dmvi/tensor.hpp"

namespace dmvi {

class Tape;

// Lightweight handle into a Tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape over rank-2 tensors. Nodes are appended in evaluation
// order, so reverse node order is a valid topological order for backward.
// One backward pass per tape; reset() reuses the node storage.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor v) { return emplace(std::move(v), true, nullptr); }
  Var constant(Tensor v) { return emplace(std::move(v), false, nullptr); }
  Var scalar_const(double v) { return constant(Tensor::scalar(v)); }

  Var emplace(Tensor val, bool requires_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(val), Tensor(), requires_grad, std::move(back)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(int id, std::function<void(Tape&)> back) {
    nodes_[id].back = std::move(back);
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(int id) const { return nodes_[id].value; }

  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer, allocated (zero) on first touch.
  Tensor& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Gradient after backward(); zeros if the node was never reached.
  Tensor gradient(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root) {
    if (value(root).size() != 1)
      throw ConfigError("backward() root must be a scalar");
    grad_buf(root.id).values[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.size() != 0 && n.back) n.back(*this);
    }
  }

  void reset() { nodes_.clear(); }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
};

namespace detail {

// Broadcast rule: each dimension must match or be 1.
inline void broadcast_shape(const Tensor& a, const Tensor& b, std::size_t& r,
                            std::size_t& c) {
  r = std::max(a.rows(), b.rows());
  c = std::max(a.cols(), b.cols());
  if ((a.rows() != r && a.rows() != 1) || (b.rows() != r && b.rows() != 1) ||
      (a.cols() != c && a.cols() != 1) || (b.cols() != c && b.cols() != 1))
    throw ConfigError("incompatible shapes for broadcast op");
}

inline double bcast_at(const Tensor& t, std::size_t i, std::size_t j) {
  return t.at(t.rows() == 1 ? 0 : i, t.cols() == 1 ? 0 : j);
}

// Accumulate g into a gradient buffer, summing over broadcast dimensions.
inline void accum_broadcast(Tensor& dst, const Tensor& g) {
  std::size_t r = dst.rows(), c = dst.cols();
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j)
      dst.at(r == 1 ? 0 : i, c == 1 ? 0 : j) += g.at(i, j);
}

// Elementwise binary op with broadcasting. dfa/dfb give the partial
// derivatives with respect to the two operands at (x, y).
template <class Fwd, class DfA, class DfB>
Var binary_op(Var a, Var b, Fwd fwd, DfA dfa, DfB dfb) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  const Tensor& bv = tp.value(b);
  std::size_t R, C;
  broadcast_shape(av, bv, R, C);
  Tensor out(R, C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      out.at(i, j) = fwd(bcast_at(av, i, j), bcast_at(bv, i, j));
  bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id, bid = b.id;
    tp.set_back(self, [self, aid, bid, dfa, dfb](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& va = t.value(aid);
      const Tensor& vb = t.value(bid);
      if (t.needs_grad(aid)) {
        Tensor contrib(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j)
            contrib.at(i, j) =
                g.at(i, j) * dfa(bcast_at(va, i, j), bcast_at(vb, i, j));
        accum_broadcast(t.grad_buf(aid), contrib);
      }
      if (t.needs_grad(bid)) {
        Tensor contrib(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j)
            contrib.at(i, j) =
                g.at(i, j) * dfb(bcast_at(va, i, j), bcast_at(vb, i, j));
        accum_broadcast(t.grad_buf(bid), contrib);
      }
    });
  }
  return v;
}

// Elementwise unary op. df gives dy/dx at (x, y).
template <class Fwd, class Df>
Var unary_op(Var a, Fwd fwd, Df df) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  Tensor out(av.rows(), av.cols());
  for (std::size_t k = 0; k < av.size(); ++k) out.values[k] = fwd(av.values[k]);
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, df](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& va = t.value(aid);
      const Tensor& vy = t.value(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t k = 0; k < va.size(); ++k)
        da.values[k] += g.values[k] * df(va.values[k], vy.values[k]);
    });
  }
  return v;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var mul_scalar(Var a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

inline Var neg(Var a) { return mul_scalar(a, -1.0); }

inline Var exp(Var a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return detail::unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// gelu, tanh form: 0.5 x (1 + tanh(k (x + 0.044715 x^3))), k = sqrt(2/pi)
inline Var gelu(Var a) {
  constexpr double k = 0.7978845608028654;
  constexpr double c3 = 0.044715;
  return detail::unary_op(
      a,
      [](double x) {
        double u = k * (x + c3 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double x, double) {
        double u = k * (x + c3 * x * x * x);
        double th = std::tanh(u);
        double sech2 = 1.0 - th * th;
        return 0.5 * (1.0 + th) + 0.5 * x * sech2 * k * (1.0 + 3.0 * c3 * x * x);
      });
}

inline Var softplus(Var a) {
  return detail::unary_op(
      a,
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// Gradient passes through only strictly inside [lo, hi].
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var matmul(Var a, Var b) {
  Tape& tp = *a.tape;
  const Tensor& A = tp.value(a);
  const Tensor& B = tp.value(b);
  if (A.cols() != B.rows()) throw ConfigError("matmul inner dimension mismatch");
  std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      double ail = A.at(i, l);
      const double* brow = &B.values[l * m];
      double* crow = &out.values[i * m];
      for (std::size_t j = 0; j < m; ++j) crow[j] += ail * brow[j];
    }
  bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id, bid = b.id;
    tp.set_back(self, [self, aid, bid, n, k, m](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& A2 = t.value(aid);
      const Tensor& B2 = t.value(bid);
      if (t.needs_grad(aid)) {
        Tensor& da = t.grad_buf(aid);  // dA = G B^T
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            const double* grow = &g.values[i * m];
            const double* brow = &B2.values[l * m];
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
            da.at(i, l) += s;
          }
      }
      if (t.needs_grad(bid)) {
        Tensor& db = t.grad_buf(bid);  // dB = A^T G
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            double ail = A2.at(i, l);
            const double* grow = &g.values[i * m];
            double* drow = &db.values[l * m];
            for (std::size_t j = 0; j < m; ++j) drow[j] += ail * grow[j];
          }
      }
    });
  }
  return v;
}

inline Var sum(Var a) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  double s = 0.0;
  for (double x : av.values) s += x;
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(Tensor::scalar(s), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid](Tape& t) {
      double g = t.grad_buf(self).values[0];
      Tensor& da = t.grad_buf(aid);
      for (double& x : da.values) x += g;
    });
  }
  return v;
}

inline Var mean(Var a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.tape->value(a).size()));
}

// (n x m) -> (n x 1)
inline Var row_sum(Var a) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  std::size_t n = av.rows(), m = av.cols();
  Tensor out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += av.at(i, j);
    out.values[i] = s;
  }
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, n, m](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) da.at(i, j) += g.values[i];
    });
  }
  return v;
}

// Row-wise log(sum_j exp(a_ij)), max-shifted. (n x K) -> (n x 1)
inline Var logsumexp_cols(Var a) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  std::size_t n = av.rows(), K = av.cols();
  Tensor out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = av.at(i, 0);
    for (std::size_t j = 1; j < K; ++j) mx = std::fmax(mx, av.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += std::exp(av.at(i, j) - mx);
    out.values[i] = mx + std::log(s);
  }
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, n, K](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& va = t.value(aid);
      const Tensor& vy = t.value(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < K; ++j)
          da.at(i, j) += g.values[i] * std::exp(va.at(i, j) - vy.values[i]);
    });
  }
  return v;
}

// Row-wise standardization (population moments), no affine part.
inline Var layer_norm_rows(Var a, double eps = 1e-12) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  std::size_t n = av.rows(), m = av.cols();
  Tensor out(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += av.at(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double d = av.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = (av.at(i, j) - mu) * inv;
  }
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, n, m, inv_std](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      const Tensor& y = t.value(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i) {
        double gm = 0.0, gym = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          gm += g.at(i, j);
          gym += g.at(i, j) * y.at(i, j);
        }
        gm /= static_cast<double>(m);
        gym /= static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j)
          da.at(i, j) += inv_std[i] * (g.at(i, j) - gm - y.at(i, j) * gym);
      }
    });
  }
  return v;
}

inline Var concat_cols(Var a, Var b) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  const Tensor& bv = tp.value(b);
  if (av.rows() != bv.rows()) throw ConfigError("concat_cols row mismatch");
  std::size_t n = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = av.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = bv.at(i, j);
  }
  bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id, bid = b.id;
    tp.set_back(self, [self, aid, bid, n, ca, cb](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      if (t.needs_grad(aid)) {
        Tensor& da = t.grad_buf(aid);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca; ++j) da.at(i, j) += g.at(i, j);
      }
      if (t.needs_grad(bid)) {
        Tensor& db = t.grad_buf(bid);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb; ++j) db.at(i, j) += g.at(i, ca + j);
      }
    });
  }
  return v;
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  if (c1 > av.cols() || c0 >= c1) throw ConfigError("slice_cols out of range");
  std::size_t n = av.rows(), w = c1 - c0;
  Tensor out(n, w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, c0 + j);
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, n, c0, w](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) da.at(i, c0 + j) += g.at(i, j);
    });
  }
  return v;
}

inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  if (r1 > av.rows() || r0 >= r1) throw ConfigError("slice_rows out of range");
  std::size_t h = r1 - r0, m = av.cols();
  Tensor out(h, m);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = av.at(r0 + i, j);
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, h, m, r0](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < m; ++j) da.at(r0 + i, j) += g.at(i, j);
    });
  }
  return v;
}

inline Var reverse_cols(Var a) {
  Tape& tp = *a.tape;
  const Tensor& av = tp.value(a);
  std::size_t n = av.rows(), m = av.cols();
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = av.at(i, m - 1 - j);
  bool req = tp.needs_grad(a.id);
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id, aid = a.id;
    tp.set_back(self, [self, aid, n, m](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      Tensor& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) da.at(i, m - 1 - j) += g.at(i, j);
    });
  }
  return v;
}

// Stack n scalar vars into an (n x 1) column.
inline Var stack_scalars(const std::vector<Var>& xs) {
  Tape& tp = *xs.front().tape;
  Tensor out(xs.size(), 1);
  bool req = false;
  std::vector<int> ids(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.values[i] = tp.value(xs[i]).item();
    ids[i] = xs[i].id;
    req = req || tp.needs_grad(ids[i]);
  }
  Var v = tp.emplace(std::move(out), req, nullptr);
  if (req) {
    int self = v.id;
    tp.set_back(self, [self, ids](Tape& t) {
      const Tensor& g = t.grad_buf(self);
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (t.needs_grad(ids[i])) t.grad_buf(ids[i]).values[0] += g.values[i];
    });
  }
  return v;
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return mul_scalar(a, c); }
inline Var operator*(Var a, double c) { return mul_scalar(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, Var a) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, Var a) { return add_scalar(neg(a), c); }

}  // namespace dmvi
