#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "skeleguide/errors.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace skeleguide::ag {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph recording on this thread while alive.
struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Flushes subnormal floats to zero on this thread while alive. Small
/// gradients otherwise fall into the subnormal range and slow matrix products
/// by an order of magnitude.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);  // FTZ | DAZ
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

template <class T>
struct Node {
  Mat<T> value;
  Mat<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat<T>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  /// Zero-initialized gradient storage for in-place partial accumulation.
  Mat<T>& grad_buffer() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
    return grad;
  }
  template <class Expr>
  void accumulate_expr(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  const Mat<T>& value() const { return n_->value; }
  Mat<T>& mutable_value() { return n_->value; }
  /// Gradient; zero-filled when nothing has flowed in.
  Mat<T> grad() const {
    if (n_->grad.size() == 0) return Mat<T>::Zero(n_->value.rows(), n_->value.cols());
    return n_->grad;
  }
  bool has_grad() const { return n_->grad.size() != 0; }
  void zero_grad() { n_->grad.resize(0, 0); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool on) { n_->requires_grad = on; }
  Eigen::Index rows() const { return n_->value.rows(); }
  Eigen::Index cols() const { return n_->value.cols(); }
  T item() const { return n_->value(0, 0); }
  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }
  explicit operator bool() const { return static_cast<bool>(n_); }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <class T>
Var<T> constant(Mat<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <class T>
Var<T> leaf(Mat<T> value, bool requires_grad = true) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var<T>(std::move(n));
}

/// A copy of the value that is cut off from the graph.
template <class T>
Var<T> detach(const Var<T>& x) {
  return constant<T>(x.value());
}

namespace detail {

template <class T, class Fn>
Var<T> make_result(Mat<T> value, std::initializer_list<Var<T>> inputs, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& v : inputs) n->parents.push_back(v.ptr());
      n->backward = std::forward<Fn>(backward);
    }
  }
  return Var<T>(std::move(n));
}

template <class T, class Fn>
Var<T> make_result(Mat<T> value, const std::vector<Var<T>>& inputs, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& v : inputs) n->parents.push_back(v.ptr());
      n->backward = std::forward<Fn>(backward);
    }
  }
  return Var<T>(std::move(n));
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

/// Reverse sweep from a scalar. Leaf gradients accumulate; call zero_grad between steps.
template <class T>
void backward(const Var<T>& loss) {
  detail::require(loss.rows() == 1 && loss.cols() == 1, "backward expects a scalar");
  if (!loss.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // intermediate gradients are not needed after the sweep
  for (Node<T>* n : order)
    if (n->backward) n->grad.resize(0, 0);
}

// ---- elementwise ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result<T>(a.value() + b.value(), {a, b}, [pa, pb](Node<T>& n) {
    pa->accumulate(n.grad);
    pb->accumulate(n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result<T>(a.value() - b.value(), {a, b}, [pa, pb](Node<T>& n) {
    pa->accumulate(n.grad);
    pb->accumulate_expr(-n.grad);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result<T>(a.value().cwiseProduct(b.value()), {a, b}, [pa, pb](Node<T>& n) {
    pa->accumulate_expr(n.grad.cwiseProduct(pb->value));
    pb->accumulate_expr(n.grad.cwiseProduct(pa->value));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  auto pa = a.ptr();
  return detail::make_result<T>(a.value() * s, {a}, [pa, s](Node<T>& n) { pa->accumulate_expr(n.grad * s); });
}

/// x + row, with row [1 x cols] broadcast over every row of x.
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  detail::require(row.rows() == 1 && row.cols() == x.cols(), "add_row: shape mismatch");
  auto px = x.ptr(), pr = row.ptr();
  Mat<T> out = x.value().rowwise() + row.value().row(0);
  return detail::make_result<T>(std::move(out), {x, row}, [px, pr](Node<T>& n) {
    px->accumulate(n.grad);
    pr->accumulate_expr(n.grad.colwise().sum());
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  auto px = x.ptr();
  Mat<T> sig = (T(1) + (-x.value().array()).exp()).inverse().matrix();
  Mat<T> out = x.value().cwiseProduct(sig);
  return detail::make_result<T>(std::move(out), {x}, [px, sig = std::move(sig)](Node<T>& n) {
    const auto s = sig.array();
    px->accumulate_expr((n.grad.array() * s * (T(1) + px->value.array() * (T(1) - s))).matrix());
  });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& x) {
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  auto px = x.ptr();
  const auto v = x.value().array();
  Mat<T> th = (c * (v + k * v.cube())).tanh().matrix();
  Mat<T> out = (T(0.5) * v * (T(1) + th.array())).matrix();
  return detail::make_result<T>(std::move(out), {x}, [px, th = std::move(th)](Node<T>& n) {
    const auto v = px->value.array();
    const auto t = th.array();
    px->accumulate_expr(
        (n.grad.array() * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * c * (T(1) + T(3) * k * v.square())))
            .matrix());
  });
}

// ---- linear algebra ----

/// x W^T for x [n x k], W [m x k].
template <class T>
Var<T> matmul_nt(const Var<T>& x, const Var<T>& w) {
  detail::require(x.cols() == w.cols(), "matmul_nt: inner dimension mismatch (" + std::to_string(x.cols()) +
                                            " vs " + std::to_string(w.cols()) + ")");
  auto px = x.ptr(), pw = w.ptr();
  Mat<T> out = x.value() * w.value().transpose();
  return detail::make_result<T>(std::move(out), {x, w}, [px, pw](Node<T>& n) {
    if (px->requires_grad) px->accumulate_expr(n.grad * pw->value);
    if (pw->requires_grad) pw->accumulate_expr(n.grad.transpose() * px->value);
  });
}

/// x W^T + b, W [out x in], b [1 x out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require(x.cols() == w.cols(), "linear: input width " + std::to_string(x.cols()) + " does not match weight " +
                                            std::to_string(w.cols()));
  detail::require(b.rows() == 1 && b.cols() == w.rows(), "linear: bias shape mismatch");
  Mat<T> out(x.rows(), w.rows());
  out.noalias() = x.value() * w.value().transpose();
  out.rowwise() += b.value().row(0);
  auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
  return detail::make_result<T>(std::move(out), {x, w, b}, [px, pw, pb](Node<T>& n) {
    if (px->requires_grad) px->accumulate_expr(n.grad * pw->value);
    if (pw->requires_grad) pw->accumulate_expr(n.grad.transpose() * px->value);
    if (pb->requires_grad) pb->accumulate_expr(n.grad.colwise().sum());
  });
}

// ---- per-group broadcasting ----
// A tensor of B*N rows holds B groups (samples) of N consecutive rows each;
// a [B x cols] tensor supplies one row per group.

template <class T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6)) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  Mat<T> xhat(rows, cols);
  std::vector<T> inv(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const T mean = row.mean();
    const T var = (row.array() - mean).square().mean();
    inv[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mean) * inv[static_cast<std::size_t>(r)];
  }
  auto px = x.ptr();
  Mat<T> out = xhat;
  return detail::make_result<T>(std::move(out), {x}, [px, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& n) {
    Mat<T> g(n.grad.rows(), n.grad.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const auto gr = n.grad.row(r).array();
      const auto xr = xhat.row(r).array();
      g.row(r) = inv[static_cast<std::size_t>(r)] * (gr - gr.mean() - xr * (gr * xr).mean());
    }
    px->accumulate(g);
  });
}

/// x * (1 + scale_g) + shift_g, with shift/scale [groups x cols].
template <class T>
Var<T> modulate(const Var<T>& x, const Var<T>& shift, const Var<T>& scl, int groups) {
  detail::require(groups > 0 && x.rows() % groups == 0, "modulate: rows not divisible by groups");
  detail::require(shift.rows() == groups && scl.rows() == groups && shift.cols() == x.cols() &&
                      scl.cols() == x.cols(),
                  "modulate: shape mismatch");
  const Eigen::Index per = x.rows() / groups;
  Mat<T> out(x.rows(), x.cols());
  for (int g = 0; g < groups; ++g) {
    const auto s1 = (scl.value().row(g).array() + T(1)).eval();
    out.middleRows(g * per, per) =
        (x.value().middleRows(g * per, per).array().rowwise() * s1).rowwise() + shift.value().row(g).array();
  }
  auto px = x.ptr(), psh = shift.ptr(), psc = scl.ptr();
  return detail::make_result<T>(std::move(out), {x, shift, scl}, [px, psh, psc, groups, per](Node<T>& n) {
    Mat<T> gx(n.grad.rows(), n.grad.cols()), gsh(groups, n.grad.cols()), gsc(groups, n.grad.cols());
    for (int g = 0; g < groups; ++g) {
      const auto gb = n.grad.middleRows(g * per, per);
      gx.middleRows(g * per, per) = gb.array().rowwise() * (psc->value.row(g).array() + T(1));
      gsh.row(g) = gb.colwise().sum();
      gsc.row(g) = gb.cwiseProduct(px->value.middleRows(g * per, per)).colwise().sum();
    }
    px->accumulate(gx);
    psh->accumulate(gsh);
    psc->accumulate(gsc);
  });
}

/// x + gate_g * y, with gate [groups x cols].
template <class T>
Var<T> gated_residual(const Var<T>& x, const Var<T>& gate, const Var<T>& y, int groups) {
  detail::require(x.rows() == y.rows() && x.cols() == y.cols(), "gated_residual: shape mismatch");
  detail::require(groups > 0 && x.rows() % groups == 0 && gate.rows() == groups && gate.cols() == x.cols(),
                  "gated_residual: gate shape mismatch");
  const Eigen::Index per = x.rows() / groups;
  Mat<T> out = x.value();
  for (int g = 0; g < groups; ++g)
    out.middleRows(g * per, per).array() += y.value().middleRows(g * per, per).array().rowwise() * gate.value().row(g).array();
  auto px = x.ptr(), pg = gate.ptr(), py = y.ptr();
  return detail::make_result<T>(std::move(out), {x, gate, y}, [px, pg, py, groups, per](Node<T>& n) {
    px->accumulate(n.grad);
    if (py->requires_grad) {
      Mat<T> gy(n.grad.rows(), n.grad.cols());
      for (int g = 0; g < groups; ++g)
        gy.middleRows(g * per, per) = n.grad.middleRows(g * per, per).array().rowwise() * pg->value.row(g).array();
      py->accumulate(gy);
    }
    if (pg->requires_grad) {
      Mat<T> gg(groups, n.grad.cols());
      for (int g = 0; g < groups; ++g)
        gg.row(g) = n.grad.middleRows(g * per, per).cwiseProduct(py->value.middleRows(g * per, per)).colwise().sum();
      pg->accumulate(gg);
    }
  });
}

template <class T>
Var<T> col_slice(const Var<T>& x, Eigen::Index start, Eigen::Index len) {
  detail::require(start >= 0 && len >= 0 && start + len <= x.cols(), "col_slice: out of range");
  auto px = x.ptr();
  Mat<T> out = x.value().middleCols(start, len);
  return detail::make_result<T>(std::move(out), {x}, [px, start, len](Node<T>& n) {
    if (px->requires_grad) px->grad_buffer().middleCols(start, len) += n.grad;
  });
}

/// Interleaves parts group by group: output group g is [part0_g; part1_g; ...].
template <class T>
Var<T> concat_groups(const std::vector<Var<T>>& parts, int groups) {
  detail::require(!parts.empty() && groups > 0, "concat_groups: empty input");
  const Eigen::Index cols = parts[0].cols();
  std::vector<Eigen::Index> per;
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols && p.rows() % groups == 0, "concat_groups: shape mismatch");
    per.push_back(p.rows() / groups);
    total += p.rows() / groups;
  }
  Mat<T> out(total * groups, cols);
  for (int g = 0; g < groups; ++g) {
    Eigen::Index off = g * total;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      out.middleRows(off, per[i]) = parts[i].value().middleRows(g * per[i], per[i]);
      off += per[i];
    }
  }
  std::vector<std::shared_ptr<Node<T>>> ps;
  for (const auto& p : parts) ps.push_back(p.ptr());
  return detail::make_result<T>(std::move(out), parts, [ps, per, total, groups](Node<T>& n) {
    Eigen::Index start = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->requires_grad) {
        Mat<T> g(per[i] * groups, n.grad.cols());
        for (int k = 0; k < groups; ++k) g.middleRows(k * per[i], per[i]) = n.grad.middleRows(k * total + start, per[i]);
        ps[i]->accumulate(g);
      }
      start += per[i];
    }
  });
}

/// Rows [offset, offset+len) of every group.
template <class T>
Var<T> slice_groups(const Var<T>& x, int groups, Eigen::Index offset, Eigen::Index len) {
  detail::require(groups > 0 && x.rows() % groups == 0, "slice_groups: rows not divisible by groups");
  const Eigen::Index per = x.rows() / groups;
  detail::require(offset >= 0 && len >= 0 && offset + len <= per, "slice_groups: out of range");
  Mat<T> out(len * groups, x.cols());
  for (int g = 0; g < groups; ++g) out.middleRows(g * len, len) = x.value().middleRows(g * per + offset, len);
  auto px = x.ptr();
  return detail::make_result<T>(std::move(out), {x}, [px, groups, per, offset, len](Node<T>& n) {
    if (!px->requires_grad) return;
    Mat<T>& g = px->grad_buffer();
    for (int k = 0; k < groups; ++k) g.middleRows(k * per + offset, len) += n.grad.middleRows(k * len, len);
  });
}

/// Rows of table selected by ids.
template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: index " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  auto pt = table.ptr();
  return detail::make_result<T>(std::move(out), {table}, [pt, ids](Node<T>& n) {
    if (!pt->requires_grad) return;
    Mat<T>& g = pt->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

/// Joint multi-head softmax attention within each group. q, k, v are
/// [groups*N x D]; heads split D into equal column blocks.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int groups, int heads,
                 Mat<T>* probs_out = nullptr) {
  detail::require(q.rows() == k.rows() && q.rows() == v.rows() && q.cols() == k.cols() && q.cols() == v.cols(),
                  "attention: shape mismatch");
  detail::require(groups > 0 && q.rows() % groups == 0 && q.rows() > 0, "attention: empty or ragged groups");
  detail::require(heads > 0 && q.cols() % heads == 0, "attention: width not divisible by heads");
  const Eigen::Index n = q.rows() / groups, dh = q.cols() / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  // probabilities stacked as [(g*heads + h)*n + i, j]
  Mat<T> probs(static_cast<Eigen::Index>(groups) * heads * n, n);
  Mat<T> out(q.rows(), q.cols());
  for (int g = 0; g < groups; ++g)
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.value().block(g * n, h * dh, n, dh);
      const auto kb = k.value().block(g * n, h * dh, n, dh);
      const auto vb = v.value().block(g * n, h * dh, n, dh);
      auto p = probs.middleRows((static_cast<Eigen::Index>(g) * heads + h) * n, n);
      p.noalias() = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = p.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      out.block(g * n, h * dh, n, dh).noalias() = p * vb;
    }
  if (probs_out) *probs_out = probs;
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return detail::make_result<T>(
      std::move(out), {q, k, v}, [pq, pk, pv, probs = std::move(probs), groups, heads, n, dh, inv_sqrt](Node<T>& node) {
        Mat<T> gq = Mat<T>::Zero(pq->value.rows(), pq->value.cols());
        Mat<T> gk = Mat<T>::Zero(gq.rows(), gq.cols());
        Mat<T> gv = Mat<T>::Zero(gq.rows(), gq.cols());
        Mat<T> dp(n, n);
        for (int g = 0; g < groups; ++g)
          for (int h = 0; h < heads; ++h) {
            const auto p = probs.middleRows((static_cast<Eigen::Index>(g) * heads + h) * n, n);
            const auto go = node.grad.block(g * n, h * dh, n, dh);
            const auto qb = pq->value.block(g * n, h * dh, n, dh);
            const auto kb = pk->value.block(g * n, h * dh, n, dh);
            const auto vb = pv->value.block(g * n, h * dh, n, dh);
            gv.block(g * n, h * dh, n, dh).noalias() = p.transpose() * go;
            dp.noalias() = go * vb.transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
              const T dot = dp.row(i).dot(p.row(i));
              dp.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
            }
            dp *= inv_sqrt;
            gq.block(g * n, h * dh, n, dh).noalias() = dp * kb;
            gk.block(g * n, h * dh, n, dh).noalias() = dp.transpose() * qb;
          }
        pq->accumulate(gq);
        pk->accumulate(gk);
        pv->accumulate(gv);
      });
}

// ---- reductions ----

/// Mean of squared differences, as a 1x1 value.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mse: shape mismatch");
  const T count = static_cast<T>(a.value().size());
  Mat<T> diff = a.value() - b.value();
  Mat<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / count;
  auto pa = a.ptr(), pb = b.ptr();
  return detail::make_result<T>(std::move(out), {a, b}, [pa, pb, diff = std::move(diff), count](Node<T>& n) {
    const T s = n.grad(0, 0) * T(2) / count;
    pa->accumulate_expr(diff * s);
    pb->accumulate_expr(diff * (-s));
  });
}

/// sum(x .* w) for a constant weight matrix; handy for probing gradients.
template <class T>
Var<T> dot_const(const Var<T>& x, const Mat<T>& w) {
  detail::require(x.rows() == w.rows() && x.cols() == w.cols(), "dot_const: shape mismatch");
  Mat<T> out(1, 1);
  out(0, 0) = x.value().cwiseProduct(w).sum();
  auto px = x.ptr();
  return detail::make_result<T>(std::move(out), {x}, [px, w](Node<T>& n) { px->accumulate_expr(w * n.grad(0, 0)); });
}

}  // namespace skeleguide::ag
