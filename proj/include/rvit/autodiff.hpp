#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rvit/tensor.hpp"

namespace rvit {
namespace ag {

// Reverse-mode tape over 2-D tensors. Graphs are built per sample, so ops
// never carry a batch dimension; parallelism happens across samples.
template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  std::vector<std::shared_ptr<Node>> prev;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (!grad.defined()) {
      grad = Tensor<S>::zeros(value.shape());
    }
  }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
Var<S> make_var(Tensor<S> value) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  return n;
}

// Leaf over an existing tensor (parameter or constant). The value buffer is
// shared, not copied.
template <typename S>
Var<S> leaf(const Tensor<S>& value) {
  return make_var(value);
}

// When grad mode is off, ops compute values through the identical numeric
// path but record no tape. Used by samplers and evaluation.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename S>
void backward(const Var<S>& root) {
  // Topological order by iterative DFS.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->prev.size()) {
      Node<S>* child = node->prev[idx++].get();
      if (seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  if (root->value.numel() != 1) {
    throw std::logic_error("backward() expects a scalar root");
  }
  root->grad.fill(S(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

namespace detail {

template <typename S>
void check_2d(const Tensor<S>& t, const char* what) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected 2-D tensor, got " + t.shape_str());
  }
}

}  // namespace detail

// ---- arithmetic ----

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("add: shape mismatch " + a->value.shape_str() + " vs " +
                                b->value.shape_str());
  }
  Tensor<S> out = a->value.clone();
  out.add_(b->value);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a, b};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  Node<S>* bp = b.get();
  n->backward_fn = [np, ap, bp]() {
    ap->ensure_grad();
    bp->ensure_grad();
    ap->grad.add_(np->grad);
    bp->grad.add_(np->grad);
  };
  return n;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("sub: shape mismatch");
  }
  Tensor<S> out = a->value.clone();
  {
    S* o = out.data();
    const S* bb = b->value.data();
    for (size_t i = 0; i < out.numel(); ++i) o[i] -= bb[i];
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a, b};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  Node<S>* bp = b.get();
  n->backward_fn = [np, ap, bp]() {
    ap->ensure_grad();
    bp->ensure_grad();
    ap->grad.add_(np->grad);
    S* bg = bp->grad.data();
    const S* g = np->grad.data();
    for (size_t i = 0; i < np->grad.numel(); ++i) bg[i] -= g[i];
  };
  return n;
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a->value.clone();
  out.scale_(c);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  n->backward_fn = [np, ap, c]() {
    ap->ensure_grad();
    S* g = ap->grad.data();
    const S* og = np->grad.data();
    for (size_t i = 0; i < np->grad.numel(); ++i) g[i] += c * og[i];
  };
  return n;
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("mul: shape mismatch");
  }
  Tensor<S> out = a->value.clone();
  {
    S* o = out.data();
    const S* bb = b->value.data();
    for (size_t i = 0; i < out.numel(); ++i) o[i] *= bb[i];
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a, b};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  Node<S>* bp = b.get();
  n->backward_fn = [np, ap, bp]() {
    ap->ensure_grad();
    bp->ensure_grad();
    const S* g = np->grad.data();
    const S* av = ap->value.data();
    const S* bv = bp->value.data();
    S* ga = ap->grad.data();
    S* gb = bp->grad.data();
    for (size_t i = 0; i < np->grad.numel(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  };
  return n;
}

// ---- matmul / linear ----

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::check_2d(a->value, "matmul lhs");
  detail::check_2d(b->value, "matmul rhs");
  if (a->value.cols() != b->value.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ: " + a->value.shape_str() +
                                " * " + b->value.shape_str());
  }
  Tensor<S> out({a->value.rows(), b->value.cols()});
  out.mat().noalias() = a->value.mat() * b->value.mat();
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a, b};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  Node<S>* bp = b.get();
  n->backward_fn = [np, ap, bp]() {
    ap->ensure_grad();
    bp->ensure_grad();
    ap->grad.mat().noalias() += np->grad.mat() * bp->value.mat().transpose();
    bp->grad.mat().noalias() += ap->value.mat().transpose() * np->grad.mat();
  };
  return n;
}

// x[m×k] * w[k×n] + bias[1×n] broadcast over rows.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  detail::check_2d(x->value, "linear input");
  if (x->value.cols() != w->value.rows()) {
    throw std::invalid_argument("linear: input/weight mismatch: " + x->value.shape_str() + " * " +
                                w->value.shape_str());
  }
  if (bias->value.rank() != 2 || bias->value.rows() != 1 || bias->value.cols() != w->value.cols()) {
    throw std::invalid_argument("linear: bias must be [1 x out]");
  }
  Tensor<S> out({x->value.rows(), w->value.cols()});
  out.mat().noalias() = x->value.mat() * w->value.mat();
  out.mat().rowwise() += bias->value.mat().row(0);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x, w, bias};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Node<S>* wp = w.get();
  Node<S>* bp = bias.get();
  n->backward_fn = [np, xp, wp, bp]() {
    xp->ensure_grad();
    wp->ensure_grad();
    bp->ensure_grad();
    xp->grad.mat().noalias() += np->grad.mat() * wp->value.mat().transpose();
    wp->grad.mat().noalias() += xp->value.mat().transpose() * np->grad.mat();
    bp->grad.mat().row(0) += np->grad.mat().colwise().sum();
  };
  return n;
}

// x[m×k] + r[1×k] broadcast over rows.
template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& r) {
  detail::check_2d(x->value, "add_rowvec input");
  if (r->value.rank() != 2 || r->value.rows() != 1 || r->value.cols() != x->value.cols()) {
    throw std::invalid_argument("add_rowvec: row vector must be [1 x cols]");
  }
  Tensor<S> out = x->value.clone();
  out.mat().rowwise() += r->value.mat().row(0);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x, r};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Node<S>* rp = r.get();
  n->backward_fn = [np, xp, rp]() {
    xp->ensure_grad();
    rp->ensure_grad();
    xp->grad.add_(np->grad);
    rp->grad.mat().row(0) += np->grad.mat().colwise().sum();
  };
  return n;
}

// ---- activations ----

template <typename S>
Var<S> gelu(const Var<S>& x) {
  // Exact (erf) formulation.
  Tensor<S> out = x->value.clone();
  {
    S* o = out.data();
    for (size_t i = 0; i < out.numel(); ++i) {
      const S v = o[i];
      o[i] = S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2)));
    }
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  n->backward_fn = [np, xp]() {
    xp->ensure_grad();
    const S* v = xp->value.data();
    const S* g = np->grad.data();
    S* gx = xp->grad.data();
    constexpr S inv_sqrt_2pi = S(0.3989422804014326779);
    for (size_t i = 0; i < np->grad.numel(); ++i) {
      const S cdf = S(0.5) * (S(1) + std::erf(v[i] * S(M_SQRT1_2)));
      const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v[i] * v[i]);
      gx[i] += g[i] * (cdf + v[i] * pdf);
    }
  };
  return n;
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> out = x->value.clone();
  {
    S* o = out.data();
    for (size_t i = 0; i < out.numel(); ++i) o[i] = S(1) / (S(1) + std::exp(-o[i]));
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  n->backward_fn = [np, xp]() {
    xp->ensure_grad();
    const S* y = np->value.data();
    const S* g = np->grad.data();
    S* gx = xp->grad.data();
    for (size_t i = 0; i < np->grad.numel(); ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
  };
  return n;
}

// ---- normalization ----

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  detail::check_2d(x->value, "layer_norm input");
  const int rows = x->value.rows();
  const int cols = x->value.cols();
  if (gamma->value.cols() != cols || beta->value.cols() != cols) {
    throw std::invalid_argument("layer_norm: gamma/beta must be [1 x cols]");
  }
  Tensor<S> out({rows, cols});
  Tensor<S> xhat({rows, cols});
  Tensor<S> inv_std({rows, 1});
  for (int r = 0; r < rows; ++r) {
    const S* xv = x->value.data() + static_cast<size_t>(r) * cols;
    S mean = S(0);
    for (int c = 0; c < cols; ++c) mean += xv[c];
    mean /= S(cols);
    S var = S(0);
    for (int c = 0; c < cols; ++c) {
      const S d = xv[c] - mean;
      var += d * d;
    }
    var /= S(cols);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std.at2(r, 0) = is;
    S* xh = xhat.data() + static_cast<size_t>(r) * cols;
    S* o = out.data() + static_cast<size_t>(r) * cols;
    const S* g = gamma->value.data();
    const S* b = beta->value.data();
    for (int c = 0; c < cols; ++c) {
      xh[c] = (xv[c] - mean) * is;
      o[c] = xh[c] * g[c] + b[c];
    }
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x, gamma, beta};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Node<S>* gp = gamma.get();
  Node<S>* bp = beta.get();
  n->backward_fn = [np, xp, gp, bp, xhat, inv_std, rows, cols]() {
    xp->ensure_grad();
    gp->ensure_grad();
    bp->ensure_grad();
    const S* gout = np->grad.data();
    const S* gmm = gp->value.data();
    for (int r = 0; r < rows; ++r) {
      const S* go = gout + static_cast<size_t>(r) * cols;
      const S* xh = xhat.data() + static_cast<size_t>(r) * cols;
      S* gx = xp->grad.data() + static_cast<size_t>(r) * cols;
      S* gg = gp->grad.data();
      S* gb = bp->grad.data();
      const S is = inv_std.at2(r, 0);
      S sum_gy = S(0);
      S sum_gy_xh = S(0);
      for (int c = 0; c < cols; ++c) {
        const S gy = go[c] * gmm[c];
        sum_gy += gy;
        sum_gy_xh += gy * xh[c];
        gg[c] += go[c] * xh[c];
        gb[c] += go[c];
      }
      const S inv_n = S(1) / S(cols);
      for (int c = 0; c < cols; ++c) {
        const S gy = go[c] * gmm[c];
        gx[c] += is * (gy - inv_n * sum_gy - xh[c] * inv_n * sum_gy_xh);
      }
    }
  };
  return n;
}

// ---- structural ----

template <typename S>
Var<S> concat_rows(const Var<S>& a, const Var<S>& b) {
  detail::check_2d(a->value, "concat lhs");
  detail::check_2d(b->value, "concat rhs");
  if (a->value.cols() != b->value.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch");
  }
  const int ra = a->value.rows();
  const int rb = b->value.rows();
  const int cols = a->value.cols();
  Tensor<S> out({ra + rb, cols});
  std::copy(a->value.data(), a->value.data() + a->value.numel(), out.data());
  std::copy(b->value.data(), b->value.data() + b->value.numel(),
            out.data() + a->value.numel());
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {a, b};
  Node<S>* np = n.get();
  Node<S>* ap = a.get();
  Node<S>* bp = b.get();
  n->backward_fn = [np, ap, bp, ra, rb, cols]() {
    ap->ensure_grad();
    bp->ensure_grad();
    const size_t na = static_cast<size_t>(ra) * cols;
    const S* g = np->grad.data();
    S* ga = ap->grad.data();
    S* gb = bp->grad.data();
    for (size_t i = 0; i < na; ++i) ga[i] += g[i];
    const size_t nb = static_cast<size_t>(rb) * cols;
    for (size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
  };
  return n;
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, int begin, int count) {
  detail::check_2d(x->value, "slice input");
  if (begin < 0 || count < 0 || begin + count > x->value.rows()) {
    throw std::invalid_argument("slice_rows: out of range");
  }
  const int cols = x->value.cols();
  Tensor<S> out({count, cols});
  std::copy(x->value.data() + static_cast<size_t>(begin) * cols,
            x->value.data() + static_cast<size_t>(begin + count) * cols, out.data());
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  n->backward_fn = [np, xp, begin, count, cols]() {
    xp->ensure_grad();
    const S* g = np->grad.data();
    S* gx = xp->grad.data() + static_cast<size_t>(begin) * cols;
    for (size_t i = 0; i < static_cast<size_t>(count) * cols; ++i) gx[i] += g[i];
  };
  return n;
}

// Extracts a single element as a [1x1] scalar Var (usable as a backward root).
template <typename S>
Var<S> pick(const Var<S>& x, int r, int c) {
  detail::check_2d(x->value, "pick input");
  if (r < 0 || r >= x->value.rows() || c < 0 || c >= x->value.cols()) {
    throw std::out_of_range("pick: index out of range");
  }
  Tensor<S> out({1, 1});
  out.at(0) = x->value.at2(r, c);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  n->backward_fn = [np, xp, r, c]() {
    xp->ensure_grad();
    xp->grad.at2(r, c) += np->grad.at(0);
  };
  return n;
}

// Gathers rows of an embedding table.
template <typename S>
Var<S> embedding(const Var<S>& table, const std::vector<int>& ids) {
  detail::check_2d(table->value, "embedding table");
  const int cols = table->value.cols();
  const int vocab = table->value.rows();
  Tensor<S> out({static_cast<int>(ids.size()), cols});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw std::out_of_range("embedding: id out of range");
    std::copy(table->value.data() + static_cast<size_t>(ids[i]) * cols,
              table->value.data() + static_cast<size_t>(ids[i] + 1) * cols,
              out.data() + i * cols);
  }
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {table};
  Node<S>* np = n.get();
  Node<S>* tp = table.get();
  auto idcopy = ids;
  n->backward_fn = [np, tp, idcopy, cols]() {
    tp->ensure_grad();
    const S* g = np->grad.data();
    for (size_t i = 0; i < idcopy.size(); ++i) {
      S* row = tp->grad.data() + static_cast<size_t>(idcopy[i]) * cols;
      for (int c = 0; c < cols; ++c) row[c] += g[i * cols + c];
    }
  };
  return n;
}

// ---- reductions / losses ----

template <typename S>
Var<S> mean_all(const Var<S>& x) {
  Tensor<S> out({1, 1});
  S acc = S(0);
  const S* v = x->value.data();
  for (size_t i = 0; i < x->value.numel(); ++i) acc += v[i];
  out.at(0) = acc / S(x->value.numel());
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  n->backward_fn = [np, xp]() {
    xp->ensure_grad();
    const S g = np->grad.at(0) / S(xp->value.numel());
    S* gx = xp->grad.data();
    for (size_t i = 0; i < xp->value.numel(); ++i) gx[i] += g;
  };
  return n;
}

// Mean squared error against a constant target (no gradient into target).
template <typename S>
Var<S> mse_vs_const(const Var<S>& x, const Tensor<S>& target) {
  if (!x->value.same_shape(target)) {
    throw std::invalid_argument("mse: shape mismatch " + x->value.shape_str() + " vs " +
                                target.shape_str());
  }
  Tensor<S> out({1, 1});
  S acc = S(0);
  const S* v = x->value.data();
  const S* t = target.data();
  const size_t n_el = x->value.numel();
  for (size_t i = 0; i < n_el; ++i) {
    const S d = v[i] - t[i];
    acc += d * d;
  }
  out.at(0) = acc / S(n_el);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Tensor<S> tgt = target;
  n->backward_fn = [np, xp, tgt]() {
    xp->ensure_grad();
    const S g = np->grad.at(0) * S(2) / S(xp->value.numel());
    const S* v = xp->value.data();
    const S* t = tgt.data();
    S* gx = xp->grad.data();
    for (size_t i = 0; i < xp->value.numel(); ++i) gx[i] += g * (v[i] - t[i]);
  };
  return n;
}

// 1 - mean_i cos(x_i, t_i) over rows, against a constant target.
template <typename S>
Var<S> cosine_loss_vs_const(const Var<S>& x, const Tensor<S>& target, S eps = S(1e-12)) {
  detail::check_2d(x->value, "cosine input");
  if (!x->value.same_shape(target)) {
    throw std::invalid_argument("cosine: shape mismatch");
  }
  const int rows = x->value.rows();
  const int cols = x->value.cols();
  Tensor<S> out({1, 1});
  S acc = S(0);
  std::vector<S> xn(rows), tn(rows), dot(rows);
  for (int r = 0; r < rows; ++r) {
    const S* xv = x->value.data() + static_cast<size_t>(r) * cols;
    const S* tv = target.data() + static_cast<size_t>(r) * cols;
    S xx = S(0), tt = S(0), xt = S(0);
    for (int c = 0; c < cols; ++c) {
      xx += xv[c] * xv[c];
      tt += tv[c] * tv[c];
      xt += xv[c] * tv[c];
    }
    xn[r] = std::sqrt(xx) + eps;
    tn[r] = std::sqrt(tt) + eps;
    dot[r] = xt;
    acc += xt / (xn[r] * tn[r]);
  }
  out.at(0) = S(1) - acc / S(rows);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Tensor<S> tgt = target;
  n->backward_fn = [np, xp, tgt, xn, tn, dot, rows, cols]() {
    xp->ensure_grad();
    const S g = np->grad.at(0);
    for (int r = 0; r < rows; ++r) {
      const S* xv = xp->value.data() + static_cast<size_t>(r) * cols;
      const S* tv = tgt.data() + static_cast<size_t>(r) * cols;
      S* gx = xp->grad.data() + static_cast<size_t>(r) * cols;
      // d/dx of cos = t/(|x||t|) - x * dot/(|x|^3 |t|); loss contributes -1/rows of that.
      const S inv = S(1) / (xn[r] * tn[r]);
      const S xscale = dot[r] / (xn[r] * xn[r] * xn[r] * tn[r]);
      const S coeff = -g / S(rows);
      for (int c = 0; c < cols; ++c) {
        gx[c] += coeff * (tv[c] * inv - xv[c] * xscale);
      }
    }
  };
  return n;
}

// Mean NLL over supervised positions. logits[L×V]; targets/mask length L.
// Position i is supervised if mask[i] is true; its target is targets[i].
template <typename S>
Var<S> masked_cross_entropy(const Var<S>& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask) {
  detail::check_2d(logits->value, "cross entropy logits");
  const int rows = logits->value.rows();
  const int vocab = logits->value.cols();
  if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows) {
    throw std::invalid_argument("cross entropy: targets/mask length mismatch");
  }
  int count = 0;
  for (int r = 0; r < rows; ++r) {
    if (mask[r]) ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("cross entropy: no supervised positions");
  }
  // Cache softmax rows for supervised positions only.
  Tensor<S> probs({rows, vocab});
  S acc = S(0);
  for (int r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || targets[r] >= vocab) {
      throw std::out_of_range("cross entropy: target id out of range");
    }
    const S* row = logits->value.data() + static_cast<size_t>(r) * vocab;
    S mx = row[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    S z = S(0);
    S* pr = probs.data() + static_cast<size_t>(r) * vocab;
    for (int c = 0; c < vocab; ++c) {
      pr[c] = std::exp(row[c] - mx);
      z += pr[c];
    }
    for (int c = 0; c < vocab; ++c) pr[c] /= z;
    acc -= std::log(pr[targets[r]]);
  }
  Tensor<S> out({1, 1});
  out.at(0) = acc / S(count);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {logits};
  Node<S>* np = n.get();
  Node<S>* lp = logits.get();
  auto t = targets;
  auto m = mask;
  n->backward_fn = [np, lp, probs, t, m, rows, vocab, count]() {
    lp->ensure_grad();
    const S g = np->grad.at(0) / S(count);
    for (int r = 0; r < rows; ++r) {
      if (!m[r]) continue;
      const S* pr = probs.data() + static_cast<size_t>(r) * vocab;
      S* gl = lp->grad.data() + static_cast<size_t>(r) * vocab;
      for (int c = 0; c < vocab; ++c) gl[c] += g * pr[c];
      gl[t[r]] -= g;
    }
  };
  return n;
}

// ---- attention ----

// Multi-head self-attention with optional causal masking, fused into one
// node. Caches per-head attention weights; `attn_out` (when non-null)
// receives a copy shaped [heads x L x L] for analysis.
template <typename S>
Var<S> multihead_attention(const Var<S>& x, const Var<S>& wq, const Var<S>& bq, const Var<S>& wk,
                           const Var<S>& bk, const Var<S>& wv, const Var<S>& bv, const Var<S>& wo,
                           const Var<S>& bo, int n_heads, bool causal,
                           Tensor<S>* attn_out = nullptr) {
  detail::check_2d(x->value, "attention input");
  const int L = x->value.rows();
  const int d = x->value.cols();
  if (d % n_heads != 0) throw std::invalid_argument("attention: d_model % n_heads != 0");
  const int hd = d / n_heads;
  const S scale_f = S(1) / std::sqrt(S(hd));

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat q = x->value.mat() * wq->value.mat();
  q.rowwise() += bq->value.mat().row(0);
  Mat k = x->value.mat() * wk->value.mat();
  k.rowwise() += bk->value.mat().row(0);
  Mat v = x->value.mat() * wv->value.mat();
  v.rowwise() += bv->value.mat().row(0);

  Tensor<S> attn({n_heads, L, L});
  Mat ctx(L, d);
  for (int h = 0; h < n_heads; ++h) {
    Mat scores = q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose() * scale_f;
    for (int i = 0; i < L; ++i) {
      const int lim = causal ? i + 1 : L;
      S mx = scores(i, 0);
      for (int j = 1; j < lim; ++j) mx = std::max(mx, scores(i, j));
      S z = S(0);
      S* arow = attn.data() + (static_cast<size_t>(h) * L + i) * L;
      for (int j = 0; j < lim; ++j) {
        arow[j] = std::exp(scores(i, j) - mx);
        z += arow[j];
      }
      for (int j = 0; j < lim; ++j) arow[j] /= z;
      for (int j = lim; j < L; ++j) arow[j] = S(0);
    }
    // Sequential accumulation over j (skipping masked positions) keeps each
    // row's value bit-identical when extra positions are appended later; a
    // GEMM over the full L would regroup partial sums.
    for (int i = 0; i < L; ++i) {
      const int lim = causal ? i + 1 : L;
      const S* arow = attn.data() + (static_cast<size_t>(h) * L + i) * L;
      auto acc = ctx.row(i).segment(h * hd, hd);
      acc.setZero();
      for (int j = 0; j < lim; ++j) acc += arow[j] * v.row(j).segment(h * hd, hd);
    }
  }
  if (attn_out) *attn_out = attn.clone();

  Tensor<S> out({L, d});
  out.mat().noalias() = ctx * wo->value.mat();
  out.mat().rowwise() += bo->value.mat().row(0);
  auto n = make_var(std::move(out));
  if (!grad_mode()) return n;
  n->prev = {x, wq, bq, wk, bk, wv, bv, wo, bo};
  Node<S>* np = n.get();
  Node<S>* xp = x.get();
  Node<S>* wqp = wq.get();
  Node<S>* bqp = bq.get();
  Node<S>* wkp = wk.get();
  Node<S>* bkp = bk.get();
  Node<S>* wvp = wv.get();
  Node<S>* bvp = bv.get();
  Node<S>* wop = wo.get();
  Node<S>* bop = bo.get();
  n->backward_fn = [=]() {
    xp->ensure_grad();
    wqp->ensure_grad();
    bqp->ensure_grad();
    wkp->ensure_grad();
    bkp->ensure_grad();
    wvp->ensure_grad();
    bvp->ensure_grad();
    wop->ensure_grad();
    bop->ensure_grad();

    // d(out) -> d(ctx), d(wo), d(bo)
    Mat dctx = np->grad.mat() * wop->value.mat().transpose();
    wop->grad.mat().noalias() += ctx.transpose() * np->grad.mat();
    bop->grad.mat().row(0) += np->grad.mat().colwise().sum();

    Mat dq = Mat::Zero(L, d);
    Mat dk = Mat::Zero(L, d);
    Mat dv = Mat::Zero(L, d);
    for (int h = 0; h < n_heads; ++h) {
      Eigen::Map<const Mat> amap(attn.data() + static_cast<size_t>(h) * L * L, L, L);
      // d(attn) and d(v_head)
      Mat dattn = dctx.middleCols(h * hd, hd) * v.middleCols(h * hd, hd).transpose();
      dv.middleCols(h * hd, hd).noalias() = amap.transpose() * dctx.middleCols(h * hd, hd);
      // softmax backward, row-wise
      Mat dscores(L, L);
      for (int i = 0; i < L; ++i) {
        S dot = S(0);
        for (int j = 0; j < L; ++j) dot += dattn(i, j) * amap(i, j);
        for (int j = 0; j < L; ++j) dscores(i, j) = amap(i, j) * (dattn(i, j) - dot) * scale_f;
      }
      dq.middleCols(h * hd, hd).noalias() = dscores * k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dscores.transpose() * q.middleCols(h * hd, hd);
    }
    wqp->grad.mat().noalias() += xp->value.mat().transpose() * dq;
    wkp->grad.mat().noalias() += xp->value.mat().transpose() * dk;
    wvp->grad.mat().noalias() += xp->value.mat().transpose() * dv;
    bqp->grad.mat().row(0) += dq.colwise().sum();
    bkp->grad.mat().row(0) += dk.colwise().sum();
    bvp->grad.mat().row(0) += dv.colwise().sum();
    xp->grad.mat().noalias() += dq * wqp->value.mat().transpose();
    xp->grad.mat().noalias() += dk * wkp->value.mat().transpose();
    xp->grad.mat().noalias() += dv * wvp->value.mat().transpose();
  };
  return n;
}

}  // namespace ag
}  // namespace rvit
