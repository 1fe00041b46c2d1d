#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rvit/autodiff.hpp"
#include "rvit/rng.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

// Named parameter registry. Registration order is the canonical order for
// gradient reduction and serialization, so it must not depend on run-time
// control flow after construction.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, const std::vector<int>& shape) {
    if (values_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    names_.push_back(name);
    auto [it, ok] = values_.emplace(name, Tensor<S>::zeros(shape));
    (void)ok;
    return it->second;
  }

  Tensor<S>& get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<S>& get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return values_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }

  size_t numel() const {
    size_t n = 0;
    for (const auto& name : names_) n += values_.at(name).numel();
    return n;
  }

  // Each parameter gets its own stream keyed by name, so the presence of
  // unrelated parameters cannot shift another parameter's initial values.
  void init_normal(const std::string& name, uint64_t seed, S stddev) {
    Rng rng(seed, "init/" + name);
    Tensor<S>& t = get(name);
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = S(rng.normal()) * stddev;
  }
  void init_const(const std::string& name, S v) { get(name).fill(v); }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& name : names_) {
      out.add(name, values_.at(name).shape());
      out.get(name) = values_.at(name).template cast<T>();
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor<S>> values_;
};

// Per-graph view of a ParamStore: every parameter wrapped in a leaf Var.
// Value buffers are shared with the store; grad buffers are local to the
// graph so multiple graphs can run concurrently.
template <typename S>
class Binding {
 public:
  explicit Binding(ParamStore<S>& store) : store_(&store) {}

  ag::Var<S> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto v = ag::leaf(store_->get(name));
    vars_.emplace(name, v);
    return v;
  }

  // Accumulates this graph's parameter gradients into `sink` (name-keyed,
  // created on demand), visiting in store registration order.
  void harvest_grads(std::unordered_map<std::string, Tensor<S>>& sink) const {
    for (const auto& name : store_->names()) {
      auto it = vars_.find(name);
      if (it == vars_.end() || !it->second->grad.defined()) continue;
      auto [sit, inserted] = sink.emplace(name, Tensor<S>());
      if (inserted) {
        sit->second = it->second->grad.clone();
      } else {
        sit->second.add_(it->second->grad);
      }
    }
  }

  ParamStore<S>& store() { return *store_; }

 private:
  ParamStore<S>* store_;
  std::unordered_map<std::string, ag::Var<S>> vars_;
};

namespace nn {

template <typename S>
struct Linear {
  std::string w, b;

  void init(ParamStore<S>& ps, const std::string& prefix, int in, int out, uint64_t seed,
            S stddev = S(0.02)) {
    wire(prefix);
    ps.add(w, {in, out});
    ps.add(b, {1, out});
    ps.init_normal(w, seed, stddev);
  }

  // Binds the name handles without registering parameters (checkpoint load).
  void wire(const std::string& prefix) {
    w = prefix + ".w";
    b = prefix + ".b";
  }

  ag::Var<S> forward(Binding<S>& p, const ag::Var<S>& x) const {
    return ag::linear(x, p(w), p(b));
  }
};

template <typename S>
struct LayerNorm {
  std::string gamma, beta;

  void init(ParamStore<S>& ps, const std::string& prefix, int d) {
    wire(prefix);
    ps.add(gamma, {1, d});
    ps.add(beta, {1, d});
    ps.init_const(gamma, S(1));
  }

  void wire(const std::string& prefix) {
    gamma = prefix + ".gamma";
    beta = prefix + ".beta";
  }

  ag::Var<S> forward(Binding<S>& p, const ag::Var<S>& x) const {
    return ag::layer_norm(x, p(gamma), p(beta));
  }
};

template <typename S>
struct Mlp {
  Linear<S> fc1, fc2;

  void init(ParamStore<S>& ps, const std::string& prefix, int d, int hidden, uint64_t seed) {
    fc1.init(ps, prefix + ".fc1", d, hidden, seed);
    fc2.init(ps, prefix + ".fc2", hidden, d, seed);
  }

  void wire(const std::string& prefix) {
    fc1.wire(prefix + ".fc1");
    fc2.wire(prefix + ".fc2");
  }

  ag::Var<S> forward(Binding<S>& p, const ag::Var<S>& x) const {
    return fc2.forward(p, ag::gelu(fc1.forward(p, x)));
  }
};

template <typename S>
struct MultiheadAttention {
  std::string wq, bq, wk, bk, wv, bv, wo, bo;
  int n_heads = 1;

  void init(ParamStore<S>& ps, const std::string& prefix, int d, int heads, uint64_t seed) {
    wire(prefix, heads);
    for (const auto* n : {&wq, &wk, &wv, &wo}) {
      ps.add(*n, {d, d});
      ps.init_normal(*n, seed, S(0.02));
    }
    for (const auto* n : {&bq, &bk, &bv, &bo}) ps.add(*n, {1, d});
  }

  void wire(const std::string& prefix, int heads) {
    n_heads = heads;
    wq = prefix + ".wq";
    bq = prefix + ".bq";
    wk = prefix + ".wk";
    bk = prefix + ".bk";
    wv = prefix + ".wv";
    bv = prefix + ".bv";
    wo = prefix + ".wo";
    bo = prefix + ".bo";
  }

  ag::Var<S> forward(Binding<S>& p, const ag::Var<S>& x, bool causal,
                     Tensor<S>* attn_out = nullptr) const {
    return ag::multihead_attention(x, p(wq), p(bq), p(wk), p(bk), p(wv), p(bv), p(wo), p(bo),
                                   n_heads, causal, attn_out);
  }
};

// Pre-norm transformer block:
//   x = x + attn(ln1(x)); x = x + mlp(ln2(x))
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiheadAttention<S> attn;
  Mlp<S> mlp;

  void init(ParamStore<S>& ps, const std::string& prefix, int d, int heads, int mlp_hidden,
            uint64_t seed) {
    ln1.init(ps, prefix + ".ln1", d);
    ln2.init(ps, prefix + ".ln2", d);
    attn.init(ps, prefix + ".attn", d, heads, seed);
    mlp.init(ps, prefix + ".mlp", d, mlp_hidden, seed);
  }

  void wire(const std::string& prefix, int heads) {
    ln1.wire(prefix + ".ln1");
    ln2.wire(prefix + ".ln2");
    attn.wire(prefix + ".attn", heads);
    mlp.wire(prefix + ".mlp");
  }

  ag::Var<S> forward(Binding<S>& p, const ag::Var<S>& x, bool causal,
                     Tensor<S>* attn_out = nullptr) const {
    auto h = ag::add(x, attn.forward(p, ln1.forward(p, x), causal, attn_out));
    return ag::add(h, mlp.forward(p, ln2.forward(p, h)));
  }
};

}  // namespace nn
}  // namespace rvit
