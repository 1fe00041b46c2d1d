#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rvit/nn.hpp"
#include "rvit/serialize.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

template <typename S>
struct AdamWConfig {
  S lr = S(3e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);
};

// AdamW with decoupled weight decay. Parameters absent from a step's gradient
// map are untouched: their moments do not advance, so a parameter that never
// receives gradients keeps its initial value bit for bit.
template <typename S>
class AdamW {
 public:
  AdamW(ParamStore<S>& store, AdamWConfig<S> cfg) : store_(&store), cfg_(cfg) {}

  void step(const std::unordered_map<std::string, Tensor<S>>& grads) { step(grads, cfg_.lr); }

  void step(const std::unordered_map<std::string, Tensor<S>>& grads, S lr) {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta1), t_));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta2), t_));
    // Registration order keeps float reductions deterministic.
    for (const auto& name : store_->names()) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      Tensor<S>& p = store_->get(name);
      const Tensor<S>& g = git->second;
      if (!p.same_shape(g)) {
        throw std::invalid_argument("AdamW: gradient shape mismatch for " + name);
      }
      auto mit = m_.find(name);
      if (mit == m_.end()) {
        mit = m_.emplace(name, Tensor<S>::zeros(p.shape())).first;
        v_.emplace(name, Tensor<S>::zeros(p.shape()));
      }
      Tensor<S>& m = mit->second;
      Tensor<S>& v = v_.at(name);
      S* pp = p.data();
      S* mp = m.data();
      S* vp = v.data();
      const S* gp = g.data();
      for (size_t i = 0; i < p.numel(); ++i) {
        mp[i] = cfg_.beta1 * mp[i] + (S(1) - cfg_.beta1) * gp[i];
        vp[i] = cfg_.beta2 * vp[i] + (S(1) - cfg_.beta2) * gp[i] * gp[i];
        const S mhat = mp[i] / bc1;
        const S vhat = vp[i] / bc2;
        pp[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * pp[i]);
      }
    }
  }

  int64_t step_count() const { return t_; }
  const AdamWConfig<S>& config() const { return cfg_; }

  // Re-points the optimizer at a store that moved (same names and shapes).
  void rebind(ParamStore<S>& store) { store_ = &store; }

  void save(CheckpointWriter& w, const std::string& prefix) const {
    w.meta()[prefix + ".t"] = t_;
    std::vector<std::string> have;
    for (const auto& name : store_->names()) {
      if (!m_.count(name)) continue;
      have.push_back(name);
      w.put(prefix + ".m." + name, m_.at(name));
      w.put(prefix + ".v." + name, v_.at(name));
    }
    w.meta()[prefix + ".names"] = have;
  }

  void load(const Checkpoint& ck, const std::string& prefix) {
    t_ = ck.meta().at(prefix + ".t").template get<int64_t>();
    m_.clear();
    v_.clear();
    for (const auto& name :
         ck.meta().at(prefix + ".names").template get<std::vector<std::string>>()) {
      m_[name] = ck.template tensor<S>(prefix + ".m." + name);
      v_[name] = ck.template tensor<S>(prefix + ".v." + name);
    }
  }

 private:
  ParamStore<S>* store_;
  AdamWConfig<S> cfg_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Tensor<S>> m_, v_;
};

// Scales all gradients in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm. `order` fixes the float summation order.
template <typename S>
S clip_global_norm(std::unordered_map<std::string, Tensor<S>>& grads, S max_norm,
                   const std::vector<std::string>& order) {
  S sq = S(0);
  for (const auto& name : order) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const S* g = it->second.data();
    for (size_t i = 0; i < it->second.numel(); ++i) sq += g[i] * g[i];
  }
  const S norm = std::sqrt(sq);
  if (norm > max_norm && norm > S(0)) {
    const S scale = max_norm / norm;
    for (const auto& name : order) {
      auto it = grads.find(name);
      if (it != grads.end()) it->second.scale_(scale);
    }
  }
  return norm;
}

// Linear warmup over floor(warmup_ratio * total) steps, then cosine decay
// that reaches 0 at step == total. Steps are 0-based.
inline double lr_at(int64_t step, int64_t total_steps, double warmup_ratio, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw std::out_of_range("lr_at: step out of range");
  const auto warm = static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps));
  if (step < warm) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  if (total_steps == warm) return base_lr;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace rvit
