#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "rvit/autodiff.hpp"
#include "rvit/rng.hpp"
#include "rvit/schedules.hpp"
#include "rvit/tensor.hpp"

namespace rvit {

template <typename S>
struct NoisySample {
  Tensor<S> z_t;
  int t = 0;
  Tensor<S> eps;
};

// Graph-building predictor: eps_hat = f(z_t, cond, t). Gradients flow into
// the predictor's parameters and into cond; z_t is a graph input.
template <typename S>
using NoisePredictor =
    std::function<ag::Var<S>(const ag::Var<S>& z_t, const ag::Var<S>& cond, int t)>;

// Inference-only predictor used by the samplers.
template <typename S>
using NoisePredictorEval =
    std::function<Tensor<S>(const Tensor<S>& z_t, const Tensor<S>& cond, int t)>;

namespace detail {
inline void check_t(int t, const BetaSchedule& s) {
  if (t < 1 || t > s.steps) throw std::out_of_range("timestep out of schedule range");
}
}  // namespace detail

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps. Caller supplies eps, so
// the op itself is deterministic.
template <typename S>
NoisySample<S> q_sample(const Tensor<S>& z0, int t, const Tensor<S>& eps,
                        const BetaSchedule& schedule) {
  if (!z0.same_shape(eps)) {
    throw std::invalid_argument("q_sample: z0/eps shape mismatch");
  }
  detail::check_t(t, schedule);
  const S a = static_cast<S>(std::sqrt(schedule.alpha_bar(t)));
  const S b = static_cast<S>(std::sqrt(1.0 - schedule.alpha_bar(t)));
  NoisySample<S> out;
  out.t = t;
  out.eps = eps;
  out.z_t = Tensor<S>(z0.shape());
  const S* z = z0.data();
  const S* e = eps.data();
  S* o = out.z_t.data();
  for (size_t i = 0; i < z0.numel(); ++i) o[i] = a * z[i] + b * e[i];
  return out;
}

// Draws t ~ U{1..T} and eps ~ N(0, I) from rng, then returns
// mean((denoiser(z_t; cond, t) - eps)^2) over all positions and latent dims.
template <typename S>
ag::Var<S> denoising_loss(const NoisePredictor<S>& denoiser, const Tensor<S>& z0,
                          const ag::Var<S>& cond, const BetaSchedule& schedule, Rng& rng) {
  if (cond->value.rows() != z0.rows()) {
    throw std::invalid_argument("denoising_loss: cond must have one vector per token");
  }
  const int t = static_cast<int>(rng.uniform_int(1, schedule.steps));
  Tensor<S> eps(z0.shape());
  for (size_t i = 0; i < eps.numel(); ++i) eps.data()[i] = static_cast<S>(rng.normal());
  NoisySample<S> ns = q_sample(z0, t, eps, schedule);
  auto pred = denoiser(ag::leaf(ns.z_t), cond, t);
  if (!pred->value.same_shape(eps)) {
    throw std::invalid_argument("denoising_loss: predictor output shape mismatch");
  }
  return ag::mse_vs_const(pred, eps);
}

// z_{t-1} = (z_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
//           + sigma_t * eps', with eps' = 0 at t = 1.
template <typename S>
Tensor<S> p_sample_step(const NoisePredictorEval<S>& denoiser, const Tensor<S>& z_t, int t,
                        const Tensor<S>& cond, const BetaSchedule& schedule, Rng& rng) {
  detail::check_t(t, schedule);
  Tensor<S> eps_hat = denoiser(z_t, cond, t);
  if (!eps_hat.same_shape(z_t)) {
    throw std::invalid_argument("p_sample_step: predictor output shape mismatch");
  }
  const double alpha = schedule.alpha(t);
  const double abar = schedule.alpha_bar(t);
  const S inv_sqrt_alpha = static_cast<S>(1.0 / std::sqrt(alpha));
  // At beta == 0 the formula degenerates to 0/0; the step is a no-op on the
  // prediction, so the coefficient is 0.
  const double denom = std::sqrt(1.0 - abar);
  const S coef = denom > 0.0 ? static_cast<S>((1.0 - alpha) / denom) : S(0);
  const S sig = static_cast<S>(schedule.sigma(t));
  Tensor<S> out(z_t.shape());
  const S* z = z_t.data();
  const S* e = eps_hat.data();
  S* o = out.data();
  for (size_t i = 0; i < out.numel(); ++i) {
    S v = inv_sqrt_alpha * (z[i] - coef * e[i]);
    if (t > 1) v += sig * static_cast<S>(rng.normal());
    o[i] = v;
  }
  return out;
}

// Ancestral sampling from z_T ~ N(0, I) down to z_0.
template <typename S>
Tensor<S> sample_loop(const NoisePredictorEval<S>& denoiser, const Tensor<S>& cond,
                      const BetaSchedule& schedule, Rng& rng, int n_tokens, int d_lat) {
  Tensor<S> z({n_tokens, d_lat});
  for (size_t i = 0; i < z.numel(); ++i) z.data()[i] = static_cast<S>(rng.normal());
  for (int t = schedule.steps; t >= 1; --t) {
    z = p_sample_step(denoiser, z, t, cond, schedule, rng);
  }
  return z;
}

}  // namespace rvit
