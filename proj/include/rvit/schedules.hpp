#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rvit {

enum class ScheduleKind { linear, scaled_linear, glide_softmax, geodiff_sigmoid };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

enum class SigmaMode {
  beta,       // sigma_t^2 = beta_t (default)
  tilde_beta  // sigma_t^2 = (1 - abar_{t-1})/(1 - abar_t) * beta_t, abar_0 = 1
};

// Discrete noise schedule. Math is 1-indexed (t in 1..steps); storage is
// 0-indexed with t_storage = t - 1. Immutable after construction.
struct BetaSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 0;
  SigmaMode sigma_mode = SigmaMode::beta;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;

  double beta(int t) const { return betas.at(static_cast<size_t>(t) - 1); }
  double alpha(int t) const { return alphas.at(static_cast<size_t>(t) - 1); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<size_t>(t) - 1); }
  double sigma(int t) const { return sigmas.at(static_cast<size_t>(t) - 1); }
};

inline constexpr int kDefaultDiffusionSteps = 1000;

// Per-kind default beta bounds.
void default_beta_bounds(ScheduleKind kind, double& beta_min, double& beta_max);

BetaSchedule make_beta_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max,
                                SigmaMode sigma_mode = SigmaMode::beta);
BetaSchedule make_beta_schedule(ScheduleKind kind, int steps,
                                SigmaMode sigma_mode = SigmaMode::beta);

// Derives alphas/alpha_bars/sigmas from raw betas without range validation.
// Intended for tests that construct edge-case schedules (for example all-zero
// betas) directly.
BetaSchedule schedule_from_betas(std::vector<double> betas,
                                 SigmaMode sigma_mode = SigmaMode::beta);

// Recomputes the cumulative products from the stored betas.
std::vector<double> alpha_bars(const BetaSchedule& schedule);

// CSV with header "t,beta,alpha,alpha_bar,sigma", one row per timestep,
// t 1-indexed, values at full double precision.
void dump_schedule_csv(const BetaSchedule& schedule, std::ostream& out);

}  // namespace rvit
