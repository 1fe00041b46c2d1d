#include "rvit/schedules.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace rvit {

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "scaled_linear") return ScheduleKind::scaled_linear;
  if (s == "glide_softmax") return ScheduleKind::glide_softmax;
  if (s == "geodiff_sigmoid") return ScheduleKind::geodiff_sigmoid;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::scaled_linear: return "scaled_linear";
    case ScheduleKind::glide_softmax: return "glide_softmax";
    case ScheduleKind::geodiff_sigmoid: return "geodiff_sigmoid";
  }
  throw std::logic_error("invalid ScheduleKind");
}

void default_beta_bounds(ScheduleKind kind, double& beta_min, double& beta_max) {
  if (kind == ScheduleKind::scaled_linear) {
    beta_min = 0.00085;
    beta_max = 0.012;
  } else {
    beta_min = 1e-4;
    beta_max = 0.02;
  }
}

namespace {

void derive(BetaSchedule& s) {
  const size_t n = s.betas.size();
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  s.sigmas.resize(n);
  double prod = 1.0;
  for (size_t i = 0; i < n; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  for (size_t i = 0; i < n; ++i) {
    if (s.sigma_mode == SigmaMode::beta) {
      s.sigmas[i] = std::sqrt(s.betas[i]);
    } else {
      const double abar_prev = i == 0 ? 1.0 : s.alpha_bars[i - 1];
      const double denom = 1.0 - s.alpha_bars[i];
      s.sigmas[i] = denom > 0.0 ? std::sqrt((1.0 - abar_prev) / denom * s.betas[i]) : 0.0;
    }
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

BetaSchedule make_beta_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max,
                                SigmaMode sigma_mode) {
  if (steps < 1) throw std::invalid_argument("schedule steps must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw std::invalid_argument("schedule bounds must satisfy 0 < beta_min <= beta_max < 1");
  }
  BetaSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.sigma_mode = sigma_mode;
  s.betas.resize(static_cast<size_t>(steps));
  const int T = steps;
  switch (kind) {
    case ScheduleKind::linear:
      if (T == 1) {
        s.betas[0] = beta_min;
      } else {
        for (int t = 1; t <= T; ++t) {
          s.betas[t - 1] = beta_min + (beta_max - beta_min) * double(t - 1) / double(T - 1);
        }
      }
      break;
    case ScheduleKind::scaled_linear: {
      if (T == 1) {
        s.betas[0] = beta_min;
        break;
      }
      const double r0 = std::sqrt(beta_min);
      const double r1 = std::sqrt(beta_max);
      for (int t = 1; t <= T; ++t) {
        const double r = r0 + double(t - 1) / double(T - 1) * (r1 - r0);
        s.betas[t - 1] = r * r;
      }
      break;
    }
    case ScheduleKind::glide_softmax: {
      // Squared-cosine cumulative schedule; betas from consecutive ratios,
      // clipped to <= 0.999. beta_min/beta_max are unused by this kind.
      const double kS = 0.008;
      auto abar = [kS, T](int t) {
        const double f = std::cos((double(t) / T + kS) / (1.0 + kS) * M_PI / 2.0);
        const double f0 = std::cos(kS / (1.0 + kS) * M_PI / 2.0);
        return (f * f) / (f0 * f0);
      };
      double prev = abar(0);
      for (int t = 1; t <= T; ++t) {
        const double cur = abar(t);
        s.betas[t - 1] = std::min(1.0 - cur / prev, 0.999);
        prev = cur;
      }
      break;
    }
    case ScheduleKind::geodiff_sigmoid: {
      if (T == 1) {
        s.betas[0] = beta_min;
        break;
      }
      for (int t = 1; t <= T; ++t) {
        const double u = -6.0 + 12.0 * double(t - 1) / double(T - 1);
        s.betas[t - 1] = sigmoid(u) * (beta_max - beta_min) + beta_min;
      }
      break;
    }
  }
  derive(s);
  return s;
}

BetaSchedule make_beta_schedule(ScheduleKind kind, int steps, SigmaMode sigma_mode) {
  double lo = 0.0, hi = 0.0;
  default_beta_bounds(kind, lo, hi);
  return make_beta_schedule(kind, steps, lo, hi, sigma_mode);
}

BetaSchedule schedule_from_betas(std::vector<double> betas, SigmaMode sigma_mode) {
  if (betas.empty()) throw std::invalid_argument("schedule_from_betas: empty betas");
  BetaSchedule s;
  s.kind = ScheduleKind::linear;
  s.steps = static_cast<int>(betas.size());
  s.sigma_mode = sigma_mode;
  s.betas = std::move(betas);
  derive(s);
  return s;
}

std::vector<double> alpha_bars(const BetaSchedule& schedule) {
  std::vector<double> out(schedule.betas.size());
  double prod = 1.0;
  for (size_t i = 0; i < out.size(); ++i) {
    prod *= 1.0 - schedule.betas[i];
    out[i] = prod;
  }
  return out;
}

void dump_schedule_csv(const BetaSchedule& schedule, std::ostream& out) {
  out << "t,beta,alpha,alpha_bar,sigma\n";
  out.precision(17);
  for (int t = 1; t <= schedule.steps; ++t) {
    out << t << ',' << schedule.beta(t) << ',' << schedule.alpha(t) << ','
        << schedule.alpha_bar(t) << ',' << schedule.sigma(t) << '\n';
  }
}

}  // namespace rvit
