#include "pgrd/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pgrd {

Schedule::Schedule(int steps, double offset, double clip, std::vector<double> beta)
    : steps_(steps), offset_(offset), clip_(clip), beta_(std::move(beta)) {
  if (steps_ < 2) {
    throw std::invalid_argument("schedule: needs at least 2 steps, got " +
                                std::to_string(steps_));
  }
  if (beta_.size() != static_cast<std::size_t>(steps_) + 1) {
    throw std::invalid_argument("schedule: beta array must have T+1 entries");
  }
  alpha_.resize(beta_.size());
  alpha_bar_.resize(beta_.size());
  sqrt_alpha_bar_.resize(beta_.size());
  sigma_bar_.resize(beta_.size());
  alpha_[0] = 1.0;
  alpha_bar_[0] = 1.0;
  sqrt_alpha_bar_[0] = 1.0;
  sigma_bar_[0] = 0.0;
  for (int t = 1; t <= steps_; ++t) {
    if (!(beta_[t] > 0.0 && beta_[t] < 1.0)) {
      throw std::invalid_argument("schedule: beta out of (0,1) at t=" +
                                  std::to_string(t));
    }
    alpha_[t] = 1.0 - beta_[t];
    alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
    sqrt_alpha_bar_[t] = std::sqrt(alpha_bar_[t]);
    sigma_bar_[t] = std::sqrt(1.0 - alpha_bar_[t]);
  }
}

std::size_t Schedule::check(int t, int lo) const {
  if (t < lo || t > steps_) {
    throw std::out_of_range("schedule: step index " + std::to_string(t) +
                            " outside [" + std::to_string(lo) + "," +
                            std::to_string(steps_) + "]");
  }
  return static_cast<std::size_t>(t);
}

Schedule make_cosine(int steps, double s, double clip) {
  if (steps < 2) {
    throw std::invalid_argument("make_cosine: needs at least 2 steps, got " +
                                std::to_string(steps));
  }
  auto f = [&](double t) {
    const double x = (t / steps + s) / (1.0 + s) * 1.5707963267948966;
    const double c = std::cos(x);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> beta(static_cast<std::size_t>(steps) + 1, 0.0);
  double prev_bar = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double bar = f(static_cast<double>(t)) / f0;
    double b = 1.0 - bar / prev_bar;
    b = std::min(b, clip);
    b = std::max(b, 1e-8);
    beta[static_cast<std::size_t>(t)] = b;
    prev_bar = bar;
  }
  return Schedule(steps, s, clip, std::move(beta));
}

PosteriorCoeffs posterior_coeffs(const Schedule& schedule, int t) {
  if (t < 1) {
    throw std::out_of_range("posterior_coeffs: t must be >= 1, got " +
                            std::to_string(t));
  }
  return posterior_coeffs_jump(schedule, t, t - 1);
}

PosteriorCoeffs posterior_coeffs_jump(const Schedule& schedule, int t, int t_prev) {
  if (t_prev < 0 || t_prev >= t) {
    throw std::out_of_range("posterior_coeffs_jump: needs 0 <= t_prev < t");
  }
  const double bar_t = schedule.alpha_bar(t);
  const double bar_prev = schedule.alpha_bar(t_prev);
  const double alpha_eff = bar_t / bar_prev;  // product of alphas over the jump
  const double beta_eff = 1.0 - alpha_eff;
  PosteriorCoeffs c;
  c.coef_clean = std::sqrt(bar_prev) * beta_eff / (1.0 - bar_t);
  c.coef_state = std::sqrt(alpha_eff) * (1.0 - bar_prev) / (1.0 - bar_t);
  c.var_fixed = beta_eff;
  c.var_posterior = beta_eff * (1.0 - bar_prev) / (1.0 - bar_t);
  return c;
}

std::vector<int> uniform_subset(int steps, int subset_size) {
  if (subset_size < 1 || subset_size > steps) {
    throw std::invalid_argument("uniform_subset: subset size " +
                                std::to_string(subset_size) +
                                " outside [1," + std::to_string(steps) + "]");
  }
  std::vector<int> out(static_cast<std::size_t>(subset_size));
  for (int i = 1; i <= subset_size; ++i) {
    const std::int64_t num = static_cast<std::int64_t>(i) * steps;
    out[static_cast<std::size_t>(i - 1)] =
        static_cast<int>((num + subset_size - 1) / subset_size);
  }
  return out;
}

}  // namespace pgrd
