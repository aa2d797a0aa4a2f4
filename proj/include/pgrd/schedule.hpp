// Cosine noise schedule and derived per-step coefficients.
//
// Index convention: t=0 is clean data (alpha_bar(0)=1, sigma_bar(0)=0); the
// chain runs 1..T. Betas are derived from the squared-cosine alpha_bar curve
// and clipped, then alpha_bar is re-accumulated from the clipped betas so the
// stored cumulative product is exactly consistent with the stored betas.
#pragma once

#include <cstdint>
#include <vector>

namespace pgrd {

struct PosteriorCoeffs {
  double coef_clean = 0.0;   // weight on the predicted clean state
  double coef_state = 0.0;   // weight on the current noisy state
  double var_fixed = 0.0;    // beta_t
  double var_posterior = 0.0;  // beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
};

class Schedule {
 public:
  Schedule(int steps, double offset, double clip, std::vector<double> beta);

  int steps() const { return steps_; }
  double offset() const { return offset_; }
  double clip() const { return clip_; }

  // Valid for t in [1, T].
  double beta(int t) const { return beta_[check(t, 1)]; }
  double alpha(int t) const { return alpha_[check(t, 1)]; }

  // Valid for t in [0, T]; index 0 is clean data.
  double alpha_bar(int t) const { return alpha_bar_[check(t, 0)]; }
  double sqrt_alpha_bar(int t) const { return sqrt_alpha_bar_[check(t, 0)]; }
  double sigma_bar(int t) const { return sigma_bar_[check(t, 0)]; }

 private:
  std::size_t check(int t, int lo) const;

  int steps_;
  double offset_;
  double clip_;
  std::vector<double> beta_;            // [0..T], index 0 unused sentinel 0
  std::vector<double> alpha_;           // 1 - beta
  std::vector<double> alpha_bar_;       // cumulative product, alpha_bar_[0]=1
  std::vector<double> sqrt_alpha_bar_;
  std::vector<double> sigma_bar_;       // sqrt(1 - alpha_bar)
};

// Squared-cosine schedule with offset s and beta ceiling.
Schedule make_cosine(int steps, double s = 0.008, double clip = 0.999);

// Coefficients of the reverse-process posterior mean/variance at step t >= 1.
PosteriorCoeffs posterior_coeffs(const Schedule& schedule, int t);

// Generalized coefficients for a jump from step t to an earlier step t_prev
// (consecutive steps reduce to posterior_coeffs). Used by subset samplers.
PosteriorCoeffs posterior_coeffs_jump(const Schedule& schedule, int t, int t_prev);

// S strictly increasing step indices ending at T, spacing differing by at
// most one. uniform_subset(T, T) is the identity subset {1..T}.
std::vector<int> uniform_subset(int steps, int subset_size);

}  // namespace pgrd
