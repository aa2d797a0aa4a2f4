#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pgrd/rng.hpp"
#include "pgrd/schedule.hpp"

#include <cmath>

using namespace pgrd;

TEST_CASE("cosine schedule basics") {
  auto sch = make_cosine(100);
  CHECK(sch.alpha_bar(0) == 1.0);
  CHECK(sch.sigma_bar(0) == 0.0);
  for (int t = 1; t <= 100; ++t) {
    CHECK(sch.beta(t) > 0.0);
    CHECK(sch.beta(t) < 1.0);
    CHECK(sch.beta(t) <= 0.999);
    CHECK(sch.alpha_bar(t) < sch.alpha_bar(t - 1));   // strictly decreasing
    CHECK(sch.sigma_bar(t) > sch.sigma_bar(t - 1));   // strictly increasing
  }
}

TEST_CASE("T=1000 cosine endpoint is almost fully noised") {
  auto sch = make_cosine(1000, 0.008);
  CHECK(sch.alpha_bar(1000) < 1e-3);
}

TEST_CASE("make_cosine rejects T < 2") {
  CHECK_THROWS_AS(make_cosine(1), std::invalid_argument);
}

TEST_CASE("stored cumulative product matches recomputation from beta") {
  auto sch = make_cosine(500);
  double prod = 1.0;
  for (int t = 1; t <= 500; ++t) {
    prod *= 1.0 - sch.beta(t);
    CHECK(std::abs(prod - sch.alpha_bar(t)) <=
          1e-9 * std::max(prod, sch.alpha_bar(t)));
  }
}

TEST_CASE("posterior coefficients at t=1 collapse to the clean estimate") {
  auto sch = make_cosine(100);
  auto c = posterior_coeffs(sch, 1);
  CHECK(c.coef_clean == doctest::Approx(1.0));
  CHECK(c.coef_state == doctest::Approx(0.0));
  CHECK(c.var_posterior == doctest::Approx(0.0));
}

TEST_CASE("posterior var_posterior never exceeds var_fixed") {
  auto sch = make_cosine(300);
  for (int t = 1; t <= 300; ++t) {
    auto c = posterior_coeffs(sch, t);
    CHECK(c.var_posterior <= c.var_fixed + 1e-15);
  }
}

TEST_CASE("posterior rejects t=0") {
  auto sch = make_cosine(10);
  CHECK_THROWS_AS(posterior_coeffs(sch, 0), std::out_of_range);
}

TEST_CASE("centering discrepancy of the uncentered posterior, logged") {
  auto sch = make_cosine(200);
  double worst = 0.0;
  int worst_t = 1;
  for (int t = 1; t <= 200; ++t) {
    auto c = posterior_coeffs(sch, t);
    const double gap = std::abs(c.coef_clean + c.coef_state - 1.0);
    if (gap > worst) {
      worst = gap;
      worst_t = t;
    }
  }
  MESSAGE("max |coef_clean + coef_state - 1| = ", worst, " at t=", worst_t);
  CHECK(std::isfinite(worst));
  CHECK(worst > 0.0);  // the literal form really is off the prior manifold
}

TEST_CASE("uniform_subset spacing") {
  CHECK(uniform_subset(10, 5) == std::vector<int>{2, 4, 6, 8, 10});

  auto full = uniform_subset(7, 7);
  CHECK(full == std::vector<int>{1, 2, 3, 4, 5, 6, 7});

  auto sub = uniform_subset(1000, 300);
  CHECK(sub.size() == 300);
  CHECK(sub.back() == 1000);
  int min_gap = 1 << 30, max_gap = 0;
  int prev = 0;
  for (int t : sub) {
    CHECK(t > prev);
    if (prev > 0) {
      min_gap = std::min(min_gap, t - prev);
      max_gap = std::max(max_gap, t - prev);
    }
    prev = t;
  }
  CHECK(min_gap == 3);
  CHECK(max_gap == 4);

  CHECK_THROWS_AS(uniform_subset(10, 11), std::invalid_argument);
}

TEST_CASE("variance preservation of the residual marginal") {
  auto sch = make_cosine(100);
  Rng rng(31, "var-preserve");
  const int n = 200000;
  for (int t : {25, 50, 100}) {
    const double a = sch.sqrt_alpha_bar(t);
    const double s = sch.sigma_bar(t);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double r0 = rng.normal();
      const double eps = rng.normal();
      const double rt = a * r0 + s * eps;
      sq += rt * rt;
    }
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.02));
  }
}
