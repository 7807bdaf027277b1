#include <algorithm>
#include <cmath>

#include "cbnn/errors.hpp"
#include "cbnn/metrics.hpp"
#include "cbnn/rng.hpp"
#include "doctest.h"

using namespace cbnn;
using namespace cbnn::metrics;
using autodiff::Tensor;

namespace {

double brute_force_crps(const std::vector<double>& xs, double y) {
  const double n = static_cast<double>(xs.size());
  double a = 0.0;
  double b = 0.0;
  for (double xi : xs) {
    a += std::abs(xi - y);
    for (double xj : xs) b += std::abs(xi - xj);
  }
  return a / n - b / (2.0 * n * n);
}

// Inverse standard normal CDF by bisection on erfc.
double normal_quantile(double p) {
  double lo = -10.0;
  double hi = 10.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

Tensor random_samples(Rng& rng, std::size_t n_members, std::size_t points) {
  std::vector<double> v(n_members * points);
  for (auto& x : v) x = rng.normal();
  return Tensor({n_members, points}, std::move(v));
}

}  // namespace

TEST_CASE("mse examples and two-pass oracle") {
  std::vector<double> a{1.0, 2.0, 3.0};
  CHECK(mse(a, a) == 0.0);
  std::vector<double> p{1.0, -1.0};
  std::vector<double> z{0.0, 0.0};
  CHECK(mse(p, z) == 1.0);
  CHECK_THROWS_AS(mse(std::vector<double>{}, std::vector<double>{}), ContractError);
  CHECK_THROWS_AS(mse(a, p), DimensionError);

  Rng rng(3);
  std::vector<double> x(257);
  std::vector<double> y(257);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    y[i] = rng.normal();
  }
  std::vector<double> r2(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r2[i] = (x[i] - y[i]) * (x[i] - y[i]);
  long double oracle = 0.0L;
  for (double v : r2) oracle += v;
  oracle /= static_cast<long double>(r2.size());
  CHECK(std::abs(mse(x, y) - static_cast<double>(oracle)) <= 1e-15);
}

TEST_CASE("epistemic std") {
  auto same = bnn::summarize(Tensor::matrix({{2.0, 5.0}, {2.0, 5.0}}));
  CHECK(epistemic_std(same) == 0.0);
  auto two = bnn::summarize(Tensor::matrix({{1.0}, {3.0}}));
  CHECK(epistemic_std(two) == 1.0);

  Rng rng(4);
  auto samples = random_samples(rng, 37, 11);
  double oracle = 0.0;
  for (std::size_t j = 0; j < 11; ++j) {
    double m = 0.0;
    double m2 = 0.0;
    for (std::size_t i = 0; i < 37; ++i) {
      m += samples.at(i, j);
      m2 += samples.at(i, j) * samples.at(i, j);
    }
    m /= 37.0;
    m2 /= 37.0;
    oracle += std::sqrt(m2 - m * m);
  }
  CHECK(epistemic_std(bnn::summarize(samples)) == doctest::Approx(oracle / 11.0).epsilon(1e-12));
}

TEST_CASE("crps examples") {
  CHECK(crps_point(std::vector<double>{0.5, 0.5, 0.5}, 0.5) == 0.0);
  CHECK(crps_point(std::vector<double>{0.0, 1.0}, 0.5) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(crps_point(std::vector<double>{1.0}, 0.0), ContractError);
  // Two equal members: CRPS reduces to absolute error.
  CHECK(crps_ensemble(Tensor::matrix({{1.5, 2.0}, {1.5, 2.0}}), std::vector<double>{1.0, 3.0}) ==
        doctest::Approx(0.75));
}

TEST_CASE("crps matches the brute-force double sum") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 60);
    std::vector<double> xs(n);
    for (auto& v : xs) v = 3.0 * rng.normal();
    const double y = rng.normal();
    const double oracle = brute_force_crps(xs, y);
    CHECK(std::abs(crps_point(xs, y) - oracle) <= 1e-12 * std::max(1.0, std::abs(oracle)));
  }
}

TEST_CASE("crps of a large Gaussian ensemble matches the closed form") {
  // Members at the (i + 1/2)/N quantiles, so the comparison is free of sampling noise.
  const double mu = 0.3;
  const double sigma = 1.7;
  const std::size_t n = 10000;
  std::vector<double> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = mu + sigma * normal_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(n));
  }
  for (double y : {0.3, 1.0, -2.5, 6.0}) {
    const double exact = crps_gaussian(mu, sigma, y);
    CHECK(std::abs(crps_point(xs, y) - exact) <= 0.01 * exact);
  }
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == doctest::Approx(0.23369497725510913).epsilon(1e-12));
}

TEST_CASE("crps of a random Gaussian ensemble is within sampling error") {
  Rng rng(21);
  std::vector<double> xs(10000);
  for (auto& v : xs) v = rng.normal();
  // The estimator's spread at N = 1e4 is about 0.006 for a standard normal.
  CHECK(std::abs(crps_point(xs, 0.5) - crps_gaussian(0.0, 1.0, 0.5)) <= 0.02);
}

TEST_CASE("crps properties") {
  Rng rng(13);
  std::vector<double> xs(25);
  for (auto& v : xs) v = rng.normal();
  const double base = crps_point(xs, 0.2);
  CHECK(base >= 0.0);
  std::vector<double> shifted(xs);
  for (auto& v : shifted) v += 4.0;
  CHECK(crps_point(shifted, 4.2) == doctest::Approx(base).epsilon(1e-12));

  double prev = crps_point(std::vector<double>{1.0, 1.0}, 1.0);
  for (double spread : {0.1, 0.5, 1.0, 2.0}) {
    const double c = crps_point(std::vector<double>{1.0 - spread, 1.0 + spread}, 1.0);
    CHECK(c > prev);
    prev = c;
  }
}

TEST_CASE("violation counts use the posterior mean") {
  constraints::ConstraintSpec lower;
  lower.kind = constraints::Kind::lower_bound;
  lower.grid = constraints::Grid::uniform(10, 0.0, 1.0);
  // Two members whose mean is below zero at exactly three points.
  std::vector<double> a(10, 1.0);
  std::vector<double> b(10, 1.0);
  for (std::size_t j : {1, 4, 7}) {
    a[j] = -0.5;
    b[j] = -1.5;
  }
  a[9] = -0.5;  // mean 0.25 at the last point: counted per sample only
  std::vector<double> flat(a);
  flat.insert(flat.end(), b.begin(), b.end());
  std::vector<bnn::PredictiveSummary> s{bnn::summarize(Tensor({2, 10}, flat))};
  std::vector<constraints::ConstraintSpec> specs{lower};

  auto stats = violation_stats(specs, s);
  CHECK(stats.n[0] == 3);
  CHECK(stats.v[0] == doctest::Approx((0.5 + 1.5) * 3 / 2.0 / 10.0 + 0.5 / 2.0 / 10.0));
  CHECK(violation_stats(specs, s, CountMode::any_sample).n[0] == 4);

  std::vector<bnn::PredictiveSummary> ok{
      bnn::summarize(Tensor({2, 10}, std::vector<double>(20, 1.0)))};
  auto clean = violation_stats(specs, ok);
  CHECK(clean.v[0] == 0.0);
  CHECK(clean.n[0] == 0);
}
