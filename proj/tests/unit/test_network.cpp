#include <cmath>
#include <numbers>
#include <random>

#include "cbnn/errors.hpp"
#include "cbnn/network.hpp"
#include "doctest.h"
#include "support/finite_diff.hpp"

using namespace cbnn;
using namespace cbnn::bnn;
using autodiff::Shape;

namespace {

// Straightforward triple-loop forward pass used as an oracle.
std::vector<double> naive_forward(const NetworkSpec& spec, const std::vector<double>& w,
                                  const std::vector<double>& x, std::size_t n) {
  std::vector<double> h = x;
  std::size_t width = spec.input_dim();
  std::size_t offset = 0;
  for (const auto& l : spec.layers) {
    std::vector<double> next(n * l.fan_out);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < l.fan_out; ++j) {
        double z = w[offset + l.fan_in * l.fan_out + j];
        for (std::size_t i = 0; i < l.fan_in; ++i) z += h[r * width + i] * w[offset + i * l.fan_out + j];
        double a = z;
        if (l.activation == Activation::relu) a = z > 0 ? z : 0;
        if (l.activation == Activation::rbf) {
          const double c = l.rbf_centers.size() == 1 ? l.rbf_centers[0] : l.rbf_centers[j];
          const double s = l.rbf_widths.size() == 1 ? l.rbf_widths[0] : l.rbf_widths[j];
          a = std::exp(-(z - c) * (z - c) / (s * s));
        }
        next[r * l.fan_out + j] = a;
      }
    }
    offset += l.fan_in * l.fan_out + l.fan_out;
    width = l.fan_out;
    h = std::move(next);
  }
  return h;
}

VariationalParams scalar_params(double mu, double var) {
  return {Tensor::column({mu}), Tensor::column({std::log(var)})};
}

}  // namespace

TEST_CASE("network spec validation") {
  NetworkSpec spec = make_mlp(1, 4, 1, Activation::relu);
  CHECK(spec.param_count() == 4 + 4 + 4 + 1);
  spec.layers[1].fan_in = 3;
  CHECK_THROWS_AS(spec.validate(), ContractError);
  NetworkSpec drop = make_mlp(1, 4, 1, Activation::relu);
  drop.mode = NetMode::dropout;
  drop.layers[0].dropout_p = 1.0;
  CHECK_THROWS_AS(drop.validate(), ContractError);
}

TEST_CASE("sample_weights reparameterization") {
  const VariationalParams p{Tensor::column({0.3, -1.0}), Tensor::column({0.0, std::log(4.0)})};
  SUBCASE("zero noise returns the mean") {
    CHECK(sample_weights(p, Tensor::column({0.0, 0.0})).weights == p.mu);
  }
  SUBCASE("unit variance shifts by eps") {
    CHECK(sample_weights(scalar_params(0.0, 1.0), Tensor::column({1.5})).weights[0] == 1.5);
  }
  SUBCASE("Monte Carlo moments of a scalar weight") {
    Rng rng(99);
    const auto q = scalar_params(2.0, 4.0);
    const int n = 100000;
    double s = 0, ss = 0;
    for (int k = 0; k < n; ++k) {
      const double w = sample_weights(q, rng).weights[0];
      s += w;
      ss += w * w;
    }
    const double m = s / n;
    const double v = ss / n - m * m;
    CHECK(std::abs(m - 2.0) / 2.0 <= 0.02);
    CHECK(std::abs(v - 4.0) / 4.0 <= 0.02);
  }
  SUBCASE("gradient reaches mu and log_var") {
    Tape tape;
    Var mu = tape.leaf(Tensor::column({0.5}));
    Var lv = tape.leaf(Tensor::column({std::log(0.25)}));
    const auto g = tape.backward(sum(reparameterize(mu, lv, Tensor::column({2.0}))));
    CHECK(g.at(mu)[0] == 1.0);
    // dw/dlog_var = 0.5 * sigma * eps
    CHECK(g.at(lv)[0] == doctest::Approx(0.5 * 0.5 * 2.0));
  }
}

TEST_CASE("forward examples") {
  SUBCASE("all-zero weights give zero output") {
    const NetworkSpec spec = make_mlp(2, 5, 1, Activation::relu);
    const Tensor w = Tensor::zeros({spec.param_count(), 1});
    const Tensor out = forward(spec, w, Tensor::matrix({{0.3, -2.0}, {4.0, 1.0}}));
    CHECK(out.vector() == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("single rbf unit at its center") {
    const NetworkSpec spec = make_mlp(1, 1, 1, Activation::rbf);
    // w1 = 1, b1 = 0, w2 = 1, b2 = 0
    const Tensor w = Tensor::column({1.0, 0.0, 1.0, 0.0});
    CHECK(forward(spec, w, Tensor::matrix({{0.0}}))[0] == 1.0);
  }
  SUBCASE("shape mismatch") {
    const NetworkSpec spec = make_mlp(2, 3, 1, Activation::relu);
    const Tensor w = Tensor::zeros({spec.param_count(), 1});
    CHECK_THROWS_AS(forward(spec, w, Tensor::matrix({{1.0, 2.0, 3.0}})), DimensionError);
    CHECK_THROWS_AS(forward(spec, Tensor::zeros({3, 1}), Tensor::matrix({{1.0, 2.0}})),
                    DimensionError);
  }
  SUBCASE("matches the naive loop oracle on random nets") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> nd;
    for (Activation act : {Activation::relu, Activation::rbf, Activation::identity}) {
      NetworkSpec spec;
      spec.layers = {{3, 6, act}, {6, 4, act}, {4, 2, Activation::identity}};
      spec.layers[0].rbf_centers = {0.1, 0.2, -0.3, 0.0, 0.5, -0.1};
      spec.layers[0].rbf_widths = {1.0, 0.7, 1.2, 0.9, 1.1, 2.0};
      std::vector<double> w(spec.param_count()), x(5 * 3);
      for (auto& v : w) v = nd(gen);
      for (auto& v : x) v = nd(gen);
      const Tensor out = forward(spec, Tensor::column(w), Tensor({5, 3}, x));
      const auto expected = naive_forward(spec, w, x, 5);
      REQUIRE(out.size() == expected.size());
      for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(std::abs(out[i] - expected[i]) <= 1e-12);
      }
    }
  }
  SUBCASE("identity activations make the network linear in x") {
    NetworkSpec spec;
    spec.layers = {{2, 3, Activation::identity}, {3, 1, Activation::identity}};
    Rng rng(1);
    const Tensor w = VariationalParams::initialize(spec, rng).mu;
    const Tensor zero = forward(spec, w, Tensor::matrix({{0.0, 0.0}}));
    const Tensor a = forward(spec, w, Tensor::matrix({{1.0, -2.0}}));
    const Tensor b = forward(spec, w, Tensor::matrix({{0.5, 3.0}}));
    const Tensor ab = forward(spec, w, Tensor::matrix({{1.5, 1.0}}));
    CHECK(ab[0] - zero[0] == doctest::Approx((a[0] - zero[0]) + (b[0] - zero[0])));
  }
}

TEST_CASE("forward_with_slope matches finite differences in x") {
  for (Activation act : {Activation::relu, Activation::rbf, Activation::identity}) {
    NetworkSpec spec = make_mlp(1, 8, 1, act);
    Rng rng(17);
    const Tensor w = VariationalParams::initialize(spec, rng).mu;
    const std::vector<double> xs{-0.71, -0.13, 0.37, 0.92};
    Tape tape;
    const auto res = forward_with_slope(spec, tape.constant(w), tape.constant(Tensor::column(xs)));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto f = [&](const std::vector<double>& x) {
        return forward(spec, w, Tensor::column(x))[0];
      };
      const double fd = cbnn::testing::central_difference(f, {xs[i]})[0];
      CHECK(res.slope.value()[i] == doctest::Approx(fd).epsilon(1e-6));
      CHECK(res.output.value()[i] == doctest::Approx(forward(spec, w, Tensor::column({xs[i]}))[0]));
    }
  }
}

TEST_CASE("KL divergence") {
  const GaussianPrior standard{0.0, 1.0};
  CHECK(std::abs(kl_divergence(scalar_params(0.0, 1.0), standard)) <= 1e-12);
  CHECK(std::abs(kl_divergence(scalar_params(1.0, 1.0), standard) - 0.5) <= 1e-12);
  CHECK(std::abs(kl_divergence(scalar_params(0.0, 2.0), standard) - 0.153426409720027345) <=
        1e-12);
  CHECK_THROWS_AS(kl_divergence(scalar_params(0.0, 1.0), standard, KlMethod::monte_carlo, 0),
                  ContractError);
  CHECK_THROWS_AS(kl_divergence(scalar_params(0.0, 1.0), GaussianPrior{0.0, 0.0}), ContractError);

  SUBCASE("Monte Carlo estimate converges to the closed form") {
    Rng rng(5);
    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<double> mu(3), lv(3);
      for (auto& m : mu) m = u(gen);
      for (auto& l : lv) l = u(gen);
      const VariationalParams q{Tensor::column(mu), Tensor::column(lv)};
      const GaussianPrior prior{0.2 * u(gen), 1.0 + 0.5 * u(gen)};
      const double closed = kl_divergence(q, prior);
      const double mc = kl_divergence(q, prior, KlMethod::monte_carlo, 100000, &rng);
      CHECK(std::abs(mc - closed) / std::max(closed, 1e-6) <= 0.02);
    }
  }
}

TEST_CASE("Gaussian negative log-likelihood") {
  Tape tape;
  const double two_pi = 2.0 * std::numbers::pi;
  SUBCASE("exact fit at variance 1/(2 pi) is zero") {
    Var p = tape.constant(Tensor::column({0.3, 0.7}));
    CHECK(std::abs(nll_gaussian(p, p, tape.constant(std::log(1.0 / two_pi))).item()) <= 1e-12);
  }
  SUBCASE("unit residual at unit variance") {
    Var p = tape.constant(Tensor::column({1.0}));
    Var t = tape.constant(Tensor::column({0.0}));
    CHECK(std::abs(nll_gaussian(p, t, tape.constant(0.0)).item() - 1.41893853320467274) <= 1e-12);
  }
  SUBCASE("doubling residuals quadruples the quadratic term") {
    Var t = tape.constant(Tensor::column({0.0, 0.0}));
    Var lv = tape.constant(std::log(1.0 / two_pi));  // constant term vanishes
    const double q1 = nll_gaussian(tape.constant(Tensor::column({0.2, -0.1})), t, lv).item();
    const double q2 = nll_gaussian(tape.constant(Tensor::column({0.4, -0.2})), t, lv).item();
    CHECK(q2 == doctest::Approx(4.0 * q1));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(nll_gaussian(tape.constant(Tensor::column({1.0, 2.0})),
                                 tape.constant(Tensor::column({1.0})), tape.constant(0.0)),
                    DimensionError);
  }
}

TEST_CASE("dropout forward") {
  NetworkSpec spec = make_mlp(1, 6, 1, Activation::relu);
  spec.mode = NetMode::dropout;
  spec.layers[0].dropout_p = 0.3;
  spec.layers[1].dropout_p = 0.3;
  Rng rng(21);
  const Tensor w = VariationalParams::initialize(spec, rng).mu;
  const Tensor x = Tensor::column({-0.5, 0.1, 0.8});
  SUBCASE("all-ones masks reproduce the deterministic pass") {
    CHECK(dropout_forward(spec, w, x, full_masks(spec, 1.0)) == forward(spec, w, x));
  }
  SUBCASE("all-zero masks leave only the output bias") {
    const Tensor out = dropout_forward(spec, w, x, full_masks(spec, 0.0));
    const double b2 = w[spec.layout()[1].bias_offset];
    for (double v : out.values()) CHECK(v == b2);
  }
  SUBCASE("empirical keep rate") {
    std::size_t kept = 0, total = 0;
    for (int k = 0; k < 100000; ++k) {
      const auto m = draw_masks(spec, rng);
      for (const auto& layer : m) {
        for (double z : layer.values()) {
          kept += z == 1.0;
          ++total;
        }
      }
    }
    CHECK(std::abs(static_cast<double>(kept) / total - 0.7) <= 0.01);
  }
}

TEST_CASE("predictive summaries") {
  SUBCASE("injected two-member ensemble") {
    const auto s = summarize(Tensor::matrix({{1.0}, {3.0}}));
    CHECK(s.mean[0] == 2.0);
    CHECK(s.std[0] == 1.0);
    CHECK_THROWS_AS(summarize(Tensor::matrix({{1.0}})), ContractError);
  }
  const NetworkSpec spec = make_mlp(1, 5, 1, Activation::relu);
  Rng init(4);
  auto params = VariationalParams::initialize(spec, init);
  const Tensor x = Tensor::column({-1.0, 0.0, 0.5});
  SUBCASE("degenerate posterior has zero spread") {
    params.log_var = Tensor::filled(params.log_var.shape(), 2.0 * std::log(1e-12));
    Rng rng(1);
    const auto s = predict(params, spec, x, 20, rng);
    for (double sd : s.std) CHECK(sd <= 1e-9);
  }
  SUBCASE("fixed seed is bit-reproducible") {
    params.log_var = Tensor::filled(params.log_var.shape(), -1.0);
    Rng a(77), b(77);
    CHECK(predict(params, spec, x, 30, a).samples == predict(params, spec, x, 30, b).samples);
  }
  SUBCASE("N < 2 is rejected") {
    Rng rng(1);
    CHECK_THROWS_AS(predict(params, spec, x, 1, rng), ContractError);
  }
  SUBCASE("linear-Gaussian net mean converges to the analytic mean") {
    NetworkSpec lin;
    lin.layers = {{1, 1, Activation::identity}};
    const double mw = 1.5, vw = 0.49, mb = -0.3, vb = 0.16;
    const VariationalParams q{Tensor::column({mw, mb}), Tensor::column({std::log(vw), std::log(vb)})};
    const std::vector<double> xs{-1.0, 0.4, 2.0};
    Rng rng(12);
    const auto s = predict(q, lin, Tensor::column(xs), 10000, rng);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double mean = mw * xs[i] + mb;
      const double se = std::sqrt((vw * xs[i] * xs[i] + vb) / 10000.0);
      CHECK(std::abs(s.mean[i] - mean) <= 3.0 * se);
    }
  }
}
