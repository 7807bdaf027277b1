#include <cmath>
#include <numbers>

#include "cbnn/constraint.hpp"
#include "cbnn/errors.hpp"
#include "doctest.h"
#include "support/finite_diff.hpp"

using namespace cbnn;
using namespace cbnn::constraints;
using autodiff::Tape;

namespace {

ConstraintSpec lower_zero(std::vector<double> grid) {
  ConstraintSpec c;
  c.kind = Kind::lower_bound;
  c.grid.points = std::move(grid);
  return c;
}

ConstraintSpec sim2_upper(std::vector<double> grid) {
  ConstraintSpec c;
  c.kind = Kind::upper_bound;
  c.upper = BoundExpr::log_affine(25.0, 1.0, 1.0 / 3.0, 0.05);
  c.grid.points = std::move(grid);
  return c;
}

ConstraintSpec monotone(std::vector<double> grid, int sign = 1) {
  ConstraintSpec c;
  c.kind = Kind::monotone;
  c.sign = sign;
  c.grid.points = std::move(grid);
  return c;
}

// y = w0 * x + w1 with a near-deterministic slope and a standard normal bias.
bnn::VariationalParams bias_only_posterior(double slope) {
  return {autodiff::Tensor::column({slope, 0.0}), autodiff::Tensor::column({-60.0, 0.0})};
}

bnn::NetworkSpec linear_net() {
  bnn::NetworkSpec net;
  net.layers = {bnn::LayerSpec{1, 1, bnn::Activation::identity}};
  return net;
}

}  // namespace

TEST_CASE("lower bound satisfied scores zero") {
  auto c = lower_zero({0.0, 1.0});
  std::vector<double> y{0.5, 0.2};
  CHECK(eval_constraint(c, c.grid.points, y) == 0.0);
}

TEST_CASE("log upper bound score at a single point") {
  auto c = sim2_upper({0.5});
  std::vector<double> y{1.0};
  CHECK(eval_constraint(c, c.grid.points, y) == doctest::Approx(-0.0824367715185387).epsilon(1e-12));
}

TEST_CASE("monotone finite difference score") {
  auto c = monotone({0.0, 0.1, 0.2});
  std::vector<double> y{0.0, 0.1, 0.05};
  auto s = point_scores(c, c.grid.points, y);
  REQUIRE(s.size() == 2);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(eval_constraint(c, c.grid.points, y) == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("composite weighted sum") {
  std::vector<double> f{-0.1, -0.2};
  std::vector<double> s{2.0, 1.0};
  CHECK(composite(f, s) == doctest::Approx(-0.4).epsilon(1e-12));
  std::vector<double> zeros{0.0, 0.0};
  CHECK(composite(f, zeros) == 0.0);
  std::vector<double> short_weights{1.0};
  CHECK_THROWS_AS(composite(f, short_weights), DimensionError);
  std::vector<double> negative{1.0, -1.0};
  CHECK_THROWS_AS(composite(f, negative), ContractError);
}

TEST_CASE("band, conditional value and curvature scores") {
  ConstraintSpec band;
  band.kind = Kind::band;
  band.lower = BoundExpr::constant(2.5);
  band.upper = BoundExpr::constant(3.0);
  band.grid.points = {0.0, 1.0, 2.0};
  auto s = point_scores(band, band.grid.points, std::vector<double>{2.7, 3.2, 2.4});
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(-0.2).epsilon(1e-12));
  CHECK(s[2] == doctest::Approx(-0.1).epsilon(1e-12));

  ConstraintSpec cv;
  cv.kind = Kind::conditional_value;
  cv.target = 1.0;
  cv.margin = 0.25;
  cv.grid.points = {0.0, 1.0};
  s = point_scores(cv, cv.grid.points, std::vector<double>{1.1, 1.5});
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(-0.25).epsilon(1e-12));

  // y = x^2 on a nonuniform grid has second difference 2 everywhere.
  ConstraintSpec curv;
  curv.kind = Kind::curvature;
  curv.grid.points = {0.0, 1.0, 3.0};
  std::vector<double> y{0.0, 1.0, 9.0};
  CHECK(eval_constraint(curv, curv.grid.points, y) == 0.0);
  curv.sign = -1;
  CHECK(eval_constraint(curv, curv.grid.points, y) == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("affine bound and margin") {
  ConstraintSpec c;
  c.kind = Kind::lower_bound;
  c.lower = BoundExpr::affine(2.0, 1.0);
  c.margin = 0.5;
  c.grid.points = {1.0};
  // y - a + m = 2.75 - 3 + 0.5 > 0
  CHECK(eval_constraint(c, c.grid.points, std::vector<double>{2.75}) == 0.0);
  CHECK(eval_constraint(c, c.grid.points, std::vector<double>{2.0}) == doctest::Approx(-0.5));
}

TEST_CASE("region excludes outside points") {
  auto c = lower_zero({-1.0, 0.0, 1.0, 2.0});
  c.region = std::pair{0.0, 1.0};
  std::vector<double> y{-5.0, 1.0, -1.0, -7.0};
  auto s = point_scores(c, c.grid.points, y);
  REQUIRE(s.size() == 2);
  CHECK(eval_constraint(c, c.grid.points, y) == doctest::Approx(-0.5));

  c.region = std::pair{5.0, 6.0};
  CHECK_THROWS_AS(eval_constraint(c, c.grid.points, y), ContractError);
}

TEST_CASE("scores are never positive and monotone ignores shifts") {
  Rng rng(7);
  auto c = monotone({0.0, 0.2, 0.5, 0.6, 1.0});
  auto up = sim2_upper(c.grid.points);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> y(5);
    for (auto& v : y) v = rng.normal();
    for (double s : point_scores(up, up.grid.points, y)) CHECK(s <= 0.0);
    const double base = eval_constraint(c, c.grid.points, y);
    CHECK(base <= 0.0);
    const double shift = 10.0 * rng.normal();
    std::vector<double> shifted(y);
    for (auto& v : shifted) v += shift;
    CHECK(eval_constraint(c, c.grid.points, shifted) == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("satisfied constraint has zero gradient") {
  Tape tape;
  auto c = lower_zero({0.0, 0.5, 1.0});
  auto y = tape.leaf(autodiff::Tensor::column({1.0, 2.0, 3.0}));
  auto f = eval_constraint(c, c.grid.column(), y);
  auto g = tape.backward(f);
  for (double v : g.at(y).values()) CHECK(v == 0.0);
}

TEST_CASE("expected constraint gradient matches finite differences") {
  Rng rng(11);
  auto net = bnn::make_mlp(1, 8, 1, bnn::Activation::relu);
  auto params = bnn::VariationalParams::initialize(net, rng, -2.0);
  std::vector<autodiff::Tensor> eps;
  for (int k = 0; k < 3; ++k) eps.push_back(autodiff::Tensor::column(rng.normals(params.size())));
  std::vector<ConstraintSpec> specs{sim2_upper(Grid::uniform(7, 0.1, 0.9).points),
                                    monotone(Grid::uniform(7, 0.1, 0.9).points)};
  specs[0].upper = BoundExpr::constant(-0.3);
  const std::vector<double> weights{1.0, 2.0};

  auto objective = [&](Tape& tape, autodiff::Var mu) {
    auto lv = tape.constant(params.log_var);
    std::vector<autodiff::Var> draws;
    for (const auto& e : eps) draws.push_back(bnn::reparameterize(mu, lv, e));
    return composite(expected_constraints(specs, net, draws), weights);
  };
  Tape tape;
  auto mu = tape.leaf(params.mu);
  auto grads = tape.backward(objective(tape, mu));
  auto numeric = testing::central_difference(
      [&](const std::vector<double>& m) {
        Tape t;
        return objective(t, t.constant(autodiff::Tensor::column(m))).item();
      },
      params.mu.vector());
  CHECK(testing::max_relative_error(grads.at(mu).vector(), numeric) <= 1e-5);
}

TEST_CASE("autodiff and finite difference monotone agree on a linear net") {
  Tape tape;
  auto net = linear_net();
  auto draw = tape.constant(autodiff::Tensor::column({-1.0, 0.3}));
  auto fd = monotone(Grid::uniform(5, 0.0, 1.0).points);
  auto ad = fd;
  ad.derivative = DerivativeMode::autodiff;
  std::vector<ConstraintSpec> specs{fd, ad};
  auto values = expected_constraints(specs, net, std::span(&draw, 1));
  CHECK(values[0].item() == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(values[1].item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("half-violating posterior gives violation probability near one half") {
  Rng rng(2024);
  auto c = lower_zero({0.0});
  const std::size_t k = 10000;
  const double p = estimate_violation_probability(c, linear_net(), bias_only_posterior(0.0), k, rng);
  CHECK(std::abs(p - 0.5) <= 3.0 * std::sqrt(0.25 / static_cast<double>(k)));
  CHECK_FALSE(epsilon_satisfied(c, p));
  c.epsilon = 0.6;
  CHECK(epsilon_satisfied(c, p));
  CHECK_THROWS_AS(estimate_violation_probability(c, linear_net(), bias_only_posterior(0.0), 99, rng),
                  ContractError);
}

TEST_CASE("Monte Carlo expected constraint matches the Gaussian closed form") {
  // y = b ~ N(0, 1): E[min(0, y)] = -1 / sqrt(2 pi), sd of min(0, y) = sqrt(1/2 - 1/(2 pi)).
  Rng rng(99);
  auto c = lower_zero({0.0});
  const double exact = -1.0 / std::sqrt(2.0 * std::numbers::pi);
  const double sd = std::sqrt(0.5 - 1.0 / (2.0 * std::numbers::pi));
  const std::size_t k = 10000;
  const double est = expected_constraint(c, linear_net(), bias_only_posterior(0.0), k, rng);
  CHECK(std::abs(est - exact) <= 3.0 * sd / std::sqrt(static_cast<double>(k)));
}

TEST_CASE("dropout expectation averages over mask sets") {
  Tape tape;
  auto net = linear_net();
  net.mode = bnn::NetMode::dropout;
  net.layers[0].dropout_p = 0.5;
  auto w = tape.constant(autodiff::Tensor::column({1.0, -0.5}));
  std::vector<bnn::DropoutMasks> masks{bnn::full_masks(net, 1.0), bnn::full_masks(net, 0.0)};
  auto c = lower_zero({1.0});
  std::vector<ConstraintSpec> specs{c};
  // kept: y = 0.5 (satisfied); dropped: y = -0.5
  auto v = expected_constraints_dropout(specs, net, w, masks);
  CHECK(v[0].item() == doctest::Approx(-0.25));
}

TEST_CASE("invalid constraint specs are rejected") {
  CHECK_THROWS_AS(eval_constraint(monotone({0.0}), std::vector<double>{0.0}, std::vector<double>{1.0}),
                  ContractError);
  ConstraintSpec curv;
  curv.kind = Kind::curvature;
  curv.grid.points = {0.0, 1.0};
  CHECK_THROWS_AS(eval_constraint(curv, curv.grid.points, std::vector<double>{0.0, 1.0}),
                  ContractError);
  CHECK_THROWS_AS(eval_constraint(monotone({0.0, 0.0, 1.0}), std::vector<double>{0.0, 0.0, 1.0},
                                  std::vector<double>{0.0, 1.0, 2.0}),
                  ContractError);
  CHECK_THROWS_AS(sim2_upper({-1.0}).validate(), DomainError);
  CHECK_THROWS_AS(BoundExpr::log_affine(1.0, 0.0, 1.0, 0.0)(0.0), DomainError);

  auto c = lower_zero({0.0, 1.0});
  c.region = std::pair{1.0, 0.0};
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = lower_zero({});
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = lower_zero({0.0});
  c.margin = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);

  auto one = lower_zero({0.0, 1.0});
  CHECK_THROWS_AS(eval_constraint(one, one.grid.points, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("constraint JSON round trip") {
  auto c = sim2_upper(Grid::uniform(4, 0.08, 1.0).points);
  c.name = "upper";
  c.margin = 0.01;
  c.region = std::pair{0.1, 0.9};
  c.weight = 3.0;
  c.epsilon = 0.05;
  auto back = constraint_from_json(to_json(c));
  CHECK(back.name == "upper");
  CHECK(back.kind == Kind::upper_bound);
  CHECK(back.grid.points == c.grid.points);
  CHECK(back.upper(0.5) == c.upper(0.5));
  CHECK(back.region == c.region);
  CHECK(back.weight == 3.0);
  CHECK(back.epsilon == 0.05);
  CHECK(to_json(back) == to_json(c));

  auto j = nlohmann::json::parse(R"({"kind": "monotone", "params": {"derivative": "autodiff"},
                                     "grid": {"count": 3, "range": [0, 1]}})");
  auto m = constraint_from_json(j);
  CHECK(m.needs_slope());
  CHECK(m.grid.points == std::vector<double>{0.0, 0.5, 1.0});

  CHECK_THROWS_AS(constraint_from_json(nlohmann::json::parse(
                      R"({"kind": "lower_bound", "grid": {"points": [0]}, "bogus": 1})")),
                  ParseError);
  CHECK_THROWS_AS(constraint_from_json(nlohmann::json::parse(
                      R"({"kind": "sideways", "grid": {"points": [0]}})")),
                  ParseError);
  CHECK_THROWS_AS(constraint_from_json(nlohmann::json::parse(
                      R"({"kind": "lower_bound", "grid": {"count": 3, "range": [1, 0]}})")),
                  ContractError);
}
