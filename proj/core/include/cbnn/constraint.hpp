#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbnn/network.hpp"

namespace cbnn::constraints {

using autodiff::Tensor;
using autodiff::Var;

/// Per-point scores below -kViolationTolerance count as violations.
inline constexpr double kViolationTolerance = 1e-6;

/// Input-dependent bound a(x) or b(x).
struct BoundExpr {
  enum class Kind { constant, affine, log_affine };

  Kind kind = Kind::constant;
  double k = 0.0;      // slope (affine) or log argument slope
  double c = 0.0;      // constant value, affine intercept, or log argument intercept
  double scale = 1.0;  // log_affine: scale * log(k x + c) + shift
  double shift = 0.0;

  static BoundExpr constant(double value);
  static BoundExpr affine(double k, double c);
  static BoundExpr log_affine(double k, double c, double scale, double shift);

  /// Throws DomainError when the log argument is not positive.
  double operator()(double x) const;
};

enum class Kind { conditional_value, lower_bound, upper_bound, band, monotone, curvature };
enum class DerivativeMode { finite_difference, autodiff };

Kind parse_kind(const std::string& name);
std::string to_string(Kind kind);

/// Evaluation points for a constraint. Derivative constraints need the
/// points sorted ascending.
struct Grid {
  std::vector<double> points;

  static Grid uniform(std::size_t count, double lo, double hi);
  Tensor column() const { return Tensor::column(points); }
};

/// One knowledge function f(x, y) = min(0, s(x, y) + m), aggregated over the
/// grid by the mean of per-point scores.
struct ConstraintSpec {
  std::string name;
  Kind kind = Kind::lower_bound;
  BoundExpr lower = BoundExpr::constant(0.0);  // a(x): lower_bound, band
  BoundExpr upper = BoundExpr::constant(0.0);  // b(x): upper_bound, band
  double target = 0.0;                         // C: conditional_value
  double margin = 0.0;                         // m >= 0
  int sign = 1;  // monotone: +1 non-decreasing; curvature: +1 convex
  DerivativeMode derivative = DerivativeMode::finite_difference;
  std::optional<std::pair<double, double>> region;  // [x_a, x_b]
  Grid grid;
  double weight = 1.0;   // s_i in a composite
  double epsilon = 0.0;  // allowed violation probability

  void validate() const;
  bool needs_slope() const {
    return kind == Kind::monotone && derivative == DerivativeMode::autodiff;
  }
};

/// Per-point scores (column) for the grid points inside the region. For
/// finite-difference derivative kinds there is one score per difference.
/// `slope` carries dy/dx at every x when the spec uses autodiff derivatives.
Var point_scores(const ConstraintSpec& spec, const Tensor& x, Var y,
                 std::optional<Var> slope = std::nullopt);
std::vector<double> point_scores(const ConstraintSpec& spec, std::span<const double> x,
                                 std::span<const double> y);

/// Grid mean of the per-point scores; <= 0 and zero iff satisfied everywhere.
Var eval_constraint(const ConstraintSpec& spec, const Tensor& x, Var y,
                    std::optional<Var> slope = std::nullopt);
double eval_constraint(const ConstraintSpec& spec, std::span<const double> x,
                       std::span<const double> y);

/// Constraint value averaged over weight draws. Forward passes are shared
/// between constraints that use the same grid.
std::vector<Var> expected_constraints(std::span<const ConstraintSpec> specs,
                                      const bnn::NetworkSpec& net, std::span<const Var> draws);
/// Same for a dropout network: one mask set per draw.
std::vector<Var> expected_constraints_dropout(std::span<const ConstraintSpec> specs,
                                              const bnn::NetworkSpec& net, Var weights,
                                              std::span<const bnn::DropoutMasks> masks);

/// Monte Carlo estimate of E_q[f] for one constraint with K fresh draws.
double expected_constraint(const ConstraintSpec& spec, const bnn::NetworkSpec& net,
                           const bnn::VariationalParams& params, std::size_t samples, Rng& rng);

/// sum_i weights_i * values_i.
Var composite(std::span<const Var> values, std::span<const double> weights);
double composite(std::span<const double> values, std::span<const double> weights);

/// Fraction of K posterior draws whose prediction violates the constraint at
/// any grid point.
double estimate_violation_probability(const ConstraintSpec& spec, const bnn::NetworkSpec& net,
                                      const bnn::VariationalParams& params, std::size_t samples,
                                      Rng& rng);
bool epsilon_satisfied(const ConstraintSpec& spec, double violation_probability);

// JSON form: {name, kind, params, grid, weight, epsilon}.
nlohmann::json to_json(const ConstraintSpec& spec);
ConstraintSpec constraint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BoundExpr& expr);
BoundExpr bound_from_json(const nlohmann::json& j);

}  // namespace cbnn::constraints
