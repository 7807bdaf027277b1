#include "cbnn/constraint.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cbnn/errors.hpp"

namespace cbnn::constraints {

using autodiff::Shape;
using autodiff::Tape;
using bnn::NetworkSpec;

BoundExpr BoundExpr::constant(double value) {
  BoundExpr e;
  e.kind = Kind::constant;
  e.c = value;
  return e;
}

BoundExpr BoundExpr::affine(double k, double c) {
  BoundExpr e;
  e.kind = Kind::affine;
  e.k = k;
  e.c = c;
  return e;
}

BoundExpr BoundExpr::log_affine(double k, double c, double scale, double shift) {
  return BoundExpr{Kind::log_affine, k, c, scale, shift};
}

double BoundExpr::operator()(double x) const {
  switch (kind) {
    case Kind::constant: return c;
    case Kind::affine: return k * x + c;
    case Kind::log_affine: {
      const double arg = k * x + c;
      if (!(arg > 0.0)) {
        throw DomainError("bound log argument " + std::to_string(arg) + " is not positive at x = " +
                          std::to_string(x));
      }
      return scale * std::log(arg) + shift;
    }
  }
  return c;
}

Kind parse_kind(const std::string& name) {
  if (name == "conditional_value") return Kind::conditional_value;
  if (name == "lower_bound") return Kind::lower_bound;
  if (name == "upper_bound") return Kind::upper_bound;
  if (name == "band") return Kind::band;
  if (name == "monotone") return Kind::monotone;
  if (name == "curvature") return Kind::curvature;
  throw ParseError("unknown constraint kind '" + name + "'");
}

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::conditional_value: return "conditional_value";
    case Kind::lower_bound: return "lower_bound";
    case Kind::upper_bound: return "upper_bound";
    case Kind::band: return "band";
    case Kind::monotone: return "monotone";
    case Kind::curvature: return "curvature";
  }
  return "lower_bound";
}

Grid Grid::uniform(std::size_t count, double lo, double hi) {
  if (count == 0) throw ContractError("grid needs at least one point");
  if (lo > hi) throw ContractError("grid range is not ordered");
  Grid g;
  g.points.resize(count);
  if (count == 1) {
    g.points[0] = lo;
    return g;
  }
  const double step = (hi - lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) g.points[i] = lo + step * static_cast<double>(i);
  g.points.back() = hi;
  return g;
}

void ConstraintSpec::validate() const {
  if (margin < 0.0) throw ContractError("constraint margin must be non-negative");
  if (grid.points.empty()) throw ContractError("constraint grid is empty");
  if (region && region->first > region->second) {
    throw ContractError("constraint region [" + std::to_string(region->first) + ", " +
                        std::to_string(region->second) + "] is not ordered");
  }
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("epsilon must lie in [0, 1]");
  if (weight < 0.0) throw ContractError("constraint weight must be non-negative");
  if (sign != 1 && sign != -1) throw ContractError("constraint sign must be +1 or -1");
  if (derivative == DerivativeMode::autodiff && kind != Kind::monotone) {
    throw ContractError("autodiff derivatives are only available for monotone constraints");
  }
  const bool uses_lower = kind == Kind::lower_bound || kind == Kind::band;
  const bool uses_upper = kind == Kind::upper_bound || kind == Kind::band;
  for (double x : grid.points) {
    if (uses_lower) lower(x);
    if (uses_upper) upper(x);
    if (kind == Kind::band && lower(x) > upper(x)) {
      throw ContractError("band lower bound exceeds upper bound at x = " + std::to_string(x));
    }
  }
}

namespace {

std::vector<std::size_t> in_region(const ConstraintSpec& spec, const Tensor& x) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!spec.region || (x[i] >= spec.region->first && x[i] <= spec.region->second)) {
      idx.push_back(i);
    }
  }
  return idx;
}

Var as_column(Var v) {
  const std::size_t n = v.value().size();
  if (v.shape() == Shape{n, 1}) return v;
  return slice(v, 0, Shape{n, 1});
}

// Picks the rows listed in idx via a constant selection matrix.
Var select(Var column, const std::vector<std::size_t>& idx) {
  const std::size_t n = column.value().size();
  if (idx.size() == n) return column;
  std::vector<double> s(idx.size() * n, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) s[r * n + idx[r]] = 1.0;
  return matmul(column.tape().constant(Tensor({idx.size(), n}, std::move(s))), column);
}

template <typename F>
Tensor column_of(const std::vector<double>& xs, F f) {
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return Tensor::column(std::move(out));
}

// (y_{j+1} - y_j) / (x_{j+1} - x_j)
Var first_difference(Var y, const std::vector<double>& xs) {
  const std::size_t m = xs.size();
  std::vector<double> inv(m - 1);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const double dx = xs[j + 1] - xs[j];
    if (!(dx > 0.0)) throw ContractError("derivative constraints need a strictly ascending grid");
    inv[j] = 1.0 / dx;
  }
  return (rows(y, 1, m) - rows(y, 0, m - 1)) * y.tape().constant(Tensor::column(std::move(inv)));
}

}  // namespace

Var point_scores(const ConstraintSpec& spec, const Tensor& x, Var y, std::optional<Var> slope) {
  spec.validate();
  const std::size_t n = x.size();
  if (y.value().size() != n) {
    throw DimensionError("constraint got " + std::to_string(y.value().size()) +
                         " predictions for " + std::to_string(n) + " inputs");
  }
  const auto idx = in_region(spec, x);
  if (idx.empty()) throw ContractError("no evaluation point lies inside the constraint region");
  std::vector<double> xs(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) xs[r] = x[idx[r]];

  Tape& tape = y.tape();
  Var ys = select(as_column(y), idx);
  Var score;
  switch (spec.kind) {
    case Kind::conditional_value:
      score = -abs(ys - spec.target);
      break;
    case Kind::lower_bound:
      score = ys - tape.constant(column_of(xs, spec.lower));
      break;
    case Kind::upper_bound:
      score = tape.constant(column_of(xs, spec.upper)) - ys;
      break;
    case Kind::band: {
      Tensor half = column_of(xs, [&](double v) { return 0.5 * (spec.upper(v) - spec.lower(v)); });
      Tensor mid = column_of(xs, [&](double v) { return 0.5 * (spec.upper(v) + spec.lower(v)); });
      score = tape.constant(std::move(half)) - abs(ys - tape.constant(std::move(mid)));
      break;
    }
    case Kind::monotone:
      if (spec.derivative == DerivativeMode::autodiff) {
        if (!slope) throw ContractError("autodiff monotone constraint needs the input slope");
        score = select(as_column(*slope), idx) * static_cast<double>(spec.sign);
      } else {
        if (xs.size() < 2) throw ContractError("monotone constraint needs at least 2 grid points");
        score = first_difference(ys, xs) * static_cast<double>(spec.sign);
      }
      break;
    case Kind::curvature: {
      const std::size_t m = xs.size();
      if (m < 3) throw ContractError("curvature constraint needs at least 3 grid points");
      Var d = first_difference(ys, xs);
      std::vector<double> scale(m - 2);
      for (std::size_t j = 1; j + 1 < m; ++j) scale[j - 1] = 2.0 / (xs[j + 1] - xs[j - 1]);
      Var dd = (rows(d, 1, m - 1) - rows(d, 0, m - 2)) * tape.constant(Tensor::column(scale));
      score = dd * static_cast<double>(spec.sign);
      break;
    }
  }
  return min_const(score + spec.margin, 0.0);
}

std::vector<double> point_scores(const ConstraintSpec& spec, std::span<const double> x,
                                 std::span<const double> y) {
  Tape tape;
  Var yv = tape.constant(Tensor::column({y.begin(), y.end()}));
  return point_scores(spec, Tensor::column({x.begin(), x.end()}), yv).value().vector();
}

Var eval_constraint(const ConstraintSpec& spec, const Tensor& x, Var y, std::optional<Var> slope) {
  return mean(point_scores(spec, x, y, slope));
}

double eval_constraint(const ConstraintSpec& spec, std::span<const double> x,
                       std::span<const double> y) {
  const auto s = point_scores(spec, x, y);
  double total = 0.0;
  for (double v : s) total += v;
  return total / static_cast<double>(s.size());
}

namespace {

struct GridOutputs {
  Var output;
  std::optional<Var> slope;
};

template <typename Forward>
std::vector<Var> expected_over_draws(std::span<const ConstraintSpec> specs, std::size_t draws,
                                     Forward forward_on_grid) {
  if (draws == 0) throw ContractError("expected constraint needs at least one draw");
  std::vector<Var> totals(specs.size());
  for (std::size_t k = 0; k < draws; ++k) {
    std::map<std::vector<double>, GridOutputs> cache;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const ConstraintSpec& spec = specs[i];
      auto it = cache.find(spec.grid.points);
      if (it == cache.end() || (spec.needs_slope() && !it->second.slope)) {
        it = cache.insert_or_assign(spec.grid.points, forward_on_grid(k, spec)).first;
      }
      Var value = eval_constraint(spec, spec.grid.column(), it->second.output, it->second.slope);
      totals[i] = k == 0 ? value : totals[i] + value;
    }
  }
  for (auto& t : totals) t = t / static_cast<double>(draws);
  return totals;
}

}  // namespace

std::vector<Var> expected_constraints(std::span<const ConstraintSpec> specs,
                                      const NetworkSpec& net, std::span<const Var> draws) {
  return expected_over_draws(specs, draws.size(), [&](std::size_t k, const ConstraintSpec& spec) {
    Tape& tape = draws[k].tape();
    Var x = tape.constant(spec.grid.column());
    if (spec.needs_slope()) {
      auto res = bnn::forward_with_slope(net, draws[k], x);
      return GridOutputs{res.output, res.slope};
    }
    return GridOutputs{bnn::forward(net, draws[k], x), std::nullopt};
  });
}

std::vector<Var> expected_constraints_dropout(std::span<const ConstraintSpec> specs,
                                              const NetworkSpec& net, Var weights,
                                              std::span<const bnn::DropoutMasks> masks) {
  return expected_over_draws(specs, masks.size(), [&](std::size_t k, const ConstraintSpec& spec) {
    if (spec.needs_slope()) {
      throw ContractError("autodiff monotone constraints are not available with dropout");
    }
    Var x = weights.tape().constant(spec.grid.column());
    return GridOutputs{bnn::dropout_forward(net, weights, x, masks[k]), std::nullopt};
  });
}

double expected_constraint(const ConstraintSpec& spec, const NetworkSpec& net,
                           const bnn::VariationalParams& params, std::size_t samples, Rng& rng) {
  if (samples < 1) throw ContractError("expected constraint needs K >= 1");
  Tape tape;
  std::vector<Var> draws;
  for (std::size_t k = 0; k < samples; ++k) {
    draws.push_back(tape.constant(bnn::sample_weights(params, rng).weights));
  }
  return expected_constraints(std::span(&spec, 1), net, draws).front().item();
}

Var composite(std::span<const Var> values, std::span<const double> weights) {
  if (values.size() != weights.size()) {
    throw DimensionError("composite: " + std::to_string(values.size()) + " constraints but " +
                         std::to_string(weights.size()) + " weights");
  }
  if (values.empty()) throw ContractError("composite of an empty constraint list");
  Var total;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("composite weights must be non-negative");
    Var term = values[i] * weights[i];
    total = i == 0 ? term : total + term;
  }
  return total;
}

double composite(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) {
    throw DimensionError("composite: constraint and weight counts differ");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("composite weights must be non-negative");
    total += weights[i] * values[i];
  }
  return total;
}

double estimate_violation_probability(const ConstraintSpec& spec, const NetworkSpec& net,
                                      const bnn::VariationalParams& params, std::size_t samples,
                                      Rng& rng) {
  if (samples < 100) throw ContractError("violation probability needs K >= 100");
  std::size_t violating = 0;
  for (std::size_t k = 0; k < samples; ++k) {
    Tape tape;
    Var w = tape.constant(bnn::sample_weights(params, rng).weights);
    Var x = tape.constant(spec.grid.column());
    Var scores;
    if (spec.needs_slope()) {
      auto res = bnn::forward_with_slope(net, w, x);
      scores = point_scores(spec, spec.grid.column(), res.output, res.slope);
    } else {
      scores = point_scores(spec, spec.grid.column(), bnn::forward(net, w, x));
    }
    const auto& v = scores.value().values();
    if (std::any_of(v.begin(), v.end(), [](double s) { return s < -kViolationTolerance; })) {
      ++violating;
    }
  }
  return static_cast<double>(violating) / static_cast<double>(samples);
}

bool epsilon_satisfied(const ConstraintSpec& spec, double violation_probability) {
  return violation_probability <= spec.epsilon;
}

// ---- JSON -----------------------------------------------------------------

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                    const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ParseError("unknown key '" + key + "' in " + where);
    }
  }
}

double number(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ParseError("missing key '" + std::string(key) + "' in " + where);
  if (!j.at(key).is_number()) throw ParseError("'" + std::string(key) + "' must be a number in " + where);
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::json to_json(const BoundExpr& e) {
  switch (e.kind) {
    case BoundExpr::Kind::constant: return {{"type", "constant"}, {"value", e.c}};
    case BoundExpr::Kind::affine: return {{"type", "affine"}, {"k", e.k}, {"c", e.c}};
    case BoundExpr::Kind::log_affine:
      return {{"type", "log_affine"}, {"k", e.k}, {"c", e.c}, {"scale", e.scale}, {"shift", e.shift}};
  }
  return {};
}

BoundExpr bound_from_json(const nlohmann::json& j) {
  if (j.is_number()) return BoundExpr::constant(j.get<double>());
  if (!j.is_object() || !j.contains("type")) throw ParseError("bound must be a number or {type, ...}");
  const std::string type = j.at("type").get<std::string>();
  if (type == "constant") {
    reject_unknown(j, {"type", "value"}, "constant bound");
    return BoundExpr::constant(number(j, "value", "constant bound"));
  }
  if (type == "affine") {
    reject_unknown(j, {"type", "k", "c"}, "affine bound");
    return BoundExpr::affine(number(j, "k", "affine bound"), number(j, "c", "affine bound"));
  }
  if (type == "log_affine") {
    reject_unknown(j, {"type", "k", "c", "scale", "shift"}, "log_affine bound");
    const std::string w = "log_affine bound";
    return BoundExpr::log_affine(number(j, "k", w), number(j, "c", w),
                                 j.value("scale", 1.0), j.value("shift", 0.0));
  }
  throw ParseError("unknown bound type '" + type + "'");
}

nlohmann::json to_json(const ConstraintSpec& spec) {
  nlohmann::json params = nlohmann::json::object();
  params["margin"] = spec.margin;
  switch (spec.kind) {
    case Kind::conditional_value: params["target"] = spec.target; break;
    case Kind::lower_bound: params["bound"] = to_json(spec.lower); break;
    case Kind::upper_bound: params["bound"] = to_json(spec.upper); break;
    case Kind::band:
      params["lower"] = to_json(spec.lower);
      params["upper"] = to_json(spec.upper);
      break;
    case Kind::monotone:
      params["sign"] = spec.sign;
      params["derivative"] =
          spec.derivative == DerivativeMode::autodiff ? "autodiff" : "finite_difference";
      break;
    case Kind::curvature: params["sign"] = spec.sign; break;
  }
  if (spec.region) params["region"] = {spec.region->first, spec.region->second};
  return {{"name", spec.name},
          {"kind", to_string(spec.kind)},
          {"params", params},
          {"grid", {{"points", spec.grid.points}}},
          {"weight", spec.weight},
          {"epsilon", spec.epsilon}};
}

ConstraintSpec constraint_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("constraint must be a JSON object");
  reject_unknown(j, {"name", "kind", "params", "grid", "weight", "epsilon"}, "constraint");
  ConstraintSpec spec;
  if (!j.contains("kind")) throw ParseError("constraint is missing 'kind'");
  spec.kind = parse_kind(j.at("kind").get<std::string>());
  spec.name = j.value("name", to_string(spec.kind));
  const std::string where = "constraint '" + spec.name + "'";
  spec.weight = j.value("weight", 1.0);
  spec.epsilon = j.value("epsilon", 0.0);

  const nlohmann::json params = j.value("params", nlohmann::json::object());
  reject_unknown(params, {"margin", "target", "bound", "lower", "upper", "sign", "derivative", "region"},
                 where + " params");
  spec.margin = params.value("margin", 0.0);
  spec.sign = params.value("sign", 1);
  if (params.contains("region")) {
    const auto& r = params.at("region");
    if (!r.is_array() || r.size() != 2) throw ParseError("region must be [x_a, x_b] in " + where);
    spec.region = std::pair{r[0].get<double>(), r[1].get<double>()};
  }
  if (params.contains("derivative")) {
    const std::string d = params.at("derivative").get<std::string>();
    if (d == "autodiff") spec.derivative = DerivativeMode::autodiff;
    else if (d == "finite_difference") spec.derivative = DerivativeMode::finite_difference;
    else throw ParseError("unknown derivative mode '" + d + "' in " + where);
  }
  switch (spec.kind) {
    case Kind::conditional_value: spec.target = number(params, "target", where); break;
    case Kind::lower_bound:
      spec.lower = bound_from_json(params.value("bound", nlohmann::json(0.0)));
      break;
    case Kind::upper_bound:
      if (!params.contains("bound")) throw ParseError("upper_bound needs params.bound in " + where);
      spec.upper = bound_from_json(params.at("bound"));
      break;
    case Kind::band:
      if (!params.contains("lower") || !params.contains("upper")) {
        throw ParseError("band needs params.lower and params.upper in " + where);
      }
      spec.lower = bound_from_json(params.at("lower"));
      spec.upper = bound_from_json(params.at("upper"));
      break;
    case Kind::monotone:
    case Kind::curvature: break;
  }

  if (!j.contains("grid")) throw ParseError("constraint is missing 'grid' in " + where);
  const auto& g = j.at("grid");
  reject_unknown(g, {"points", "count", "range"}, where + " grid");
  if (g.contains("points")) {
    spec.grid.points = g.at("points").get<std::vector<double>>();
  } else {
    if (!g.contains("count") || !g.contains("range") || g.at("range").size() != 2) {
      throw ParseError("grid needs 'points' or 'count' with 'range' in " + where);
    }
    const double lo = g.at("range")[0].get<double>();
    const double hi = g.at("range")[1].get<double>();
    if (lo > hi) throw ContractError("grid range is not ordered in " + where);
    spec.grid = Grid::uniform(g.at("count").get<std::size_t>(), lo, hi);
  }
  spec.validate();
  return spec;
}

}  // namespace cbnn::constraints
