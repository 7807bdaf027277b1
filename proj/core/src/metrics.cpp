#include "cbnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cbnn/errors.hpp"

namespace cbnn::metrics {

double mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw DimensionError("mse: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
  }
  if (pred.empty()) throw ContractError("mse of an empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    total += r * r;
  }
  return total / static_cast<double>(pred.size());
}

double epistemic_std(const PredictiveSummary& summary) {
  if (summary.ensemble_size() < 2) throw ContractError("epistemic std needs at least 2 samples");
  double total = 0.0;
  for (double s : summary.std) total += s;
  return total / static_cast<double>(summary.std.size());
}

double crps_point(std::span<const double> ensemble, double target) {
  const std::size_t n = ensemble.size();
  if (n < 2) throw ContractError("CRPS needs an ensemble of at least 2 members");
  std::vector<double> sorted(ensemble.begin(), ensemble.end());
  std::sort(sorted.begin(), sorted.end());
  double abs_err = 0.0;
  // sum_ij |x_i - x_j| = 2 sum_i (2i - n + 1) x_(i) for ascending x_(i)
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    abs_err += std::abs(sorted[i] - target);
    spread += (2.0 * static_cast<double>(i) - static_cast<double>(n) + 1.0) * sorted[i];
  }
  const double nn = static_cast<double>(n);
  return abs_err / nn - spread / (nn * nn);
}

double crps_ensemble(const Tensor& samples, std::span<const double> target) {
  if (samples.rank() != 2) throw DimensionError("CRPS samples must be N x n");
  const std::size_t n_members = samples.rows();
  const std::size_t points = samples.cols();
  if (points != target.size()) {
    throw DimensionError("CRPS: " + std::to_string(points) + " points but " +
                         std::to_string(target.size()) + " targets");
  }
  if (points == 0) throw ContractError("CRPS of an empty input");
  std::vector<double> member(n_members);
  double total = 0.0;
  for (std::size_t j = 0; j < points; ++j) {
    for (std::size_t i = 0; i < n_members; ++i) member[i] = samples.at(i, j);
    total += crps_point(member, target[j]);
  }
  return total / static_cast<double>(points);
}

double crps_gaussian(double mu, double sigma, double y) {
  if (!(sigma > 0.0)) throw DomainError("Gaussian CRPS needs sigma > 0");
  const double z = (y - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

ViolationStats violation_stats(std::span<const constraints::ConstraintSpec> specs,
                               std::span<const PredictiveSummary> summaries, CountMode mode) {
  if (specs.size() != summaries.size()) {
    throw DimensionError("violation_stats: one summary per constraint is required");
  }
  ViolationStats out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto spec = specs[i];
    spec.derivative = constraints::DerivativeMode::finite_difference;
    const auto& s = summaries[i];
    const auto& x = spec.grid.points;
    if (s.points() != x.size()) {
      throw DimensionError("summary for constraint '" + spec.name + "' does not match its grid");
    }
    double expected = 0.0;
    std::vector<bool> violated;
    std::vector<double> row(s.points());
    for (std::size_t k = 0; k < s.ensemble_size(); ++k) {
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = s.samples.at(k, j);
      const auto scores = constraints::point_scores(spec, x, row);
      double mean_score = 0.0;
      for (double v : scores) mean_score += v;
      expected += mean_score / static_cast<double>(scores.size());
      if (mode == CountMode::any_sample) {
        violated.resize(scores.size(), false);
        for (std::size_t j = 0; j < scores.size(); ++j) {
          if (scores[j] < -constraints::kViolationTolerance) violated[j] = true;
        }
      }
    }
    out.v.push_back(expected == 0.0 ? 0.0 : -expected / static_cast<double>(s.ensemble_size()));
    if (mode == CountMode::posterior_mean) {
      const auto scores = constraints::point_scores(spec, x, s.mean);
      out.n.push_back(static_cast<std::size_t>(std::count_if(
          scores.begin(), scores.end(),
          [](double v) { return v < -constraints::kViolationTolerance; })));
    } else {
      out.n.push_back(static_cast<std::size_t>(std::count(violated.begin(), violated.end(), true)));
    }
  }
  return out;
}

nlohmann::json to_json(const MetricsRecord& m, const std::string& config_hash) {
  return {{"mse", m.mse}, {"std", m.std},       {"crps", m.crps},
          {"v", m.v},     {"n", m.n},           {"n_test", m.n_test},
          {"std_convention", "population"},     {"config_hash", config_hash}};
}

}  // namespace cbnn::metrics
