#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbnn/constraint.hpp"
#include "cbnn/network.hpp"

namespace cbnn::metrics {

using autodiff::Tensor;
using bnn::PredictiveSummary;

/// Mean squared residual. DimensionError on length mismatch, ContractError when empty.
double mse(std::span<const double> pred, std::span<const double> target);

/// Per-point population std of the ensemble, averaged over points.
double epistemic_std(const PredictiveSummary& summary);

/// Energy-form ensemble CRPS at one point: mean |x_i - y| - sum_ij |x_i - x_j| / (2 N^2).
double crps_point(std::span<const double> ensemble, double target);
/// Mean over points; `samples` is N x n with N >= 2.
double crps_ensemble(const Tensor& samples, std::span<const double> target);
/// Closed-form CRPS of N(mu, sigma^2) at y.
double crps_gaussian(double mu, double sigma, double y);

enum class CountMode {
  posterior_mean,  // a point counts when the mean prediction violates
  any_sample,      // a point counts when any ensemble member violates
};

struct ViolationStats {
  std::vector<double> v;       // -E_w[f_i]
  std::vector<std::size_t> n;  // violating points per constraint
};

/// summaries[i] holds the ensemble on constraints[i]'s grid. Derivative
/// constraints are scored with finite differences on that grid.
ViolationStats violation_stats(std::span<const constraints::ConstraintSpec> constraints,
                               std::span<const PredictiveSummary> summaries,
                               CountMode mode = CountMode::posterior_mean);

struct MetricsRecord {
  double mse = 0.0;
  double std = 0.0;
  double crps = 0.0;
  std::vector<double> v;
  std::vector<std::size_t> n;
  std::size_t n_test = 0;
};

nlohmann::json to_json(const MetricsRecord& m, const std::string& config_hash);

}  // namespace cbnn::metrics
