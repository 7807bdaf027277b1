#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cbnn/constraint.hpp"
#include "cbnn/tensor.hpp"

namespace cbnn::data {

using autodiff::Tensor;

struct Scaler {
  double min = 0.0;
  double max = 1.0;

  /// Throws DomainError unless max > min.
  void validate() const;
  double scale(double v) const { return (v - min) / (max - min); }
  double inverse(double v) const { return min + v * (max - min); }
};

std::vector<double> minmax_scale(std::span<const double> values, double min, double max);
std::vector<double> minmax_inverse(std::span<const double> scaled, double min, double max);
/// Range of the values; constant columns are rejected with DomainError.
Scaler fit_scaler(std::span<const double> values);

enum class Split { train, test };

struct Dataset {
  Tensor x;  // n x d
  Tensor y;  // n x 1
  std::vector<std::string> x_columns{"x"};
  std::string y_column = "y";
  std::map<std::string, Scaler> scalers;  // applied scalers, by column name
  Split split = Split::train;

  void validate() const;
  std::size_t size() const { return y.size(); }
  std::vector<double> column(std::size_t j) const;
};

/// Fits one scaler per column and returns the scaled copy.
Dataset scale_dataset(const Dataset& ds);
/// Applies existing scalers (e.g. from the training split) to another split.
Dataset scale_dataset(const Dataset& ds, const std::map<std::string, Scaler>& scalers);

double sim2_truth(double x);
/// log(25x + 1)/3 + 0.05; DomainError when 25x + 1 <= 0.
double sim2_upper_bound(double x);
/// Default sim1 target: 4.2 exp(-10 x^2).
double sim1_target(double x);

enum class SimId { sim1, sim2 };
SimId parse_sim_id(const std::string& name);
std::string to_string(SimId id);

struct SimSpec {
  SimId id = SimId::sim2;
  std::pair<double, double> train_range{0.1, 0.65};
  std::pair<double, double> test_range{0.08, 1.0};
  std::size_t train_size = 40;
  std::size_t test_size = 200;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  std::size_t grid_size = 200;
  // sim1 training inputs and optional explicit targets (defaults to sim1_target).
  std::vector<double> sim1_x{-1.0, -0.6, -0.2, 0.2, 0.6, 1.0};
  std::vector<double> sim1_y;

  void validate() const;
  /// Defaults for the given simulation.
  static SimSpec defaults(SimId id);
};

struct SimData {
  Dataset train;
  Dataset test;
  std::vector<constraints::ConstraintSpec> constraints;
};

/// Pure function of (spec, spec.seed).
SimData generate(const SimSpec& spec);

struct CsvSchema {
  std::vector<std::string> x_columns{"x"};
  std::string y_column = "y";
};

/// Writes header + rows with 17 significant digits. When the dataset carries
/// scalers they go to `<path>.scaler.json`.
void save_csv(const Dataset& ds, const std::string& path);
/// ParseError (with line number) on a missing column, non-numeric cell or
/// ragged row. Loads the scaler sidecar when present.
Dataset load_csv(const std::string& path, const CsvSchema& schema = {});

std::string scaler_path(const std::string& csv_path);

}  // namespace cbnn::data
