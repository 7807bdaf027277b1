#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbnn/data.hpp"
#include "cbnn/metrics.hpp"
#include "cbnn/trainers.hpp"

namespace cbnn::cli {

using nlohmann::json;

// Unreadable config or unwritable output location.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NetworkConfig {
  std::size_t hidden = 100;
  bnn::Activation activation = bnn::Activation::relu;
  bnn::NetMode mode = bnn::NetMode::variational;
  double dropout_p = 0.1;
  std::vector<double> rbf_centers{0.0};
  std::vector<double> rbf_widths{1.0};
  double obs_log_var_init = -4.605170185988091;  // log 0.01
  double prior_variance = 1.0;
  double log_var_init = -6.0;

  bnn::NetworkSpec build(std::size_t input_dim) const;
};

struct DataConfig {
  std::optional<data::SimSpec> sim;
  std::string train_csv;
  std::string test_csv;
  data::CsvSchema schema;
  bool scale = false;
};

struct EvalConfig {
  std::size_t samples = 200;
  metrics::CountMode count = metrics::CountMode::posterior_mean;
  bool raw_samples = false;
};

struct GradcheckConfig {
  std::size_t hidden = 6;
  bnn::Activation activation = bnn::Activation::rbf;
  std::size_t samples = 3;
  double step = 1e-6;
  double tolerance = 1e-4;
};

struct ReproConfig {
  std::vector<std::vector<double>> c_sweep{{1, 1, 1}, {1, 1, 2}, {1, 2, 1},
                                           {2, 1, 1}, {1, 1, 4}, {1, 1, 8}};
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DataConfig data;
  NetworkConfig network;
  train::TrainConfig train;
  std::optional<std::vector<constraints::ConstraintSpec>> constraints;
  EvalConfig evaluate;
  GradcheckConfig gradcheck;
  ReproConfig repro;
  std::string output = "runs/experiment";

  json document;     // the parsed document after overrides
  std::string hash;  // FNV-1a of the canonical document minus "output"
};

json load_json_file(const std::string& path);
/// `a.b.c=value`; value is read as JSON when it parses, else as a string.
void apply_override(json& doc, const std::string& assignment);
/// 16 hex digits of 64-bit FNV-1a over the canonical dump.
std::string config_hash(const json& doc);
/// Strict: unknown keys anywhere are a ParseError; values are validated.
ExperimentConfig parse_experiment(const json& doc);

/// Built-in documents for the two simulations.
json default_document(data::SimId id);

/// Everything needed to train and score one run.
struct Experiment {
  data::Dataset train;
  data::Dataset test;
  std::vector<constraints::ConstraintSpec> constraints;
  bnn::NetworkSpec net;
  std::optional<data::Scaler> y_scaler;  // set when data is scaled
};

Experiment materialize(const ExperimentConfig& config);

struct Evaluation {
  metrics::MetricsRecord metrics;
  bnn::PredictiveSummary test;  // natural scale
};

/// Scores a model on the test split and on every constraint grid.
Evaluation evaluate_model(const ExperimentConfig& config, const Experiment& exp,
                          const train::TrainedModel& model);

}  // namespace cbnn::cli
