#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cbnn_cli/experiment.hpp"

namespace cbnn::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kNumericalAbort = 3 };

/// Parallelism cap from CBNN_THREADS (default: hardware concurrency).
std::size_t thread_budget();

struct RunRecord {
  std::string label;
  train::Mode mode = train::Mode::unconstrained;
  std::vector<double> c_weights;
  train::TrainResult result;
  Evaluation eval;
  double seconds = 0.0;  // training wall time; never written to files
};

/// Trains and evaluates one configuration. When `dir` is non-empty the run
/// leaves checkpoint.json, history.jsonl, metrics.json and predictions.csv there.
RunRecord run_experiment(const ExperimentConfig& config, const std::string& label,
                         const fs::path& dir);

struct ReproReport {
  std::vector<RunRecord> rows;
  std::string markdown;
};

/// sim1: baseline and soft. sim2: baseline, the cocp sweep and hard. Every
/// row uses the config's seed so rows are paired.
ReproReport repro(data::SimId table, const ExperimentConfig& base, const fs::path& out,
                  std::size_t threads);

struct GradcheckResult {
  bool passed = true;
  std::string report;
};
/// Fraction of grid points whose value lies in the band widened by `slack`.
double band_fraction(const constraints::ConstraintSpec& band, const std::vector<double>& mean,
                     double slack = 0.0);

GradcheckResult gradcheck(const ExperimentConfig& config, bool corrupt_gradient);

void write_text(const fs::path& path, const std::string& text);
std::string predictions_csv(const Experiment& exp, const Evaluation& eval, bool raw_samples,
                            const std::string& hash);

int cmd_simulate(const ExperimentConfig& config, std::ostream& out);
int cmd_train(const ExperimentConfig& config, std::ostream& out);
int cmd_evaluate(const ExperimentConfig& config, const std::string& checkpoint, std::ostream& out);
int cmd_gradcheck(const ExperimentConfig& config, bool corrupt_gradient, std::ostream& out);
int cmd_repro(data::SimId table, const ExperimentConfig& config, std::ostream& out);

}  // namespace cbnn::cli
