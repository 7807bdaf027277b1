#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbnn/constraint.hpp"
#include "cbnn/network.hpp"

namespace cbnn::train {

using autodiff::Tape;
using autodiff::Tensor;
using autodiff::Var;
using constraints::ConstraintSpec;

enum class Mode { unconstrained, soft, hard, cocp };
enum class Backend { bbb, svgd, dropout };
enum class OptimizerKind { adam, sgd };

Mode parse_mode(const std::string& s);
Backend parse_backend(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(Mode m);
std::string to_string(Backend b);
std::string to_string(OptimizerKind o);

struct TrainConfig {
  Mode mode = Mode::unconstrained;
  Backend backend = Backend::bbb;
  double lambda = 10.0;
  std::vector<double> c_weights;  // cocp, one per constraint
  std::size_t epochs = 100;
  std::size_t steps_per_epoch = 10;
  double learning_rate = 1e-2;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t mc_samples = 4;
  std::uint64_t seed = 0;
  std::size_t dual_update_every = 0;  // steps; 0 means once per epoch
  double growth = 1.005;
  std::size_t dual_samples = 32;
  double s_init = 1.0;
  double rho_init = 1.0;
  bnn::KlMethod kl = bnn::KlMethod::closed_form;
  std::size_t particles = 20;
  double weight_decay = 1e-4;  // dropout L2 on the weight matrices
  double kl_weight = 1.0;      // multiplies the KL (or log prior) term
  double log_var_init = -6.0;
  bool learn_obs_noise = true;  // false pins obs_log_var at the network's initial value
  bnn::GaussianPrior prior;

  /// ContractError for invalid values or unsupported mode/backend pairs.
  void validate() const;
  std::size_t dual_interval() const { return dual_update_every ? dual_update_every : steps_per_epoch; }
};

nlohmann::json to_json(const TrainConfig& c);
/// Strict: unknown keys are a ParseError. Missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---- augmented Lagrangian pieces -------------------------------------------

struct DualState {
  std::vector<double> s;
  std::vector<double> rho;
  std::vector<double> z;

  static DualState initial(std::size_t n, double s0 = 1.0, double rho0 = 1.0);
  void validate() const;
  std::size_t size() const { return s.size(); }
};

/// max(Ef - s/rho, 0)
double compute_z(double ef, double s, double rho);
/// -s Ef + rho Ef^2 / 2 when Ef <= s/rho, else -s^2 / (2 rho).
double phi(double ef, double s, double rho);
/// d phi / d Ef.
double phi_derivative(double ef, double s, double rho);
Var phi(Var ef, double s, double rho);
/// s <- max(0, s - rho Ef), rho <- growth rho, z refreshed at the new duals.
DualState dual_update(const DualState& dual, std::span<const double> ef, double growth);

// ---- objectives -------------------------------------------------------------

/// Everything an objective needs for one step. `eps` holds one standard
/// normal draw per Monte Carlo sample.
struct ObjectiveInputs {
  Var mu;
  Var log_var;
  Var obs_log_var;
  const bnn::NetworkSpec* net = nullptr;
  bnn::GaussianPrior prior;
  const Tensor* x = nullptr;
  const Tensor* y = nullptr;
  std::span<const ConstraintSpec> constraints;
  std::span<const Tensor> eps;
  bnn::KlMethod kl = bnn::KlMethod::closed_form;
  double kl_weight = 1.0;
};

struct ObjectiveTerms {
  Var loss;
  Var nll;  // mean over samples of the summed Gaussian NLL
  Var kl;  // unweighted
  std::vector<Var> ef;  // expected constraint values
};

/// kl_weight * KL + NLL; also evaluates Ef for reporting when constraints are given.
ObjectiveTerms elbo_objective(const ObjectiveInputs& in);
/// KL + NLL - lambda * sum_i weight_i Ef_i.
ObjectiveTerms soft_objective(const ObjectiveInputs& in, double lambda);
/// KL + NLL + sum_i phi(Ef_i, s_i, rho_i).
ObjectiveTerms hard_objective(const ObjectiveInputs& in, const DualState& dual);
/// Monte Carlo KL against the prior reweighted by exp(sum_i c_i f_i) + NLL.
ObjectiveTerms cocp_objective(const ObjectiveInputs& in, std::span<const double> c_weights);

// ---- optimizers ---------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, std::size_t size);
  /// In-place descent step along `grad`.
  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

// ---- SVGD -------------------------------------------------------------------

using ScoreFn = std::function<std::vector<double>(std::span<const double>)>;

/// Squared-exponential bandwidth from the median pairwise distance:
/// h = med^2 / log(n + 1). Falls back to 1 when all particles coincide.
double median_bandwidth(std::span<const std::vector<double>> particles);
/// Stein direction for every particle, given grad log p at each particle.
std::vector<std::vector<double>> svgd_direction(std::span<const std::vector<double>> particles,
                                                std::span<const std::vector<double>> scores);
/// Runs `iterations` transport steps in place with a fixed step size.
void svgd_run(std::vector<std::vector<double>>& particles, const ScoreFn& score, double step,
              std::size_t iterations);

// ---- training ---------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  std::vector<double> ef;
  std::vector<double> s;
  std::vector<double> rho;
  std::vector<double> z;
};

nlohmann::json to_json(const EpochRecord& r);

enum class ModelKind { variational, particles, dropout };
std::string to_string(ModelKind k);

/// Trained state for any backend.
struct TrainedModel {
  ModelKind kind = ModelKind::variational;
  bnn::VariationalParams params;     // variational
  std::vector<Tensor> particles;     // particles: network weights only
  std::vector<double> particle_obs_log_var;
  Tensor weights;                    // dropout: deterministic M
  double obs_log_var = 0.0;
  DualState dual;
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochRecord> history;
};

/// Optional per-epoch hook (history streaming, progress).
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train_bbb(const TrainConfig& config, const bnn::NetworkSpec& net, const Tensor& x,
                      const Tensor& y, std::span<const ConstraintSpec> constraints,
                      const EpochCallback& on_epoch = {});
TrainResult train_svgd(const TrainConfig& config, const bnn::NetworkSpec& net, const Tensor& x,
                       const Tensor& y, std::span<const ConstraintSpec> constraints,
                       const EpochCallback& on_epoch = {});
TrainResult train_dropout(const TrainConfig& config, const bnn::NetworkSpec& net, const Tensor& x,
                          const Tensor& y, std::span<const ConstraintSpec> constraints,
                          const EpochCallback& on_epoch = {});
/// Dispatches on config.backend.
TrainResult train(const TrainConfig& config, const bnn::NetworkSpec& net, const Tensor& x,
                  const Tensor& y, std::span<const ConstraintSpec> constraints,
                  const EpochCallback& on_epoch = {});

/// Predictive ensemble of a trained model. Particle models ignore `samples`.
bnn::PredictiveSummary predict(const TrainedModel& model, const bnn::NetworkSpec& net,
                               const Tensor& x, std::size_t samples, Rng& rng);

nlohmann::json to_json(const TrainedModel& m);
/// ContractError when the checkpoint does not fit `net`.
TrainedModel model_from_json(const nlohmann::json& j, const bnn::NetworkSpec& net);

}  // namespace cbnn::train
