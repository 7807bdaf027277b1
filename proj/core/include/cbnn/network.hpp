#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cbnn/rng.hpp"
#include "cbnn/tape.hpp"
#include "cbnn/tensor.hpp"

namespace cbnn::bnn {

using autodiff::Tape;
using autodiff::Tensor;
using autodiff::Var;

enum class Activation { relu, rbf, identity };
enum class NetMode { variational, dropout };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);
NetMode parse_net_mode(const std::string& name);
std::string to_string(NetMode m);

struct LayerSpec {
  std::size_t fan_in = 1;
  std::size_t fan_out = 1;
  Activation activation = Activation::identity;
  // Bernoulli drop probability of this layer's input units (dropout mode).
  double dropout_p = 0.1;
  // Fixed per-unit RBF parameters; one value or one per output unit.
  std::vector<double> rbf_centers{0.0};
  std::vector<double> rbf_widths{1.0};
};

/// Flat layout of one layer inside the parameter vector: the fan_in x fan_out
/// weight matrix (row-major) followed by the fan_out biases.
struct LayerSlot {
  std::size_t weight_offset;
  std::size_t bias_offset;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  NetMode mode = NetMode::variational;
  double obs_log_var_init = std::log(0.01);

  /// Throws ContractError on a broken layer chain or bad dropout rate.
  void validate() const;
  std::size_t param_count() const;
  std::size_t input_dim() const { return layers.front().fan_in; }
  std::size_t output_dim() const { return layers.back().fan_out; }
  std::vector<LayerSlot> layout() const;
};

/// Single hidden layer MLP: in -> hidden (activation) -> out (identity).
NetworkSpec make_mlp(std::size_t in, std::size_t hidden, std::size_t out, Activation activation);

struct GaussianPrior {
  double mean = 0.0;
  double variance = 1.0;
  void validate() const;
};

/// Mean-field Gaussian posterior q(w | mu, log sigma^2), one entry per weight.
struct VariationalParams {
  Tensor mu;
  Tensor log_var;

  void validate() const;
  std::size_t size() const { return mu.size(); }

  /// mu ~ N(0, 1/fan_in) per layer, log_var constant.
  static VariationalParams initialize(const NetworkSpec& spec, Rng& rng,
                                      double log_var_init = -6.0);
};

/// A reparameterized draw w = mu + exp(log_var / 2) * eps.
struct WeightSample {
  Tensor weights;
  Tensor eps;
};

WeightSample sample_weights(const VariationalParams& params, Rng& rng);
WeightSample sample_weights(const VariationalParams& params, const Tensor& eps);
/// Differentiable form used inside objectives.
Var reparameterize(Var mu, Var log_var, const Tensor& eps);

/// Network output g(x, w) for rows of x. Differentiable in both w and x.
Var forward(const NetworkSpec& spec, Var weights, Var x);
Tensor forward(const NetworkSpec& spec, const Tensor& weights, const Tensor& x);

/// Output and its derivative with respect to a scalar input, propagated as a
/// forward-mode tangent through the tape so both stay differentiable in w.
struct OutputWithSlope {
  Var output;
  Var slope;
};
OutputWithSlope forward_with_slope(const NetworkSpec& spec, Var weights, Var x);

/// One keep-mask per layer (fan_in x 1, entries 0 or 1), z ~ Bernoulli(1 - p).
using DropoutMasks = std::vector<Tensor>;
DropoutMasks draw_masks(const NetworkSpec& spec, Rng& rng);
DropoutMasks full_masks(const NetworkSpec& spec, double value);
/// Forward pass with every layer's weights replaced by M_i * diag(z_i).
Var dropout_forward(const NetworkSpec& spec, Var weights, Var x, const DropoutMasks& masks);
Tensor dropout_forward(const NetworkSpec& spec, const Tensor& weights, const Tensor& x,
                       const DropoutMasks& masks);

enum class KlMethod { closed_form, monte_carlo };

/// Sum over weights of KL(N(mu, sigma^2) || prior).
Var kl_closed_form(Var mu, Var log_var, const GaussianPrior& prior);
/// (1/K) sum_k [log q(w_k) - log p(w_k)] over the given reparameterized draws.
Var kl_monte_carlo(Var mu, Var log_var, const GaussianPrior& prior, std::span<const Var> draws);
/// log q(w | mu, log_var) summed over weights.
Var log_q(Var w, Var mu, Var log_var);
/// log N(w; prior) summed over weights.
Var log_prior(Var w, const GaussianPrior& prior);

double kl_divergence(const VariationalParams& params, const GaussianPrior& prior,
                     KlMethod method = KlMethod::closed_form, std::size_t samples = 1,
                     Rng* rng = nullptr);

/// sum_i 0.5 log(2 pi s^2) + (y_i - yhat_i)^2 / (2 s^2) with s^2 = exp(obs_log_var).
Var nll_gaussian(Var pred, Var target, Var obs_log_var);

/// Monte Carlo predictive ensemble: `samples` holds one row per weight draw
/// and one column per input point.
struct PredictiveSummary {
  Tensor samples;
  std::vector<double> mean;
  std::vector<double> std;  // population convention (divide by N)

  std::size_t ensemble_size() const { return samples.rows(); }
  std::size_t points() const { return samples.cols(); }
};

/// Builds mean and std from an N x n sample matrix. N >= 2.
PredictiveSummary summarize(Tensor samples);

PredictiveSummary predict(const VariationalParams& params, const NetworkSpec& spec,
                          const Tensor& x, std::size_t n_samples, Rng& rng);
PredictiveSummary predict_particles(std::span<const Tensor> particles, const NetworkSpec& spec,
                                    const Tensor& x);
PredictiveSummary predict_dropout(const Tensor& weights, const NetworkSpec& spec, const Tensor& x,
                                  std::size_t n_samples, Rng& rng);

}  // namespace cbnn::bnn
