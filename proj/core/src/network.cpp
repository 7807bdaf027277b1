#include "cbnn/network.hpp"

#include <numbers>

#include "cbnn/errors.hpp"

namespace cbnn::bnn {

using autodiff::Shape;

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "rbf") return Activation::rbf;
  if (name == "identity") return Activation::identity;
  throw ParseError("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::rbf: return "rbf";
    case Activation::identity: return "identity";
  }
  return "identity";
}

NetMode parse_net_mode(const std::string& name) {
  if (name == "variational") return NetMode::variational;
  if (name == "dropout") return NetMode::dropout;
  throw ParseError("unknown network mode '" + name + "'");
}

std::string to_string(NetMode m) {
  return m == NetMode::dropout ? "dropout" : "variational";
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ContractError("network has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.fan_in == 0 || l.fan_out == 0) {
      throw ContractError("layer " + std::to_string(i) + " has a zero extent");
    }
    if (i > 0 && layers[i - 1].fan_out != l.fan_in) {
      throw ContractError("layer " + std::to_string(i) + " fan_in " + std::to_string(l.fan_in) +
                          " does not chain with previous fan_out " +
                          std::to_string(layers[i - 1].fan_out));
    }
    if (mode == NetMode::dropout && !(l.dropout_p > 0.0 && l.dropout_p < 1.0)) {
      throw ContractError("dropout rate must lie in (0, 1), got " + std::to_string(l.dropout_p));
    }
    if (l.activation == Activation::rbf) {
      for (const auto* v : {&l.rbf_centers, &l.rbf_widths}) {
        if (v->size() != 1 && v->size() != l.fan_out) {
          throw ContractError("rbf parameters need 1 or fan_out entries");
        }
      }
      for (double w : l.rbf_widths) {
        if (w == 0.0) throw ContractError("rbf width must be non-zero");
      }
    }
  }
}

std::size_t NetworkSpec::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.fan_in * l.fan_out + l.fan_out;
  return n;
}

std::vector<LayerSlot> NetworkSpec::layout() const {
  std::vector<LayerSlot> slots;
  std::size_t offset = 0;
  for (const auto& l : layers) {
    slots.push_back({offset, offset + l.fan_in * l.fan_out});
    offset += l.fan_in * l.fan_out + l.fan_out;
  }
  return slots;
}

NetworkSpec make_mlp(std::size_t in, std::size_t hidden, std::size_t out, Activation activation) {
  NetworkSpec spec;
  spec.layers.push_back({in, hidden, activation});
  spec.layers.push_back({hidden, out, Activation::identity});
  return spec;
}

void GaussianPrior::validate() const {
  if (!(variance > 0.0) || !std::isfinite(variance) || !std::isfinite(mean)) {
    throw ContractError("prior variance must be positive and finite");
  }
}

void VariationalParams::validate() const {
  if (mu.shape() != log_var.shape()) {
    throw DimensionError("mu and log_var shapes differ");
  }
}

VariationalParams VariationalParams::initialize(const NetworkSpec& spec, Rng& rng,
                                                double log_var_init) {
  spec.validate();
  std::vector<double> mu;
  mu.reserve(spec.param_count());
  for (const auto& l : spec.layers) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
    for (std::size_t i = 0; i < l.fan_in * l.fan_out + l.fan_out; ++i) {
      mu.push_back(sd * rng.normal());
    }
  }
  const std::size_t n = mu.size();
  return {Tensor::column(std::move(mu)), Tensor::filled({n, 1}, log_var_init)};
}

WeightSample sample_weights(const VariationalParams& params, const Tensor& eps) {
  params.validate();
  if (eps.size() != params.size()) throw DimensionError("eps has the wrong length");
  std::vector<double> w(params.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = params.mu[i] + std::exp(0.5 * params.log_var[i]) * eps[i];
  }
  return {Tensor(params.mu.shape(), std::move(w)), eps};
}

WeightSample sample_weights(const VariationalParams& params, Rng& rng) {
  return sample_weights(params, Tensor(params.mu.shape(), rng.normals(params.size())));
}

Var reparameterize(Var mu, Var log_var, const Tensor& eps) {
  Tape& tape = mu.tape();
  return mu + exp(log_var * 0.5) * tape.constant(eps);
}

namespace {

Tensor row_of(const std::vector<double>& v) { return Tensor::row(v); }

struct LayerVars {
  Var weight;
  Var bias;
};

LayerVars layer_vars(const LayerSpec& l, const LayerSlot& slot, Var weights) {
  return {slice(weights, slot.weight_offset, Shape{l.fan_in, l.fan_out}),
          slice(weights, slot.bias_offset, Shape{1, l.fan_out})};
}

Var activate(const LayerSpec& l, Var z) {
  switch (l.activation) {
    case Activation::relu: return relu(z);
    case Activation::rbf: return rbf_activation(z, row_of(l.rbf_centers), row_of(l.rbf_widths));
    case Activation::identity: return z;
  }
  return z;
}

void check_input(const NetworkSpec& spec, Var weights, Var x) {
  spec.validate();
  if (weights.value().size() != spec.param_count()) {
    throw DimensionError("weight vector has " + std::to_string(weights.value().size()) +
                         " entries, network needs " + std::to_string(spec.param_count()));
  }
  if (x.value().rank() != 2 || x.value().cols() != spec.input_dim()) {
    throw DimensionError("input shape " + autodiff::shape_string(x.shape()) +
                         " does not match fan_in " + std::to_string(spec.input_dim()));
  }
}

}  // namespace

Var forward(const NetworkSpec& spec, Var weights, Var x) {
  check_input(spec, weights, x);
  const auto slots = spec.layout();
  Var h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [w, b] = layer_vars(spec.layers[i], slots[i], weights);
    h = activate(spec.layers[i], matmul(h, w) + b);
  }
  return h;
}

Tensor forward(const NetworkSpec& spec, const Tensor& weights, const Tensor& x) {
  Tape tape;
  return forward(spec, tape.constant(weights), tape.constant(x)).value();
}

OutputWithSlope forward_with_slope(const NetworkSpec& spec, Var weights, Var x) {
  check_input(spec, weights, x);
  if (spec.input_dim() != 1) throw DimensionError("input slope needs a scalar input");
  Tape& tape = x.tape();
  const auto slots = spec.layout();
  Var h = x;
  Var t = tape.constant(Tensor::filled({x.value().rows(), 1}, 1.0));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto [w, b] = layer_vars(l, slots[i], weights);
    Var z = matmul(h, w) + b;
    Var tz = matmul(t, w);
    switch (l.activation) {
      case Activation::relu: {
        // Copy before recording more nodes: the tape may reallocate.
        const Tensor zv = z.value();
        std::vector<double> gate(zv.size());
        for (std::size_t k = 0; k < gate.size(); ++k) gate[k] = zv[k] > 0.0 ? 1.0 : 0.0;
        h = relu(z);
        t = tz * tape.constant(Tensor(zv.shape(), std::move(gate)));
        break;
      }
      case Activation::rbf: {
        std::vector<double> scale(l.rbf_widths.size());
        for (std::size_t k = 0; k < scale.size(); ++k) {
          scale[k] = -2.0 / (l.rbf_widths[k] * l.rbf_widths[k]);
        }
        h = rbf_activation(z, row_of(l.rbf_centers), row_of(l.rbf_widths));
        Var centered = z - tape.constant(row_of(l.rbf_centers));
        t = tz * h * centered * tape.constant(row_of(scale));
        break;
      }
      case Activation::identity:
        h = z;
        t = tz;
        break;
    }
  }
  return {h, t};
}

DropoutMasks draw_masks(const NetworkSpec& spec, Rng& rng) {
  DropoutMasks masks;
  for (const auto& l : spec.layers) {
    std::vector<double> z(l.fan_in);
    for (auto& v : z) v = rng.bernoulli(1.0 - l.dropout_p) ? 1.0 : 0.0;
    masks.push_back(Tensor::column(std::move(z)));
  }
  return masks;
}

DropoutMasks full_masks(const NetworkSpec& spec, double value) {
  DropoutMasks masks;
  for (const auto& l : spec.layers) masks.push_back(Tensor::filled({l.fan_in, 1}, value));
  return masks;
}

Var dropout_forward(const NetworkSpec& spec, Var weights, Var x, const DropoutMasks& masks) {
  check_input(spec, weights, x);
  if (masks.size() != spec.layers.size()) throw DimensionError("one mask per layer required");
  Tape& tape = x.tape();
  const auto slots = spec.layout();
  Var h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (masks[i].size() != l.fan_in) throw DimensionError("mask length must equal fan_in");
    const auto [w, b] = layer_vars(l, slots[i], weights);
    Var masked = w * tape.constant(Tensor({l.fan_in, 1}, masks[i].vector()));
    h = activate(l, matmul(h, masked) + b);
  }
  return h;
}

Tensor dropout_forward(const NetworkSpec& spec, const Tensor& weights, const Tensor& x,
                       const DropoutMasks& masks) {
  Tape tape;
  return dropout_forward(spec, tape.constant(weights), tape.constant(x), masks).value();
}

Var kl_closed_form(Var mu, Var log_var, const GaussianPrior& prior) {
  prior.validate();
  const double vp = prior.variance;
  Var ratio = exp(log_var) / vp;
  Var shift = square(mu - prior.mean) / vp;
  return sum((ratio + shift - log_var + (std::log(vp) - 1.0)) * 0.5);
}

Var log_q(Var w, Var mu, Var log_var) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi);
  return sum(c - log_var * 0.5 - square(w - mu) * exp(-log_var) * 0.5);
}

Var log_prior(Var w, const GaussianPrior& prior) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi * prior.variance);
  return sum(c - square(w - prior.mean) * (0.5 / prior.variance));
}

Var kl_monte_carlo(Var mu, Var log_var, const GaussianPrior& prior, std::span<const Var> draws) {
  prior.validate();
  if (draws.empty()) throw ContractError("Monte Carlo KL needs at least one sample");
  Var total = log_q(draws[0], mu, log_var) - log_prior(draws[0], prior);
  for (std::size_t k = 1; k < draws.size(); ++k) {
    total = total + (log_q(draws[k], mu, log_var) - log_prior(draws[k], prior));
  }
  return total / static_cast<double>(draws.size());
}

double kl_divergence(const VariationalParams& params, const GaussianPrior& prior,
                     KlMethod method, std::size_t samples, Rng* rng) {
  params.validate();
  Tape tape;
  Var mu = tape.constant(params.mu);
  Var lv = tape.constant(params.log_var);
  if (method == KlMethod::closed_form) return kl_closed_form(mu, lv, prior).item();
  if (samples < 1) throw ContractError("Monte Carlo KL needs K >= 1");
  if (!rng) throw ContractError("Monte Carlo KL needs a random stream");
  std::vector<Var> draws;
  for (std::size_t k = 0; k < samples; ++k) {
    draws.push_back(reparameterize(mu, lv, Tensor(params.mu.shape(), rng->normals(params.size()))));
  }
  return kl_monte_carlo(mu, lv, prior, draws).item();
}

Var nll_gaussian(Var pred, Var target, Var obs_log_var) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("prediction shape " + autodiff::shape_string(pred.shape()) +
                         " differs from target " + autodiff::shape_string(target.shape()));
  }
  const double n = static_cast<double>(pred.value().size());
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Var quadratic = sum(square(pred - target)) * exp(-obs_log_var) * 0.5;
  return quadratic + (obs_log_var * 0.5 + half_log_2pi) * n;
}

PredictiveSummary summarize(Tensor samples) {
  const std::size_t n_draws = samples.rows();
  const std::size_t n_points = samples.cols();
  if (samples.rank() != 2 || n_draws < 2) {
    throw ContractError("a predictive summary needs at least two ensemble members");
  }
  PredictiveSummary out{std::move(samples), std::vector<double>(n_points, 0.0),
                        std::vector<double>(n_points, 0.0)};
  for (std::size_t j = 0; j < n_points; ++j) {
    double m = 0.0;
    for (std::size_t k = 0; k < n_draws; ++k) m += out.samples.at(k, j);
    m /= static_cast<double>(n_draws);
    double ss = 0.0;
    for (std::size_t k = 0; k < n_draws; ++k) {
      const double d = out.samples.at(k, j) - m;
      ss += d * d;
    }
    out.mean[j] = m;
    out.std[j] = std::sqrt(ss / static_cast<double>(n_draws));
  }
  return out;
}

namespace {

PredictiveSummary stack(const std::vector<Tensor>& outputs) {
  const std::size_t n = outputs.front().size();
  std::vector<double> values;
  values.reserve(outputs.size() * n);
  for (const auto& o : outputs) values.insert(values.end(), o.values().begin(), o.values().end());
  return summarize(Tensor::unchecked({outputs.size(), n}, std::move(values)));
}

void check_ensemble(std::size_t n) {
  if (n < 2) throw ContractError("prediction needs N >= 2 samples");
}

}  // namespace

PredictiveSummary predict(const VariationalParams& params, const NetworkSpec& spec,
                          const Tensor& x, std::size_t n_samples, Rng& rng) {
  check_ensemble(n_samples);
  std::vector<Tensor> outputs;
  outputs.reserve(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    outputs.push_back(forward(spec, sample_weights(params, rng).weights, x));
  }
  return stack(outputs);
}

PredictiveSummary predict_particles(std::span<const Tensor> particles, const NetworkSpec& spec,
                                    const Tensor& x) {
  check_ensemble(particles.size());
  std::vector<Tensor> outputs;
  outputs.reserve(particles.size());
  for (const auto& p : particles) outputs.push_back(forward(spec, p, x));
  return stack(outputs);
}

PredictiveSummary predict_dropout(const Tensor& weights, const NetworkSpec& spec, const Tensor& x,
                                  std::size_t n_samples, Rng& rng) {
  check_ensemble(n_samples);
  std::vector<Tensor> outputs;
  outputs.reserve(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    outputs.push_back(dropout_forward(spec, weights, x, draw_masks(spec, rng)));
  }
  return stack(outputs);
}

}  // namespace cbnn::bnn
