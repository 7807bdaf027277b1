#include "cbnn/trainers.hpp"

#include <algorithm>
#include <cmath>

#include "cbnn/errors.hpp"

namespace cbnn::train {

using bnn::NetworkSpec;
using nlohmann::json;

Mode parse_mode(const std::string& s) {
  if (s == "unconstrained") return Mode::unconstrained;
  if (s == "soft") return Mode::soft;
  if (s == "hard") return Mode::hard;
  if (s == "cocp") return Mode::cocp;
  throw ParseError("unknown training mode '" + s + "'");
}

Backend parse_backend(const std::string& s) {
  if (s == "bbb") return Backend::bbb;
  if (s == "svgd") return Backend::svgd;
  if (s == "dropout") return Backend::dropout;
  throw ParseError("unknown backend '" + s + "'");
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ParseError("unknown optimizer '" + s + "'");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::unconstrained: return "unconstrained";
    case Mode::soft: return "soft";
    case Mode::hard: return "hard";
    case Mode::cocp: return "cocp";
  }
  return "unconstrained";
}

std::string to_string(Backend b) {
  switch (b) {
    case Backend::bbb: return "bbb";
    case Backend::svgd: return "svgd";
    case Backend::dropout: return "dropout";
  }
  return "bbb";
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd"; }

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::variational: return "variational";
    case ModelKind::particles: return "particles";
    case ModelKind::dropout: return "dropout";
  }
  return "variational";
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw ContractError("lambda must be non-negative");
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (steps_per_epoch < 1) throw ContractError("steps_per_epoch must be >= 1");
  if (mc_samples < 1) throw ContractError("mc_samples must be >= 1");
  if (growth < 1.0) throw ContractError("dual growth factor must be >= 1");
  if (learning_rate < 0.0) throw ContractError("learning rate must be non-negative");
  if (dual_samples < 1) throw ContractError("dual_samples must be >= 1");
  if (s_init < 0.0) throw ContractError("s_init must be non-negative");
  if (!(rho_init > 0.0)) throw ContractError("rho_init must be positive");
  if (weight_decay < 0.0) throw ContractError("weight_decay must be non-negative");
  if (!(kl_weight > 0.0)) throw ContractError("kl_weight must be positive");
  for (double c : c_weights) {
    if (c < 0.0) throw ContractError("c_weights must be non-negative");
  }
  prior.validate();
  if ((mode == Mode::hard || mode == Mode::cocp) && backend != Backend::bbb) {
    throw ContractError(to_string(mode) + " mode is only available with the bbb backend");
  }
  if (backend == Backend::svgd && particles < 2) {
    throw ContractError("svgd needs at least 2 particles");
  }
}

json to_json(const TrainConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"backend", to_string(c.backend)},
          {"lambda", c.lambda},
          {"c_weights", c.c_weights},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"learning_rate", c.learning_rate},
          {"optimizer", to_string(c.optimizer)},
          {"mc_samples", c.mc_samples},
          {"dual_update_every", c.dual_update_every},
          {"growth", c.growth},
          {"dual_samples", c.dual_samples},
          {"s_init", c.s_init},
          {"rho_init", c.rho_init},
          {"kl", c.kl == bnn::KlMethod::closed_form ? "closed_form" : "monte_carlo"},
          {"particles", c.particles},
          {"weight_decay", c.weight_decay},
          {"kl_weight", c.kl_weight},
          {"learn_obs_noise", c.learn_obs_noise}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("train config must be an object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "mode") c.mode = parse_mode(v.get<std::string>());
      else if (key == "backend") c.backend = parse_backend(v.get<std::string>());
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "c_weights") c.c_weights = v.get<std::vector<double>>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
      else if (key == "mc_samples") c.mc_samples = v.get<std::size_t>();
      else if (key == "dual_update_every") c.dual_update_every = v.get<std::size_t>();
      else if (key == "growth") c.growth = v.get<double>();
      else if (key == "dual_samples") c.dual_samples = v.get<std::size_t>();
      else if (key == "s_init") c.s_init = v.get<double>();
      else if (key == "rho_init") c.rho_init = v.get<double>();
      else if (key == "kl") {
        const auto s = v.get<std::string>();
        if (s == "closed_form") c.kl = bnn::KlMethod::closed_form;
        else if (s == "monte_carlo") c.kl = bnn::KlMethod::monte_carlo;
        else throw ParseError("unknown kl method '" + s + "'");
      } else if (key == "particles") c.particles = v.get<std::size_t>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "kl_weight") c.kl_weight = v.get<double>();
      else if (key == "learn_obs_noise") c.learn_obs_noise = v.get<bool>();
      else throw ParseError("unknown key 'train." + key + "'");
    } catch (const json::exception& e) {
      throw ParseError("train." + key + ": " + e.what());
    }
  }
  return c;
}

// ---- augmented Lagrangian ----------------------------------------------------

DualState DualState::initial(std::size_t n, double s0, double rho0) {
  DualState d{std::vector<double>(n, s0), std::vector<double>(n, rho0), std::vector<double>(n, 0.0)};
  d.validate();
  return d;
}

void DualState::validate() const {
  if (rho.size() != s.size() || z.size() != s.size()) throw DimensionError("dual state sizes differ");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < 0.0 || !(rho[i] > 0.0) || z[i] < 0.0) {
      throw ContractError("dual state requires s >= 0, rho > 0, z >= 0");
    }
  }
}

double compute_z(double ef, double s, double rho) {
  if (!(rho > 0.0)) throw ContractError("rho must be positive");
  return std::max(ef - s / rho, 0.0);
}

double phi(double ef, double s, double rho) {
  if (!(rho > 0.0)) throw ContractError("rho must be positive");
  if (ef <= s / rho) return -s * ef + 0.5 * rho * ef * ef;
  return -0.5 * s * s / rho;
}

double phi_derivative(double ef, double s, double rho) {
  if (!(rho > 0.0)) throw ContractError("rho must be positive");
  return ef <= s / rho ? -s + rho * ef : 0.0;
}

Var phi(Var ef, double s, double rho) {
  if (!(rho > 0.0)) throw ContractError("rho must be positive");
  if (ef.item() <= s / rho) return ef * (-s) + square(ef) * (0.5 * rho);
  return ef * 0.0 + (-0.5 * s * s / rho);
}

DualState dual_update(const DualState& dual, std::span<const double> ef, double growth) {
  dual.validate();
  if (ef.size() != dual.size()) throw DimensionError("dual update needs one Ef per constraint");
  if (growth < 1.0) throw ContractError("dual growth factor must be >= 1");
  DualState next = dual;
  for (std::size_t i = 0; i < dual.size(); ++i) {
    next.s[i] = std::max(0.0, dual.s[i] - dual.rho[i] * ef[i]);
    next.rho[i] = growth * dual.rho[i];
    next.z[i] = compute_z(ef[i], next.s[i], next.rho[i]);
  }
  return next;
}

// ---- objectives ---------------------------------------------------------------

namespace {

std::vector<double> spec_weights(std::span<const ConstraintSpec> specs) {
  std::vector<double> w;
  for (const auto& c : specs) w.push_back(c.weight);
  return w;
}

ObjectiveTerms base_terms(const ObjectiveInputs& in, bnn::KlMethod kl) {
  if (!in.net || !in.x || !in.y) throw ContractError("objective inputs are incomplete");
  if (in.eps.empty()) throw ContractError("objective needs at least one Monte Carlo sample");
  Tape& tape = in.mu.tape();
  Var x = tape.constant(*in.x);
  Var y = tape.constant(*in.y);
  std::vector<Var> draws;
  for (const auto& e : in.eps) draws.push_back(bnn::reparameterize(in.mu, in.log_var, e));

  ObjectiveTerms t;
  for (std::size_t k = 0; k < draws.size(); ++k) {
    Var nll = bnn::nll_gaussian(bnn::forward(*in.net, draws[k], x), y, in.obs_log_var);
    t.nll = k == 0 ? nll : t.nll + nll;
  }
  t.nll = t.nll / static_cast<double>(draws.size());
  t.kl = kl == bnn::KlMethod::closed_form ? bnn::kl_closed_form(in.mu, in.log_var, in.prior)
                                          : bnn::kl_monte_carlo(in.mu, in.log_var, in.prior, draws);
  if (!in.constraints.empty()) {
    t.ef = constraints::expected_constraints(in.constraints, *in.net, draws);
  }
  t.loss = in.kl_weight == 1.0 ? t.kl + t.nll : t.kl * in.kl_weight + t.nll;
  return t;
}

}  // namespace

ObjectiveTerms elbo_objective(const ObjectiveInputs& in) { return base_terms(in, in.kl); }

ObjectiveTerms soft_objective(const ObjectiveInputs& in, double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be non-negative");
  ObjectiveTerms t = base_terms(in, in.kl);
  if (lambda > 0.0 && !t.ef.empty()) {
    t.loss = t.loss - constraints::composite(t.ef, spec_weights(in.constraints)) * lambda;
  }
  return t;
}

ObjectiveTerms hard_objective(const ObjectiveInputs& in, const DualState& dual) {
  dual.validate();
  if (dual.size() != in.constraints.size()) {
    throw DimensionError("hard objective needs one dual per constraint");
  }
  ObjectiveTerms t = base_terms(in, in.kl);
  for (std::size_t i = 0; i < t.ef.size(); ++i) t.loss = t.loss + phi(t.ef[i], dual.s[i], dual.rho[i]);
  return t;
}

ObjectiveTerms cocp_objective(const ObjectiveInputs& in, std::span<const double> c_weights) {
  if (c_weights.size() != in.constraints.size()) {
    throw DimensionError("cocp needs one weight per constraint (got " +
                         std::to_string(c_weights.size()) + " for " +
                         std::to_string(in.constraints.size()) + ")");
  }
  ObjectiveTerms t = base_terms(in, bnn::KlMethod::monte_carlo);
  // log q - (log p + sum_i c_i f_i) averaged over the same draws.
  if (!t.ef.empty()) {
    Var reweight = constraints::composite(t.ef, c_weights);
    t.kl = t.kl - reweight;
    t.loss = t.loss - reweight;
  }
  return t;
}

// ---- optimizers -----------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, std::size_t size)
    : kind_(kind), lr_(learning_rate), m_(size, 0.0), v_(size, 0.0) {}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw DimensionError("optimizer step with mismatched sizes");
  }
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
    return;
  }
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  constexpr double eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
  }
}

// ---- SVGD -------------------------------------------------------------------------

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
  return d;
}

}  // namespace

double median_bandwidth(std::span<const std::vector<double>> particles) {
  const std::size_t n = particles.size();
  if (n < 2) throw ContractError("SVGD needs at least 2 particles");
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) dist.push_back(std::sqrt(squared_distance(particles[i], particles[j])));
  }
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double med = *mid;
  if (dist.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(dist.begin(), mid));
  }
  const double h = med * med / std::log(static_cast<double>(n) + 1.0);
  return h > 0.0 ? h : 1.0;
}

std::vector<std::vector<double>> svgd_direction(std::span<const std::vector<double>> particles,
                                                std::span<const std::vector<double>> scores) {
  const std::size_t n = particles.size();
  if (n < 2) throw ContractError("SVGD needs at least 2 particles");
  if (scores.size() != n) throw DimensionError("one score per particle is required");
  const std::size_t d = particles[0].size();
  const double h = median_bandwidth(particles);
  std::vector<std::vector<double>> phi(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double k = std::exp(-squared_distance(particles[j], particles[i]) / h);
      for (std::size_t c = 0; c < d; ++c) {
        // k(w_j, w_i) grad log p(w_j) + grad_{w_j} k(w_j, w_i)
        phi[i][c] += k * scores[j][c] - 2.0 / h * (particles[j][c] - particles[i][c]) * k;
      }
    }
    for (double& v : phi[i]) v /= static_cast<double>(n);
  }
  return phi;
}

void svgd_run(std::vector<std::vector<double>>& particles, const ScoreFn& score, double step,
              std::size_t iterations) {
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<std::vector<double>> scores;
    for (const auto& p : particles) scores.push_back(score(p));
    const auto phi = svgd_direction(particles, scores);
    for (std::size_t i = 0; i < particles.size(); ++i) {
      for (std::size_t c = 0; c < particles[i].size(); ++c) particles[i][c] += step * phi[i][c];
    }
  }
}

// ---- training -----------------------------------------------------------------------

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"loss", r.loss}, {"nll", r.nll}, {"kl", r.kl},
          {"ef", r.ef},       {"s", r.s},       {"rho", r.rho}, {"z", r.z}};
}

namespace {

void check_data(const NetworkSpec& net, const Tensor& x, const Tensor& y) {
  net.validate();
  if (x.rank() != 2 || x.cols() != net.input_dim()) {
    throw DimensionError("training inputs must be n x " + std::to_string(net.input_dim()));
  }
  if (y.size() != x.rows() || y.rank() != 2 || y.cols() != 1) {
    throw DimensionError("training targets must be n x 1 with one row per input");
  }
}

Tensor slice_column(const std::vector<double>& flat, std::size_t offset, std::size_t n) {
  return Tensor::column(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                            flat.begin() + static_cast<std::ptrdiff_t>(offset + n)));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

[[noreturn]] void abort_training(const std::string& what, std::size_t epoch, std::size_t step,
                                 double loss, const std::vector<double>& state,
                                 const DualState* dual) {
  json dump{{"reason", what}, {"epoch", epoch}, {"step", step}, {"loss", loss}, {"state", state}};
  if (dual) dump["dual"] = {{"s", dual->s}, {"rho", dual->rho}, {"z", dual->z}};
  throw NumericalAbort(what + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step),
                       dump.dump(2));
}

struct EpochAccumulator {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  std::vector<double> ef;
  std::size_t count = 0;

  void add(double l, double n, double k, const std::vector<double>& e) {
    loss += l;
    nll += n;
    kl += k;
    if (ef.empty()) ef.assign(e.size(), 0.0);
    for (std::size_t i = 0; i < e.size(); ++i) ef[i] += e[i];
    ++count;
  }

  EpochRecord finish(std::size_t epoch) const {
    const double c = static_cast<double>(count);
    EpochRecord r{epoch, loss / c, nll / c, kl / c, ef, {}, {}, {}};
    for (double& v : r.ef) v /= c;
    return r;
  }
};

std::vector<double> values_of(const std::vector<Var>& vars) {
  std::vector<double> out;
  for (const auto& v : vars) out.push_back(v.item());
  return out;
}

// Ef at the current posterior from fresh draws, shared across constraints.
std::vector<double> estimate_ef(const bnn::VariationalParams& params, const NetworkSpec& net,
                                std::span<const ConstraintSpec> specs, std::size_t samples,
                                Rng& rng) {
  Tape tape;
  std::vector<Var> draws;
  for (std::size_t k = 0; k < samples; ++k) {
    draws.push_back(tape.constant(bnn::sample_weights(params, rng).weights));
  }
  return values_of(constraints::expected_constraints(specs, net, draws));
}

}  // namespace

TrainResult train_bbb(const TrainConfig& config, const NetworkSpec& net, const Tensor& x,
                      const Tensor& y, std::span<const ConstraintSpec> specs,
                      const EpochCallback& on_epoch) {
  config.validate();
  if (config.backend != Backend::bbb) throw ContractError("train_bbb called with another backend");
  check_data(net, x, y);
  if (config.mode == Mode::cocp && config.c_weights.size() != specs.size()) {
    throw ContractError("cocp needs one c weight per constraint");
  }
  for (const auto& c : specs) c.validate();

  Rng root(config.seed);
  Rng init_rng = root.split();
  Rng step_rng = root.split();
  Rng dual_rng = root.split();

  auto init = bnn::VariationalParams::initialize(net, init_rng, config.log_var_init);
  const std::size_t p = init.size();
  std::vector<double> flat = init.mu.vector();
  flat.insert(flat.end(), init.log_var.values().begin(), init.log_var.values().end());
  flat.push_back(net.obs_log_var_init);
  Optimizer opt(config.optimizer, config.learning_rate, flat.size());

  TrainResult result;
  DualState dual = DualState::initial(config.mode == Mode::hard ? specs.size() : 0, config.s_init,
                                      config.rho_init);
  auto current_params = [&] {
    return bnn::VariationalParams{slice_column(flat, 0, p), slice_column(flat, p, p)};
  };

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochAccumulator acc;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<Tensor> eps;
      for (std::size_t k = 0; k < config.mc_samples; ++k) {
        eps.push_back(Tensor::column(step_rng.normals(p)));
      }
      Tape tape;
      ObjectiveInputs in;
      in.mu = tape.leaf(slice_column(flat, 0, p));
      in.log_var = tape.leaf(slice_column(flat, p, p));
      in.obs_log_var = tape.leaf(Tensor::scalar(flat[2 * p]));
      in.net = &net;
      in.prior = config.prior;
      in.x = &x;
      in.y = &y;
      in.constraints = specs;
      in.eps = eps;
      in.kl = config.kl;
      in.kl_weight = config.kl_weight;

      ObjectiveTerms t;
      switch (config.mode) {
        case Mode::unconstrained: t = elbo_objective(in); break;
        case Mode::soft: t = soft_objective(in, config.lambda); break;
        case Mode::hard: t = hard_objective(in, dual); break;
        case Mode::cocp: t = cocp_objective(in, config.c_weights); break;
      }
      const double loss = t.loss.item();
      if (!std::isfinite(loss)) abort_training("non-finite loss", epoch, step, loss, flat, &dual);
      auto grads = tape.backward(t.loss);
      std::vector<double> g = grads.at(in.mu).vector();
      const auto& glv = grads.at(in.log_var).values();
      g.insert(g.end(), glv.begin(), glv.end());
      g.push_back(config.learn_obs_noise ? grads.at(in.obs_log_var).item() : 0.0);
      if (!all_finite(g)) abort_training("non-finite gradient", epoch, step, loss, flat, &dual);
      opt.step(flat, g);
      if (!all_finite(flat)) abort_training("non-finite parameters", epoch, step, loss, flat, &dual);
      acc.add(loss, t.nll.item(), t.kl.item(), values_of(t.ef));

      ++global_step;
      if (config.mode == Mode::hard && global_step % config.dual_interval() == 0) {
        const auto ef = estimate_ef(current_params(), net, specs, config.dual_samples, dual_rng);
        dual = dual_update(dual, ef, config.growth);
      }
    }
    EpochRecord rec = acc.finish(epoch);
    if (config.mode == Mode::hard) {
      rec.s = dual.s;
      rec.rho = dual.rho;
      rec.z = dual.z;
    }
    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
  }

  result.model.kind = ModelKind::variational;
  result.model.params = current_params();
  result.model.obs_log_var = flat[2 * p];
  result.model.dual = dual;
  return result;
}

TrainResult train_svgd(const TrainConfig& config, const NetworkSpec& net, const Tensor& x,
                       const Tensor& y, std::span<const ConstraintSpec> specs,
                       const EpochCallback& on_epoch) {
  config.validate();
  if (config.backend != Backend::svgd) throw ContractError("train_svgd called with another backend");
  if (config.mode != Mode::unconstrained && config.mode != Mode::soft) {
    throw ContractError("svgd supports unconstrained and soft modes only");
  }
  check_data(net, x, y);
  for (const auto& c : specs) c.validate();

  Rng root(config.seed);
  Rng init_rng = root.split();
  const std::size_t n = config.particles;
  const std::size_t p = net.param_count();
  std::vector<std::vector<double>> particles;
  for (std::size_t i = 0; i < n; ++i) {
    auto w = bnn::VariationalParams::initialize(net, init_rng).mu.vector();
    w.push_back(net.obs_log_var_init);
    particles.push_back(std::move(w));
  }
  Optimizer opt(config.optimizer, config.learning_rate, n * (p + 1));
  const bool penalize = config.mode == Mode::soft && config.lambda > 0.0 && !specs.empty();
  const auto weights = spec_weights(specs);
  const bnn::GaussianPrior obs_prior{net.obs_log_var_init, 1.0};

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochAccumulator acc;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<std::vector<double>> scores;
      double loss = 0.0;
      double nll = 0.0;
      double neg_prior = 0.0;
      std::vector<double> ef(specs.size(), 0.0);
      for (const auto& particle : particles) {
        Tape tape;
        Var w = tape.leaf(slice_column(particle, 0, p));
        Var obs = tape.leaf(Tensor::scalar(particle[p]));
        Var lik = bnn::nll_gaussian(bnn::forward(net, w, tape.constant(x)), tape.constant(y), obs);
        Var prior = bnn::log_prior(w, config.prior) + bnn::log_prior(obs, obs_prior);
        Var log_target = prior * config.kl_weight - lik;
        if (!specs.empty()) {
          auto values = constraints::expected_constraints(specs, net, std::span(&w, 1));
          for (std::size_t i = 0; i < values.size(); ++i) ef[i] += values[i].item();
          if (penalize) log_target = log_target + constraints::composite(values, weights) * config.lambda;
        }
        const double lt = log_target.item();
        if (!std::isfinite(lt)) abort_training("non-finite log target", epoch, step, -lt, particle, nullptr);
        auto grads = tape.backward(log_target);
        std::vector<double> s = grads.at(w).vector();
        s.push_back(config.learn_obs_noise ? grads.at(obs).item() : 0.0);
        if (!all_finite(s)) abort_training("non-finite score", epoch, step, -lt, particle, nullptr);
        scores.push_back(std::move(s));
        loss -= lt;
        nll += lik.item();
        neg_prior -= prior.item();
      }
      const auto phi = svgd_direction(particles, scores);
      std::vector<double> flat;
      std::vector<double> g;
      for (std::size_t i = 0; i < n; ++i) {
        flat.insert(flat.end(), particles[i].begin(), particles[i].end());
        for (double v : phi[i]) g.push_back(-v);
      }
      opt.step(flat, g);
      if (!all_finite(flat)) abort_training("non-finite particles", epoch, step, loss, flat, nullptr);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(i * (p + 1)), p + 1, particles[i].begin());
      }
      const double dn = static_cast<double>(n);
      for (double& v : ef) v /= dn;
      acc.add(loss / dn, nll / dn, neg_prior / dn, ef);
    }
    EpochRecord rec = acc.finish(epoch);
    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
  }

  result.model.kind = ModelKind::particles;
  for (const auto& particle : particles) {
    result.model.particles.push_back(slice_column(particle, 0, p));
    result.model.particle_obs_log_var.push_back(particle[p]);
  }
  return result;
}

TrainResult train_dropout(const TrainConfig& config, const NetworkSpec& net, const Tensor& x,
                          const Tensor& y, std::span<const ConstraintSpec> specs,
                          const EpochCallback& on_epoch) {
  config.validate();
  if (config.backend != Backend::dropout) {
    throw ContractError("train_dropout called with another backend");
  }
  if (config.mode != Mode::unconstrained && config.mode != Mode::soft) {
    throw ContractError("dropout supports unconstrained and soft modes only");
  }
  if (net.mode != bnn::NetMode::dropout) throw ContractError("dropout training needs a dropout network");
  check_data(net, x, y);
  for (const auto& c : specs) c.validate();

  Rng root(config.seed);
  Rng init_rng = root.split();
  Rng step_rng = root.split();
  const std::size_t p = net.param_count();
  std::vector<double> flat = bnn::VariationalParams::initialize(net, init_rng).mu.vector();
  flat.push_back(net.obs_log_var_init);
  Optimizer opt(config.optimizer, config.learning_rate, flat.size());
  const bool penalize = config.mode == Mode::soft && config.lambda > 0.0 && !specs.empty();
  const auto weights = spec_weights(specs);
  const auto layout = net.layout();

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochAccumulator acc;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      std::vector<bnn::DropoutMasks> masks;
      for (std::size_t k = 0; k < config.mc_samples; ++k) masks.push_back(bnn::draw_masks(net, step_rng));
      Tape tape;
      Var w = tape.leaf(slice_column(flat, 0, p));
      Var obs = tape.leaf(Tensor::scalar(flat[p]));
      Var xv = tape.constant(x);
      Var yv = tape.constant(y);
      Var nll;
      for (std::size_t k = 0; k < masks.size(); ++k) {
        Var term = bnn::nll_gaussian(bnn::dropout_forward(net, w, xv, masks[k]), yv, obs);
        nll = k == 0 ? term : nll + term;
      }
      nll = nll / static_cast<double>(masks.size());
      Var l2 = tape.constant(0.0);
      for (std::size_t l = 0; l < layout.size(); ++l) {
        const auto& spec = net.layers[l];
        l2 = l2 + sum(square(slice(w, layout[l].weight_offset, {spec.fan_in * spec.fan_out})));
      }
      l2 = l2 * config.weight_decay;
      Var loss = nll + l2;
      std::vector<Var> ef;
      if (!specs.empty()) {
        ef = constraints::expected_constraints_dropout(specs, net, w, masks);
        if (penalize) loss = loss - constraints::composite(ef, weights) * config.lambda;
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) abort_training("non-finite loss", epoch, step, lv, flat, nullptr);
      auto grads = tape.backward(loss);
      std::vector<double> g = grads.at(w).vector();
      g.push_back(config.learn_obs_noise ? grads.at(obs).item() : 0.0);
      if (!all_finite(g)) abort_training("non-finite gradient", epoch, step, lv, flat, nullptr);
      opt.step(flat, g);
      if (!all_finite(flat)) abort_training("non-finite parameters", epoch, step, lv, flat, nullptr);
      acc.add(lv, nll.item(), l2.item(), values_of(ef));
    }
    EpochRecord rec = acc.finish(epoch);
    if (on_epoch) on_epoch(rec);
    result.history.push_back(std::move(rec));
  }

  result.model.kind = ModelKind::dropout;
  result.model.weights = slice_column(flat, 0, p);
  result.model.obs_log_var = flat[p];
  return result;
}

TrainResult train(const TrainConfig& config, const NetworkSpec& net, const Tensor& x,
                  const Tensor& y, std::span<const ConstraintSpec> specs,
                  const EpochCallback& on_epoch) {
  switch (config.backend) {
    case Backend::bbb: return train_bbb(config, net, x, y, specs, on_epoch);
    case Backend::svgd: return train_svgd(config, net, x, y, specs, on_epoch);
    case Backend::dropout: return train_dropout(config, net, x, y, specs, on_epoch);
  }
  throw ContractError("unknown backend");
}

bnn::PredictiveSummary predict(const TrainedModel& model, const NetworkSpec& net, const Tensor& x,
                               std::size_t samples, Rng& rng) {
  switch (model.kind) {
    case ModelKind::variational: return bnn::predict(model.params, net, x, samples, rng);
    case ModelKind::particles: return bnn::predict_particles(model.particles, net, x);
    case ModelKind::dropout: return bnn::predict_dropout(model.weights, net, x, samples, rng);
  }
  throw ContractError("unknown model kind");
}

// ---- checkpoints ----------------------------------------------------------------------

json to_json(const TrainedModel& m) {
  json j{{"kind", to_string(m.kind)}};
  switch (m.kind) {
    case ModelKind::variational:
      j["mu"] = m.params.mu.vector();
      j["log_var"] = m.params.log_var.vector();
      j["obs_log_var"] = m.obs_log_var;
      j["dual"] = {{"s", m.dual.s}, {"rho", m.dual.rho}, {"z", m.dual.z}};
      break;
    case ModelKind::particles: {
      json ps = json::array();
      for (const auto& p : m.particles) ps.push_back(p.vector());
      j["particles"] = ps;
      j["obs_log_var"] = m.particle_obs_log_var;
      break;
    }
    case ModelKind::dropout:
      j["weights"] = m.weights.vector();
      j["obs_log_var"] = m.obs_log_var;
      break;
  }
  return j;
}

TrainedModel model_from_json(const json& j, const NetworkSpec& net) {
  const std::size_t p = net.param_count();
  auto vec = [&](const json& v, const char* what) {
    auto out = v.get<std::vector<double>>();
    if (out.size() != p) {
      throw ContractError(std::string("checkpoint ") + what + " has " + std::to_string(out.size()) +
                          " entries but the network has " + std::to_string(p) + " parameters");
    }
    return Tensor::column(std::move(out));
  };
  try {
    TrainedModel m;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "variational") {
      m.kind = ModelKind::variational;
      m.params = {vec(j.at("mu"), "mu"), vec(j.at("log_var"), "log_var")};
      m.obs_log_var = j.at("obs_log_var").get<double>();
      if (j.contains("dual")) {
        const auto& d = j.at("dual");
        m.dual = {d.at("s").get<std::vector<double>>(), d.at("rho").get<std::vector<double>>(),
                  d.at("z").get<std::vector<double>>()};
        m.dual.validate();
      }
    } else if (kind == "particles") {
      m.kind = ModelKind::particles;
      for (const auto& particle : j.at("particles")) m.particles.push_back(vec(particle, "particle"));
      m.particle_obs_log_var = j.at("obs_log_var").get<std::vector<double>>();
      if (m.particles.size() < 2 || m.particle_obs_log_var.size() != m.particles.size()) {
        throw ContractError("checkpoint particle set is malformed");
      }
    } else if (kind == "dropout") {
      m.kind = ModelKind::dropout;
      m.weights = vec(j.at("weights"), "weights");
      m.obs_log_var = j.at("obs_log_var").get<double>();
    } else {
      throw ContractError("unknown checkpoint kind '" + kind + "'");
    }
    return m;
  } catch (const json::exception& e) {
    throw ContractError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace cbnn::train
