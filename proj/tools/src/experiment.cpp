#include "cbnn_cli/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "cbnn/errors.hpp"

namespace cbnn::cli {

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw ParseError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <class T>
T get(const json& j, const std::string& key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + "." + key + ": " + e.what());
  }
}

std::pair<double, double> get_range(const json& j, const std::string& key, const std::string& where,
                                    std::pair<double, double> fallback) {
  auto v = get<std::vector<double>>(j, key, where, {fallback.first, fallback.second});
  if (v.size() != 2) throw ParseError(where + "." + key + " must be [lo, hi]");
  return {v[0], v[1]};
}

data::SimSpec parse_sim(const json& j) {
  check_keys(j, {"id", "train_range", "test_range", "train_size", "test_size", "noise_std",
                 "grid_size", "sim1_x", "sim1_y"},
             "data.sim");
  if (!j.contains("id")) throw ParseError("data.sim.id is required");
  auto s = data::SimSpec::defaults(data::parse_sim_id(get<std::string>(j, "id", "data.sim", "")));
  s.train_range = get_range(j, "train_range", "data.sim", s.train_range);
  s.test_range = get_range(j, "test_range", "data.sim", s.test_range);
  s.train_size = get(j, "train_size", "data.sim", s.train_size);
  s.test_size = get(j, "test_size", "data.sim", s.test_size);
  s.noise_std = get(j, "noise_std", "data.sim", s.noise_std);
  s.grid_size = get(j, "grid_size", "data.sim", s.grid_size);
  s.sim1_x = get(j, "sim1_x", "data.sim", s.sim1_x);
  s.sim1_y = get(j, "sim1_y", "data.sim", s.sim1_y);
  s.validate();
  return s;
}

DataConfig parse_data(const json& j) {
  check_keys(j, {"sim", "csv", "scale"}, "data");
  DataConfig d;
  if (j.contains("sim") == j.contains("csv")) {
    throw ParseError("data needs exactly one of 'sim' or 'csv'");
  }
  if (j.contains("sim")) d.sim = parse_sim(j.at("sim"));
  if (j.contains("csv")) {
    const auto& c = j.at("csv");
    check_keys(c, {"train", "test", "x_columns", "y_column"}, "data.csv");
    d.train_csv = get<std::string>(c, "train", "data.csv", "");
    d.test_csv = get<std::string>(c, "test", "data.csv", "");
    if (d.train_csv.empty() || d.test_csv.empty()) {
      throw ParseError("data.csv needs 'train' and 'test' paths");
    }
    d.schema.x_columns = get(c, "x_columns", "data.csv", d.schema.x_columns);
    d.schema.y_column = get(c, "y_column", "data.csv", d.schema.y_column);
  }
  d.scale = get(j, "scale", "data", d.scale);
  return d;
}

NetworkConfig parse_network(const json& j) {
  check_keys(j, {"hidden", "activation", "mode", "dropout_p", "rbf_centers", "rbf_widths",
                 "obs_log_var_init", "prior_variance", "log_var_init"},
             "network");
  NetworkConfig n;
  n.hidden = get(j, "hidden", "network", n.hidden);
  if (j.contains("activation")) {
    n.activation = bnn::parse_activation(get<std::string>(j, "activation", "network", ""));
  }
  if (j.contains("mode")) n.mode = bnn::parse_net_mode(get<std::string>(j, "mode", "network", ""));
  n.dropout_p = get(j, "dropout_p", "network", n.dropout_p);
  n.rbf_centers = get(j, "rbf_centers", "network", n.rbf_centers);
  n.rbf_widths = get(j, "rbf_widths", "network", n.rbf_widths);
  n.obs_log_var_init = get(j, "obs_log_var_init", "network", n.obs_log_var_init);
  n.prior_variance = get(j, "prior_variance", "network", n.prior_variance);
  n.log_var_init = get(j, "log_var_init", "network", n.log_var_init);
  if (n.hidden == 0) throw ContractError("network.hidden must be >= 1");
  bnn::GaussianPrior{0.0, n.prior_variance}.validate();
  return n;
}

EvalConfig parse_eval(const json& j) {
  check_keys(j, {"samples", "count_mode", "raw_samples"}, "evaluate");
  EvalConfig e;
  e.samples = get(j, "samples", "evaluate", e.samples);
  if (j.contains("count_mode")) {
    const auto m = get<std::string>(j, "count_mode", "evaluate", "");
    if (m == "posterior_mean") e.count = metrics::CountMode::posterior_mean;
    else if (m == "any_sample") e.count = metrics::CountMode::any_sample;
    else throw ParseError("unknown evaluate.count_mode '" + m + "'");
  }
  e.raw_samples = get(j, "raw_samples", "evaluate", e.raw_samples);
  if (e.samples < 2) throw ContractError("evaluate.samples must be >= 2");
  return e;
}

GradcheckConfig parse_gradcheck(const json& j) {
  check_keys(j, {"hidden", "activation", "samples", "step", "tolerance"}, "gradcheck");
  GradcheckConfig g;
  g.hidden = get(j, "hidden", "gradcheck", g.hidden);
  if (j.contains("activation")) {
    g.activation = bnn::parse_activation(get<std::string>(j, "activation", "gradcheck", ""));
  }
  g.samples = get(j, "samples", "gradcheck", g.samples);
  g.step = get(j, "step", "gradcheck", g.step);
  g.tolerance = get(j, "tolerance", "gradcheck", g.tolerance);
  if (g.hidden == 0 || g.samples == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0)) {
    throw ContractError("gradcheck sizes, step and tolerance must be positive");
  }
  return g;
}

ReproConfig parse_repro(const json& j) {
  check_keys(j, {"c_sweep"}, "repro");
  ReproConfig r;
  r.c_sweep = get(j, "c_sweep", "repro", r.c_sweep);
  return r;
}

std::string json_kind(const json& v) {
  return v.is_object() ? "an object" : "a value";
}

}  // namespace

bnn::NetworkSpec NetworkConfig::build(std::size_t input_dim) const {
  auto spec = bnn::make_mlp(input_dim, hidden, 1, activation);
  spec.mode = mode;
  spec.obs_log_var_init = obs_log_var_init;
  for (auto& l : spec.layers) {
    l.dropout_p = dropout_p;
    l.rbf_centers = rbf_centers;
    l.rbf_widths = rbf_widths;
  }
  spec.validate();
  return spec;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ParseError("override '" + assignment + "' is not key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::stringstream parts(path);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) {
    if (part.empty()) throw ParseError("override '" + assignment + "' has an empty key");
    keys.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) {
      throw ParseError("override '" + path + "' descends into " + json_kind(*node));
    }
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ParseError("override '" + path + "' descends into a value");
  (*node)[keys.back()] = value;
}

std::string config_hash(const json& doc) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig parse_experiment(const json& doc) {
  check_keys(doc, {"name", "seed", "data", "network", "train", "constraints", "evaluate",
                   "gradcheck", "repro", "output"},
             "");
  ExperimentConfig c;
  c.name = get(doc, "name", "", c.name);
  c.seed = get(doc, "seed", "", c.seed);
  c.output = get(doc, "output", "", c.output);
  if (!doc.contains("data")) throw ParseError("config needs a 'data' section");
  c.data = parse_data(doc.at("data"));
  if (c.data.sim) c.data.sim->seed = c.seed;
  if (doc.contains("network")) c.network = parse_network(doc.at("network"));
  if (doc.contains("train")) c.train = train::train_config_from_json(doc.at("train"));
  c.train.seed = c.seed;
  c.train.prior = bnn::GaussianPrior{0.0, c.network.prior_variance};
  c.train.log_var_init = c.network.log_var_init;
  c.train.validate();
  if ((c.train.backend == train::Backend::dropout) != (c.network.mode == bnn::NetMode::dropout)) {
    throw ContractError("the dropout backend and network.mode 'dropout' go together");
  }
  if (doc.contains("constraints")) {
    if (!doc.at("constraints").is_array()) throw ParseError("constraints must be an array");
    std::vector<constraints::ConstraintSpec> specs;
    for (const auto& item : doc.at("constraints")) {
      specs.push_back(constraints::constraint_from_json(item));
      specs.back().validate();
    }
    c.constraints = std::move(specs);
  }
  if (!c.data.sim && !c.constraints) c.constraints.emplace();
  if (doc.contains("evaluate")) c.evaluate = parse_eval(doc.at("evaluate"));
  if (doc.contains("gradcheck")) c.gradcheck = parse_gradcheck(doc.at("gradcheck"));
  if (doc.contains("repro")) c.repro = parse_repro(doc.at("repro"));
  c.document = doc;
  json hashed = doc;
  hashed.erase("output");
  c.hash = config_hash(hashed);
  return c;
}

json default_document(data::SimId id) {
  if (id == data::SimId::sim1) {
    return {
        {"name", "sim1"},
        {"seed", 0},
        {"data", {{"sim", {{"id", "sim1"}}}}},
        {"network",
         {{"hidden", 10}, {"activation", "rbf"}, {"rbf_centers", {0.0}}, {"rbf_widths", {1.0}}}},
        {"train",
         {{"mode", "soft"},
          {"lambda", 30.0},
          {"epochs", 600},
          {"steps_per_epoch", 5},
          {"kl_weight", 0.1},
          {"learn_obs_noise", false}}},
        {"output", "runs/sim1"},
    };
  }
  return {
      {"name", "sim2"},
      {"seed", 7},
      {"data", {{"sim", {{"id", "sim2"}}}}},
      {"network", {{"hidden", 100}, {"activation", "relu"}}},
      {"train",
       {{"mode", "hard"},
        {"epochs", 1000},
        {"steps_per_epoch", 5},
        {"kl_weight", 0.1},
        {"c_weights", {1.0, 1.0, 1.0}}}},
      {"output", "runs/sim2"},
  };
}

Experiment materialize(const ExperimentConfig& config) {
  Experiment e;
  if (config.data.sim) {
    auto sim = data::generate(*config.data.sim);
    e.train = std::move(sim.train);
    e.test = std::move(sim.test);
    e.constraints = config.constraints ? *config.constraints : std::move(sim.constraints);
  } else {
    e.train = data::load_csv(config.data.train_csv, config.data.schema);
    e.test = data::load_csv(config.data.test_csv, config.data.schema);
    e.test.split = data::Split::test;
    e.constraints = *config.constraints;
  }
  if (config.data.scale) {
    auto scaled = data::scale_dataset(e.train);
    e.test = data::scale_dataset(e.test, scaled.scalers);
    e.y_scaler = scaled.scalers.at(e.train.y_column);
    e.train = std::move(scaled);
  }
  e.net = config.network.build(e.train.x.cols());
  if (config.train.mode == train::Mode::cocp && config.train.c_weights.size() != e.constraints.size()) {
    throw ContractError("train.c_weights needs one weight per constraint (" +
                        std::to_string(e.constraints.size()) + ")");
  }
  return e;
}

Evaluation evaluate_model(const ExperimentConfig& config, const Experiment& exp,
                          const train::TrainedModel& model) {
  Rng rng(derive_seed(config.seed, 0xE7A1));
  Evaluation out;
  auto scaled = train::predict(model, exp.net, exp.test.x, config.evaluate.samples, rng);

  std::vector<bnn::PredictiveSummary> on_grids;
  for (const auto& c : exp.constraints) {
    if (c.grid.points == exp.test.x.vector() && exp.test.x.cols() == 1) {
      on_grids.push_back(scaled);
    } else {
      on_grids.push_back(
          train::predict(model, exp.net, c.grid.column(), config.evaluate.samples, rng));
    }
  }

  out.test = scaled;
  std::vector<double> target = exp.test.y.vector();
  if (exp.y_scaler) {
    auto natural = scaled.samples;
    for (auto& v : natural.values()) v = exp.y_scaler->inverse(v);
    out.test = bnn::summarize(std::move(natural));
    for (auto& v : target) v = exp.y_scaler->inverse(v);
  }

  auto& m = out.metrics;
  m.mse = metrics::mse(out.test.mean, target);
  m.std = metrics::epistemic_std(out.test);
  m.crps = metrics::crps_ensemble(out.test.samples, target);
  m.n_test = target.size();
  if (!exp.constraints.empty()) {
    auto stats = metrics::violation_stats(exp.constraints, on_grids, config.evaluate.count);
    m.v = std::move(stats.v);
    m.n = std::move(stats.n);
  }
  return out;
}

}  // namespace cbnn::cli
