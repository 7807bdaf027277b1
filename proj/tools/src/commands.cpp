#include "cbnn_cli/commands.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "cbnn/errors.hpp"

namespace cbnn::cli {

using autodiff::Tensor;

namespace {

std::string num(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2E", v);
  return buf;
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory '" + dir.string() + "'");
  }
}

json with_hash(json j, const std::string& hash) {
  j["config_hash"] = hash;
  return j;
}

std::string label_for(train::Mode mode, const std::vector<double>& c) {
  switch (mode) {
    case train::Mode::unconstrained: return "BNN";
    case train::Mode::soft: return "PR-BNN (soft)";
    case train::Mode::hard: return "PR-BNN";
    case train::Mode::cocp: {
      std::string s = "OC-BNN [";
      for (std::size_t i = 0; i < c.size(); ++i) s += (i ? "," : "") + num(c[i]);
      return s + "]";
    }
  }
  return "?";
}

std::string slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch))) out += static_cast<char>(std::tolower(ch));
    else if (!out.empty() && out.back() != '_') out += '_';
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

std::string metrics_line(const metrics::MetricsRecord& m) {
  std::ostringstream os;
  os << "MSE " << sci(m.mse) << "  STD " << sci(m.std) << "  CRPS " << sci(m.crps);
  for (std::size_t i = 0; i < m.v.size(); ++i) os << "  v" << i + 1 << " " << sci(m.v[i]);
  for (std::size_t i = 0; i < m.n.size(); ++i) os << "  n" << i + 1 << " " << m.n[i];
  return os.str();
}

json checkpoint_json(const ExperimentConfig& config, const Experiment& exp,
                     const train::TrainedModel& model) {
  return {{"config_hash", config.hash},
          {"network", {{"inputs", exp.net.input_dim()},
                       {"hidden", config.network.hidden},
                       {"activation", bnn::to_string(config.network.activation)},
                       {"mode", bnn::to_string(config.network.mode)},
                       {"parameters", exp.net.param_count()}}},
          {"model", train::to_json(model)}};
}

}  // namespace

double band_fraction(const constraints::ConstraintSpec& band, const std::vector<double>& mean,
                     double slack) {
  const auto& x = band.grid.points;
  if (mean.size() != x.size()) throw DimensionError("band_fraction: one value per grid point");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mean[i] >= band.lower(x[i]) - slack && mean[i] <= band.upper(x[i]) + slack) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(x.size());
}

std::size_t thread_budget() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CBNN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string predictions_csv(const Experiment& exp, const Evaluation& eval, bool raw_samples,
                            const std::string& hash) {
  std::ostringstream os;
  os << "# config_hash=" << hash << "\n";
  for (const auto& c : exp.test.x_columns) os << c << ",";
  os << "y,mean,std";
  const auto& s = eval.test.samples;
  if (raw_samples) {
    for (std::size_t k = 0; k < s.rows(); ++k) os << ",sample_" << k;
  }
  os << "\n";
  const std::size_t d = exp.test.x.cols();
  for (std::size_t i = 0; i < exp.test.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) os << num(exp.test.x.at(i, j)) << ",";
    const double y = exp.y_scaler ? exp.y_scaler->inverse(exp.test.y[i]) : exp.test.y[i];
    os << num(y) << "," << num(eval.test.mean[i]) << "," << num(eval.test.std[i]);
    if (raw_samples) {
      for (std::size_t k = 0; k < s.rows(); ++k) os << "," << num(s.at(k, i));
    }
    os << "\n";
  }
  return os.str();
}

RunRecord run_experiment(const ExperimentConfig& config, const std::string& label,
                         const fs::path& dir) {
  const Experiment exp = materialize(config);
  RunRecord rec;
  rec.label = label;
  rec.mode = config.train.mode;
  rec.c_weights = config.train.c_weights;

  std::ostringstream history;
  auto on_epoch = [&](const train::EpochRecord& r) {
    history << with_hash(train::to_json(r), config.hash).dump() << "\n";
  };
  const auto start = std::chrono::steady_clock::now();
  try {
    rec.result = train::train(config.train, exp.net, exp.train.x, exp.train.y, exp.constraints,
                              on_epoch);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  } catch (const NumericalAbort& e) {
    if (!dir.empty()) {
      ensure_dir(dir);
      write_text(dir / "history.jsonl", history.str());
      write_text(dir / "abort_dump.json", e.dump() + "\n");
    }
    throw;
  }
  rec.eval = evaluate_model(config, exp, rec.result.model);

  if (!dir.empty()) {
    ensure_dir(dir);
    write_text(dir / "history.jsonl", history.str());
    write_text(dir / "checkpoint.json",
               checkpoint_json(config, exp, rec.result.model).dump(1) + "\n");
    write_text(dir / "metrics.json", metrics::to_json(rec.eval.metrics, config.hash).dump(2) + "\n");
    write_text(dir / "predictions.csv",
               predictions_csv(exp, rec.eval, config.evaluate.raw_samples, config.hash));
  }
  return rec;
}

ReproReport repro(data::SimId table, const ExperimentConfig& base, const fs::path& out,
                  std::size_t threads) {
  if (!base.data.sim || base.data.sim->id != table) {
    throw ContractError("repro " + data::to_string(table) + " needs a " + data::to_string(table) +
                        " simulation config");
  }
  std::vector<ExperimentConfig> jobs;
  auto add = [&](train::Mode mode, std::vector<double> c) {
    ExperimentConfig cfg = base;
    cfg.train.mode = mode;
    if (mode == train::Mode::cocp) cfg.train.c_weights = std::move(c);
    jobs.push_back(std::move(cfg));
  };
  add(train::Mode::unconstrained, {});
  if (table == data::SimId::sim1) {
    add(train::Mode::soft, {});
  } else {
    for (const auto& c : base.repro.c_sweep) add(train::Mode::cocp, c);
    add(train::Mode::hard, {});
  }

  ReproReport report;
  report.rows.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const auto label = label_for(jobs[i].train.mode, jobs[i].train.c_weights);
        report.rows[i] = run_experiment(jobs[i], label, out.empty() ? fs::path{} : out / slug(label));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, jobs.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  const auto exp = materialize(base);
  std::ostringstream md;
  md << "# " << data::to_string(table) << " comparison\n\n";
  md << "seed " << base.seed << ", config " << base.hash << ", " << base.evaluate.samples
     << " posterior samples, MSE and STD on the natural scale, population std\n\n";
  const std::size_t nc = exp.constraints.size();
  md << "| Method |";
  for (std::size_t i = 0; i < nc; ++i) md << " v" << i + 1 << " |";
  for (std::size_t i = 0; i < nc; ++i) md << " n" << i + 1 << " |";
  if (table == data::SimId::sim1) md << " in band | within 0.05 |";
  md << " MSE | STD |\n|---|";
  for (std::size_t i = 0; i < 2 * nc + 2 + (table == data::SimId::sim1 ? 2 : 0); ++i) md << "---|";
  md << "\n";
  for (const auto& row : report.rows) {
    const auto& m = row.eval.metrics;
    md << "| " << row.label << " |";
    for (double v : m.v) md << " " << sci(v) << " |";
    for (auto n : m.n) md << " " << n << " |";
    if (table == data::SimId::sim1) {
      Rng rng(derive_seed(base.seed, 0xB4D));
      const auto& c = exp.constraints.front();
      auto s = train::predict(row.result.model, exp.net, c.grid.column(), base.evaluate.samples, rng);
      md << " " << fixed3(band_fraction(c, s.mean)) << " | " << fixed3(band_fraction(c, s.mean, 0.05))
         << " |";
    }
    md << " " << sci(m.mse) << " | " << sci(m.std) << " |\n";
  }
  if (table == data::SimId::sim2) {
    const auto& hard = report.rows.back().result.model.dual;
    md << "\nfinal dual s = [";
    for (std::size_t i = 0; i < hard.s.size(); ++i) md << (i ? ", " : "") << fixed3(hard.s[i]);
    md << "]\n";
  }
  report.markdown = md.str();
  if (!out.empty()) {
    ensure_dir(out);
    write_text(out / "report.md", report.markdown);
    json rows = json::array();
    for (const auto& row : report.rows) {
      rows.push_back({{"label", row.label},
                      {"dir", slug(row.label)},
                      {"metrics", metrics::to_json(row.eval.metrics, base.hash)}});
    }
    write_text(out / "summary.json", json{{"config_hash", base.hash}, {"rows", rows}}.dump(2) + "\n");
  }
  return report;
}

GradcheckResult gradcheck(const ExperimentConfig& config, bool corrupt_gradient) {
  const Experiment exp = materialize(config);
  const auto& g = config.gradcheck;
  auto net = bnn::make_mlp(exp.train.x.cols(), g.hidden, 1, g.activation);
  net.layers.front().rbf_centers = config.network.rbf_centers;
  net.layers.front().rbf_widths = config.network.rbf_widths;

  const std::size_t rows = std::min<std::size_t>(exp.train.size(), 10);
  const std::size_t d = exp.train.x.cols();
  std::vector<double> xs(exp.train.x.values().begin(),
                         exp.train.x.values().begin() + static_cast<std::ptrdiff_t>(rows * d));
  std::vector<double> ys(exp.train.y.values().begin(),
                         exp.train.y.values().begin() + static_cast<std::ptrdiff_t>(rows));
  const Tensor x(autodiff::Shape{rows, d}, xs);
  const Tensor y = Tensor::column(ys);

  std::vector<constraints::ConstraintSpec> specs;
  if (d == 1) {
    for (auto c : exp.constraints) {
      if (c.grid.points.size() > 12) {
        std::vector<double> thin;
        const std::size_t stride = c.grid.points.size() / 12;
        for (std::size_t i = 0; i < c.grid.points.size() && thin.size() < 12; i += stride) {
          thin.push_back(c.grid.points[i]);
        }
        c.grid.points = thin;
      }
      specs.push_back(c);
    }
  }

  Rng rng(derive_seed(config.seed, 0x6C));
  auto init = bnn::VariationalParams::initialize(net, rng, -3.0);
  const std::size_t p = init.size();
  std::vector<double> flat = init.mu.vector();
  for (double v : init.log_var.values()) flat.push_back(v);
  flat.push_back(std::log(0.05));
  std::vector<Tensor> eps;
  for (std::size_t k = 0; k < g.samples; ++k) eps.push_back(Tensor::column(rng.normals(p)));

  auto dual = train::DualState::initial(specs.size(), 1.5, 0.5);
  std::vector<double> c_weights = config.train.c_weights;
  if (c_weights.size() != specs.size()) c_weights.assign(specs.size(), 1.0);
  const double lambda = config.train.lambda;

  using Objective = std::function<train::ObjectiveTerms(const train::ObjectiveInputs&)>;
  std::vector<std::pair<std::string, Objective>> modes{
      {"unconstrained", [](const train::ObjectiveInputs& in) { return train::elbo_objective(in); }}};
  if (!specs.empty()) {
    modes.push_back({"soft", [&](const train::ObjectiveInputs& in) {
                       return train::soft_objective(in, lambda);
                     }});
    modes.push_back({"hard", [&](const train::ObjectiveInputs& in) {
                       return train::hard_objective(in, dual);
                     }});
    modes.push_back({"cocp", [&](const train::ObjectiveInputs& in) {
                       return train::cocp_objective(in, c_weights);
                     }});
  }

  auto evaluate = [&](const Objective& obj, const std::vector<double>& params,
                      std::vector<double>* grad) {
    autodiff::Tape tape;
    train::ObjectiveInputs in;
    in.mu = tape.leaf(Tensor::column({params.begin(), params.begin() + static_cast<std::ptrdiff_t>(p)}));
    in.log_var = tape.leaf(Tensor::column(
        {params.begin() + static_cast<std::ptrdiff_t>(p), params.begin() + static_cast<std::ptrdiff_t>(2 * p)}));
    in.obs_log_var = tape.leaf(Tensor::scalar(params[2 * p]));
    in.net = &net;
    in.x = &x;
    in.y = &y;
    in.constraints = specs;
    in.eps = eps;
    in.prior = config.train.prior;
    auto t = obj(in);
    if (grad) {
      auto grads = tape.backward(t.loss);
      *grad = grads.at(in.mu).vector();
      for (double v : grads.at(in.log_var).values()) grad->push_back(v);
      grad->push_back(grads.at(in.obs_log_var).item());
    }
    return t.loss.item();
  };

  GradcheckResult res;
  std::ostringstream os;
  const double h = g.step;
  for (const auto& [name, obj] : modes) {
    std::vector<double> analytic;
    evaluate(obj, flat, &analytic);
    if (corrupt_gradient) analytic[0] += 1e-2 * (1.0 + std::abs(analytic[0]));
    double worst = 0.0;
    std::size_t worst_i = 0;
    double worst_num = 0.0;
    std::size_t skipped = 0;
    std::vector<double> probe = flat;
    auto central = [&](std::size_t i, double step) {
      probe[i] = flat[i] + step;
      const double up = evaluate(obj, probe, nullptr);
      probe[i] = flat[i] - step;
      const double down = evaluate(obj, probe, nullptr);
      probe[i] = flat[i];
      return (up - down) / (2.0 * step);
    };
    for (std::size_t i = 0; i < flat.size(); ++i) {
      const double fd = central(i, h);
      const double fd_half = central(i, h / 2.0);
      const double scale = std::max({std::abs(fd), std::abs(analytic[i]), 1e-3});
      if (std::abs(fd - fd_half) > 1e-3 * scale) {
        ++skipped;  // a kink lies inside the stencil
        continue;
      }
      const double err = std::abs(analytic[i] - fd) / scale;
      if (err > worst) {
        worst = err;
        worst_i = i;
        worst_num = fd;
      }
    }
    const bool ok = worst <= g.tolerance;
    res.passed = res.passed && ok;
    os << (ok ? "ok   " : "FAIL ") << name << "  max rel err " << sci(worst) << "  over "
       << flat.size() - skipped << " coordinates";
    if (skipped) os << " (" << skipped << " near kinks skipped)";
    if (!ok) {
      os << "  worst at parameter " << worst_i << ": analytic " << num(analytic[worst_i])
         << " vs numeric " << num(worst_num);
    }
    os << "\n";
  }

  // phi around its branch point
  bool phi_ok = true;
  for (auto [s, rho] : {std::pair{1.0, 2.0}, {1.5, 0.5}, {0.3, 7.0}}) {
    const double b = s / rho;
    const double delta = 1e-6;
    const double jump = std::abs(train::phi(b + delta, s, rho) - train::phi(b - delta, s, rho));
    const double slope = std::abs(train::phi_derivative(b - delta, s, rho) -
                                  train::phi_derivative(b + delta, s, rho));
    phi_ok = phi_ok && jump <= rho * delta * delta && slope <= rho * delta * (1.0 + 1e-9);
  }
  res.passed = res.passed && phi_ok;
  os << (phi_ok ? "ok   " : "FAIL ") << "phi continuity at s/rho +- 1e-6\n";
  res.report = os.str();
  return res;
}

int cmd_simulate(const ExperimentConfig& config, std::ostream& out) {
  if (!config.data.sim) throw ContractError("simulate needs a data.sim section");
  const auto sim = data::generate(*config.data.sim);
  const fs::path dir = config.output;
  ensure_dir(dir);
  data::save_csv(sim.train, (dir / "train.csv").string());
  data::save_csv(sim.test, (dir / "test.csv").string());
  json specs = json::array();
  for (const auto& c : config.constraints ? *config.constraints : sim.constraints) {
    specs.push_back(constraints::to_json(c));
  }
  write_text(dir / "constraints.json",
             json{{"config_hash", config.hash}, {"constraints", specs}}.dump(2) + "\n");
  out << data::to_string(config.data.sim->id) << ": " << sim.train.size() << " train rows, "
      << sim.test.size() << " test rows, " << specs.size() << " constraints -> " << dir.string()
      << "\n";
  return kOk;
}

int cmd_train(const ExperimentConfig& config, std::ostream& out) {
  const fs::path dir = config.output;
  const auto exp = materialize(config);
  ensure_dir(dir);
  std::ofstream history(dir / "history.jsonl", std::ios::binary);
  if (!history) throw IoError("cannot write '" + (dir / "history.jsonl").string() + "'");
  auto on_epoch = [&](const train::EpochRecord& r) {
    history << with_hash(train::to_json(r), config.hash).dump() << "\n";
  };
  train::TrainResult result;
  try {
    result = train::train(config.train, exp.net, exp.train.x, exp.train.y, exp.constraints, on_epoch);
  } catch (const NumericalAbort& e) {
    history.close();
    const auto dump = dir / "abort_dump.json";
    write_text(dump, e.dump() + "\n");
    std::cerr << "numerical abort: " << e.what() << "\nstate dump: " << dump.string() << "\n";
    return kNumericalAbort;
  }
  history.close();
  write_text(dir / "checkpoint.json", checkpoint_json(config, exp, result.model).dump(1) + "\n");
  const auto& last = result.history.back();
  out << train::to_string(config.train.mode) << "/" << train::to_string(config.train.backend)
      << ": " << result.history.size() << " epochs, final loss " << sci(last.loss);
  if (!last.s.empty()) {
    out << ", s = [";
    for (std::size_t i = 0; i < last.s.size(); ++i) out << (i ? ", " : "") << fixed3(last.s[i]);
    out << "]";
  }
  out << " -> " << (dir / "checkpoint.json").string() << "\n";
  return kOk;
}

int cmd_evaluate(const ExperimentConfig& config, const std::string& checkpoint, std::ostream& out) {
  const fs::path dir = config.output;
  const fs::path ckpt = checkpoint.empty() ? dir / "checkpoint.json" : fs::path(checkpoint);
  const auto exp = materialize(config);
  const json j = load_json_file(ckpt.string());
  if (!j.contains("model")) throw ContractError("'" + ckpt.string() + "' is not a checkpoint");
  const auto model = train::model_from_json(j.at("model"), exp.net);
  const auto eval = evaluate_model(config, exp, model);
  ensure_dir(dir);
  write_text(dir / "metrics.json", metrics::to_json(eval.metrics, config.hash).dump(2) + "\n");
  write_text(dir / "predictions.csv",
             predictions_csv(exp, eval, config.evaluate.raw_samples, config.hash));
  out << metrics_line(eval.metrics) << "\n";
  return kOk;
}

int cmd_gradcheck(const ExperimentConfig& config, bool corrupt_gradient, std::ostream& out) {
  const auto res = gradcheck(config, corrupt_gradient);
  out << res.report;
  return res.passed ? kOk : kCheckFailed;
}

int cmd_repro(data::SimId table, const ExperimentConfig& config, std::ostream& out) {
  const auto report = repro(table, config, config.output, thread_budget());
  out << report.markdown;
  return kOk;
}

}  // namespace cbnn::cli
