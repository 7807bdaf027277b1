#include "cbnn/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbnn/errors.hpp"
#include "cbnn/rng.hpp"

namespace cbnn::data {

void Scaler::validate() const {
  if (!(max > min)) {
    throw DomainError("scaler needs max > min (got min " + std::to_string(min) + ", max " +
                      std::to_string(max) + ")");
  }
}

std::vector<double> minmax_scale(std::span<const double> values, double min, double max) {
  const Scaler s{min, max};
  s.validate();
  std::vector<double> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [&](double v) { return s.scale(v); });
  return out;
}

std::vector<double> minmax_inverse(std::span<const double> scaled, double min, double max) {
  const Scaler s{min, max};
  s.validate();
  std::vector<double> out(scaled.size());
  std::transform(scaled.begin(), scaled.end(), out.begin(), [&](double v) { return s.inverse(v); });
  return out;
}

Scaler fit_scaler(std::span<const double> values) {
  if (values.empty()) throw DomainError("cannot fit a scaler to an empty column");
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  Scaler s{*lo, *hi};
  s.validate();
  return s;
}

void Dataset::validate() const {
  if (x.rank() != 2) throw DimensionError("dataset x must be n x d");
  if (x.rows() != y.size()) {
    throw DimensionError("dataset has " + std::to_string(x.rows()) + " inputs but " +
                         std::to_string(y.size()) + " targets");
  }
  if (x_columns.size() != x.cols()) throw DimensionError("x column names do not match x width");
}

std::vector<double> Dataset::column(std::size_t j) const {
  std::vector<double> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = x.at(r, j);
  return out;
}

Dataset scale_dataset(const Dataset& ds, const std::map<std::string, Scaler>& scalers) {
  ds.validate();
  Dataset out = ds;
  out.scalers = scalers;
  for (std::size_t j = 0; j < ds.x.cols(); ++j) {
    const Scaler& s = scalers.at(ds.x_columns[j]);
    s.validate();
    for (std::size_t r = 0; r < ds.x.rows(); ++r) out.x.at(r, j) = s.scale(ds.x.at(r, j));
  }
  const Scaler& sy = scalers.at(ds.y_column);
  sy.validate();
  for (std::size_t i = 0; i < ds.y.size(); ++i) out.y[i] = sy.scale(ds.y[i]);
  return out;
}

Dataset scale_dataset(const Dataset& ds) {
  ds.validate();
  std::map<std::string, Scaler> scalers;
  for (std::size_t j = 0; j < ds.x.cols(); ++j) scalers[ds.x_columns[j]] = fit_scaler(ds.column(j));
  scalers[ds.y_column] = fit_scaler(ds.y.values());
  return scale_dataset(ds, scalers);
}

double sim2_truth(double x) { return (std::atan(20.0 * x - 10.0) - std::atan(-10.0)) / 3.0; }

double sim2_upper_bound(double x) {
  const double arg = 25.0 * x + 1.0;
  if (!(arg > 0.0)) throw DomainError("sim2 upper bound undefined for x = " + std::to_string(x));
  return std::log(arg) / 3.0 + 0.05;
}

double sim1_target(double x) { return 4.2 * std::exp(-10.0 * x * x); }

SimId parse_sim_id(const std::string& name) {
  if (name == "sim1") return SimId::sim1;
  if (name == "sim2") return SimId::sim2;
  throw ParseError("unknown simulation '" + name + "'");
}

std::string to_string(SimId id) { return id == SimId::sim1 ? "sim1" : "sim2"; }

SimSpec SimSpec::defaults(SimId id) {
  SimSpec s;
  s.id = id;
  if (id == SimId::sim1) {
    s.train_range = {-1.0, 1.0};
    s.test_range = {-1.5, 1.5};
    s.train_size = s.sim1_x.size();
    s.test_size = 200;
    s.noise_std = 0.0;
    s.grid_size = 50;
  }
  return s;
}

void SimSpec::validate() const {
  if (train_range.first > train_range.second) throw ContractError("train range is not ordered");
  if (test_range.first > test_range.second) throw ContractError("test range is not ordered");
  if (train_size < 1 || test_size < 1 || grid_size < 1) throw ContractError("sizes must be >= 1");
  if (noise_std < 0.0) throw ContractError("noise std must be non-negative");
  if (id == SimId::sim1) {
    if (sim1_x.empty()) throw ContractError("sim1 needs training inputs");
    if (!sim1_y.empty() && sim1_y.size() != sim1_x.size()) {
      throw ContractError("sim1_y must match sim1_x in length");
    }
  }
}

namespace {

Dataset make_dataset(std::vector<double> x, std::vector<double> y, Split split) {
  Dataset ds;
  ds.x = Tensor::column(std::move(x));
  ds.y = Tensor::column(std::move(y));
  ds.split = split;
  return ds;
}

std::vector<double> even(std::size_t n, std::pair<double, double> range) {
  return constraints::Grid::uniform(n, range.first, range.second).points;
}

}  // namespace

SimData generate(const SimSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SimData out;
  if (spec.id == SimId::sim2) {
    std::vector<double> x(spec.train_size);
    for (auto& v : x) v = rng.uniform(spec.train_range.first, spec.train_range.second);
    std::sort(x.begin(), x.end());
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sim2_truth(x[i]) + spec.noise_std * rng.normal();
    out.train = make_dataset(std::move(x), std::move(y), Split::train);

    auto xt = even(spec.test_size, spec.test_range);
    std::vector<double> yt(xt.size());
    std::transform(xt.begin(), xt.end(), yt.begin(), sim2_truth);
    out.test = make_dataset(std::move(xt), std::move(yt), Split::test);

    const constraints::Grid grid{even(spec.grid_size, spec.test_range)};
    constraints::ConstraintSpec lower;
    lower.name = "lower";
    lower.kind = constraints::Kind::lower_bound;
    lower.grid = grid;
    constraints::ConstraintSpec upper;
    upper.name = "upper";
    upper.kind = constraints::Kind::upper_bound;
    upper.upper = constraints::BoundExpr::log_affine(25.0, 1.0, 1.0 / 3.0, 0.05);
    upper.grid = grid;
    constraints::ConstraintSpec mono;
    mono.name = "monotone";
    mono.kind = constraints::Kind::monotone;
    mono.grid = grid;
    out.constraints = {lower, upper, mono};
  } else {
    std::vector<double> x = spec.sim1_x;
    std::vector<double> y = spec.sim1_y;
    if (y.empty()) std::transform(x.begin(), x.end(), std::back_inserter(y), sim1_target);
    for (auto& v : y) v += spec.noise_std * rng.normal();
    out.train = make_dataset(std::move(x), std::move(y), Split::train);

    auto xt = even(spec.test_size, spec.test_range);
    std::vector<double> yt(xt.size());
    std::transform(xt.begin(), xt.end(), yt.begin(), sim1_target);
    out.test = make_dataset(std::move(xt), std::move(yt), Split::test);

    constraints::ConstraintSpec band;
    band.name = "band";
    band.kind = constraints::Kind::band;
    band.lower = constraints::BoundExpr::constant(2.5);
    band.upper = constraints::BoundExpr::constant(3.0);
    band.grid = constraints::Grid::uniform(spec.grid_size, -0.3, 0.3);
    out.constraints = {band};
  }
  for (auto& c : out.constraints) c.validate();
  return out;
}

// ---- CSV --------------------------------------------------------------------

std::string scaler_path(const std::string& csv_path) { return csv_path + ".scaler.json"; }

namespace {

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

void save_csv(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  for (const auto& c : ds.x_columns) out << c << ',';
  out << ds.y_column << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t j = 0; j < ds.x.cols(); ++j) out << format_double(ds.x.at(r, j)) << ',';
    out << format_double(ds.y[r]) << '\n';
  }
  if (!out) throw std::ios_base::failure("failed writing " + path);
  if (!ds.scalers.empty()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, s] : ds.scalers) j[name] = {{"min", s.min}, {"max", s.max}};
    std::ofstream side(scaler_path(path), std::ios::binary);
    if (!side) throw std::ios_base::failure("cannot write " + scaler_path(path));
    side << j.dump(2) << '\n';
  }
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open");
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      header = split_row(line);
      break;
    }
  }
  if (header.empty()) throw ParseError(path + ": empty file, expected a header row");

  auto find_column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": missing column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> x_idx;
  for (const auto& c : schema.x_columns) x_idx.push_back(find_column(c));
  const std::size_t y_idx = find_column(schema.y_column);

  std::vector<double> xs;
  std::vector<double> ys;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    }
    auto parse = [&](std::size_t idx) {
      const std::string& cell = cells[idx];
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || res.ec != std::errc{} || res.ptr != cell.data() + cell.size() ||
          !std::isfinite(v)) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric cell '" + cell +
                         "' in column '" + header[idx] + "'");
      }
      return v;
    };
    for (std::size_t idx : x_idx) xs.push_back(parse(idx));
    ys.push_back(parse(y_idx));
  }
  if (ys.empty()) throw ParseError(path + ": no data rows");

  Dataset ds;
  ds.x = Tensor({ys.size(), x_idx.size()}, std::move(xs));
  ds.y = Tensor::column(std::move(ys));
  ds.x_columns = schema.x_columns;
  ds.y_column = schema.y_column;

  const std::string side = scaler_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream sin(side);
    nlohmann::json j;
    try {
      sin >> j;
      for (const auto& [name, v] : j.items()) {
        ds.scalers[name] = Scaler{v.at("min").get<double>(), v.at("max").get<double>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(side + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace cbnn::data
