#include <algorithm>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "cbnn/data.hpp"
#include "cbnn/errors.hpp"
#include "cbnn/rng.hpp"
#include "doctest.h"

using namespace cbnn;
using namespace cbnn::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / ("cbnn_test_data_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("min-max scaling examples") {
  std::vector<double> v{5.0, 0.0, 10.0};
  auto s = minmax_scale(v, 0.0, 10.0);
  CHECK(s == std::vector<double>{0.5, 0.0, 1.0});
  CHECK_THROWS_AS(minmax_scale(v, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(minmax_scale(v, 2.0, 1.0), DomainError);
  std::vector<double> constant{3.0, 3.0};
  CHECK_THROWS_AS(fit_scaler(constant), DomainError);
}

TEST_CASE("min-max round trip of random values") {
  Rng rng(5);
  std::vector<double> v(1000);
  for (auto& x : v) x = rng.uniform(-50.0, 80.0);
  const auto sc = fit_scaler(v);
  const auto back = minmax_inverse(minmax_scale(v, sc.min, sc.max), sc.min, sc.max);
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(back[i] - v[i]));
  CHECK(worst <= 1e-12);
}

TEST_CASE("scaled dataset lies in the unit interval and inverts") {
  auto sim = generate(SimSpec::defaults(SimId::sim2));
  auto scaled = scale_dataset(sim.train);
  for (double y : scaled.y.values()) CHECK((y >= 0.0 && y <= 1.0));
  const auto& sy = scaled.scalers.at("y");
  for (std::size_t i = 0; i < sim.train.size(); ++i) {
    CHECK(std::abs(sy.inverse(scaled.y[i]) - sim.train.y[i]) <= 1e-12);
  }
}

TEST_CASE("sim2 truth and upper bound") {
  CHECK(sim2_truth(0.5) == doctest::Approx(0.4903758914345782).epsilon(1e-14));
  CHECK(sim2_truth(0.0) == 0.0);
  CHECK(sim2_upper_bound(0.0) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(sim2_upper_bound(0.5) == doctest::Approx(0.9175632284814613).epsilon(1e-14));
  CHECK_THROWS_AS(sim2_upper_bound(-0.04), DomainError);
  const auto grid = constraints::Grid::uniform(1000, 0.08, 1.0).points;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(sim2_upper_bound(grid[i]) > sim2_truth(grid[i]));
    if (i > 0) CHECK(sim2_truth(grid[i]) > sim2_truth(grid[i - 1]));
  }
}

TEST_CASE("sim2 generation") {
  auto spec = SimSpec::defaults(SimId::sim2);
  spec.seed = 17;
  auto sim = generate(spec);
  CHECK(sim.test.size() == 200);
  CHECK(sim.test.x[0] == 0.08);
  CHECK(sim.test.x[199] == 1.0);
  CHECK(sim.train.size() == 40);
  for (double x : sim.train.x.values()) CHECK((x >= 0.1 && x <= 0.65));
  REQUIRE(sim.constraints.size() == 3);
  CHECK(sim.constraints[0].kind == constraints::Kind::lower_bound);
  CHECK(sim.constraints[1].kind == constraints::Kind::upper_bound);
  CHECK(sim.constraints[2].kind == constraints::Kind::monotone);
  CHECK(sim.constraints[1].grid.points.size() == 200);

  auto again = generate(spec);
  CHECK(again.train.x == sim.train.x);
  CHECK(again.train.y == sim.train.y);
  spec.seed = 18;
  CHECK_FALSE(generate(spec).train.x == sim.train.x);

  spec.noise_std = 0.0;
  auto clean = generate(spec);
  for (std::size_t i = 0; i < clean.train.size(); ++i) {
    CHECK(clean.train.y[i] == sim2_truth(clean.train.x[i]));
  }

  spec.train_range = {0.7, 0.1};
  CHECK_THROWS_AS(generate(spec), ContractError);
}

TEST_CASE("sim1 generation") {
  auto sim = generate(SimSpec::defaults(SimId::sim1));
  CHECK(sim.train.size() == 6);
  CHECK(sim.train.y[2] == sim1_target(-0.2));
  REQUIRE(sim.constraints.size() == 1);
  CHECK(sim.constraints[0].kind == constraints::Kind::band);
  CHECK(sim.constraints[0].grid.points.size() == 50);
  CHECK(sim.constraints[0].grid.points.front() == -0.3);
  CHECK(sim.constraints[0].grid.points.back() == 0.3);

  auto spec = SimSpec::defaults(SimId::sim1);
  spec.sim1_y = {1, 2, 3, 4, 5, 6};
  CHECK(generate(spec).train.y[3] == 4.0);
  spec.sim1_y = {1, 2};
  CHECK_THROWS_AS(generate(spec), ContractError);
}

TEST_CASE("csv round trip is lossless") {
  const auto dir = scratch_dir();
  auto sim = generate(SimSpec::defaults(SimId::sim2));
  auto scaled = scale_dataset(sim.train);
  const auto path = (dir / "train.csv").string();
  save_csv(scaled, path);
  auto back = load_csv(path);
  CHECK(back.x == scaled.x);
  CHECK(back.y == scaled.y);
  REQUIRE(back.scalers.size() == 2);
  CHECK(back.scalers.at("y").min == scaled.scalers.at("y").min);

  const auto first = read_file(path);
  save_csv(scaled, path);
  CHECK(read_file(path) == first);
  fs::remove_all(dir);
}

TEST_CASE("csv fixture parses to the expected tensor") {
  const auto dir = scratch_dir();
  const auto path = dir / "fixture.csv";
  write_file(path, "a,b,target\n1,2,3\n0.5, -1e-3 ,7\n\n4,5,6\n");
  auto ds = load_csv(path.string(), CsvSchema{{"b", "a"}, "target"});
  CHECK(ds.x == autodiff::Tensor::matrix({{2, 1}, {-1e-3, 0.5}, {5, 4}}));
  CHECK(ds.y == autodiff::Tensor::column({3, 7, 6}));
  fs::remove_all(dir);
}

TEST_CASE("csv errors carry line numbers") {
  const auto dir = scratch_dir();
  auto expect_error = [&](const std::string& text, const std::string& fragment) {
    const auto path = dir / "bad.csv";
    write_file(path, text);
    try {
      load_csv(path.string());
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  expect_error("", "empty file");
  expect_error("x,z\n1,2\n", ":1: missing column 'y'");
  expect_error("x,y\n1,2\n3,abc\n", ":3: non-numeric cell 'abc'");
  expect_error("x,y\n1,2\n3\n", ":3: expected 2 cells");
  expect_error("x,y\n1,2,4\n", ":2: expected 2 cells");
  expect_error("x,y\n", "no data rows");
  CHECK_THROWS_AS(load_csv((dir / "missing.csv").string()), ParseError);
  fs::remove_all(dir);
}
