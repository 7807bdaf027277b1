#include <benchmark/benchmark.h>

#include "cbnn/metrics.hpp"
#include "cbnn/trainers.hpp"
#include "cbnn_cli/experiment.hpp"

using namespace cbnn;
using autodiff::Tape;
using autodiff::Tensor;

namespace {

struct Sim2 {
  cli::ExperimentConfig config;
  cli::Experiment exp;
  Sim2(std::size_t hidden)
      : config([&] {
          auto doc = cli::default_document(data::SimId::sim2);
          doc["network"]["hidden"] = hidden;
          return cli::parse_experiment(doc);
        }()),
        exp(cli::materialize(config)) {}
};

void BM_ForwardBackward(benchmark::State& state) {
  Sim2 s(static_cast<std::size_t>(state.range(0)));
  Rng rng(1);
  const auto w = Tensor::column(rng.normals(s.exp.net.param_count()));
  for (auto _ : state) {
    Tape tape;
    auto wv = tape.leaf(w);
    auto out = bnn::forward(s.exp.net, wv, tape.constant(s.exp.train.x));
    auto g = tape.backward(sum(square(out)));
    benchmark::DoNotOptimize(g.at(wv).vector().data());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(10)->Arg(100);

void BM_Objective(benchmark::State& state) {
  Sim2 s(100);
  const auto mode = static_cast<int>(state.range(0));
  const std::size_t n = s.exp.net.param_count();
  Rng rng(2);
  const auto mu0 = Tensor::column(rng.normals(n));
  const auto lv0 = Tensor::column(std::vector<double>(n, -6.0));
  std::vector<Tensor> eps;
  for (int i = 0; i < 4; ++i) eps.push_back(Tensor::column(rng.normals(n)));
  auto dual = train::DualState::initial(s.exp.constraints.size());
  const std::vector<double> c(s.exp.constraints.size(), 1.0);
  for (auto _ : state) {
    Tape tape;
    train::ObjectiveInputs in;
    in.mu = tape.leaf(mu0);
    in.log_var = tape.leaf(lv0);
    in.obs_log_var = tape.leaf(Tensor::column({-4.6}));
    in.net = &s.exp.net;
    in.prior = s.config.train.prior;
    in.x = &s.exp.train.x;
    in.y = &s.exp.train.y;
    in.constraints = s.exp.constraints;
    in.eps = eps;
    in.kl_weight = 0.1;
    train::ObjectiveTerms t = mode == 0   ? train::elbo_objective(in)
                              : mode == 1 ? train::soft_objective(in, 1.0)
                              : mode == 2 ? train::hard_objective(in, dual)
                                          : (in.kl = bnn::KlMethod::monte_carlo,
                                             train::cocp_objective(in, c));
    auto g = tape.backward(t.loss);
    benchmark::DoNotOptimize(g.at(in.mu).vector().data());
  }
}
BENCHMARK(BM_Objective)->DenseRange(0, 3)->ArgName("elbo_soft_hard_cocp");

void BM_Crps(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto ens = rng.normals(n);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::crps_point(ens, 0.3));
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}
BENCHMARK(BM_Crps)->RangeMultiplier(10)->Range(100, 100000)->Complexity();

void BM_SvgdDirection(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  std::vector<std::vector<double>> particles(n), scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    particles[i] = rng.normals(300);
    scores[i] = rng.normals(300);
  }
  for (auto _ : state) benchmark::DoNotOptimize(train::svgd_direction(particles, scores));
}
BENCHMARK(BM_SvgdDirection)->Arg(10)->Arg(50);

}  // namespace
BENCHMARK_MAIN();
