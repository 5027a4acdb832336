#include "oslsel/el_likelihood.hpp"
#include "oslsel/em.hpp"
#include "oslsel/simulation.hpp"

#include <benchmark/benchmark.h>

namespace {

oslsel::ElProblem problem_of_size(int n) {
  oslsel::ScenarioSpec spec = oslsel::ScenarioSpec::section51(1.0 / 3.0);
  spec.n = n;
  spec.m = n;
  spec.m_star = 1;
  oslsel::Replicate rep = oslsel::generate_replicate(spec, 0);
  return oslsel::ElProblem(std::move(rep.data), oslsel::BasisSpec::identity(spec.dim()));
}

void BM_Fit(benchmark::State& state) {
  const auto problem = problem_of_size(static_cast<int>(state.range(0)));
  oslsel::EmConfig config;
  config.n_starts = 1;
  for (auto _ : state) benchmark::DoNotOptimize(oslsel::fit(problem, config).log_el);
}
BENCHMARK(BM_Fit)->Arg(300)->Arg(1200)->Unit(benchmark::kMillisecond);

void BM_SolveLambda(benchmark::State& state) {
  const auto problem = problem_of_size(static_cast<int>(state.range(0)));
  const auto solution = oslsel::fit(problem, oslsel::EmConfig{});
  for (auto _ : state) benchmark::DoNotOptimize(oslsel::solve_lambda(solution.theta.gamma, problem).lambda);
}
BENCHMARK(BM_SolveLambda)->Arg(1200)->Arg(4800);

void BM_GammaStep(benchmark::State& state) {
  const auto problem = problem_of_size(static_cast<int>(state.range(0)));
  oslsel::EmConfig config;
  config.n_starts = 1;
  const auto solution = oslsel::fit(problem, config);
  const oslsel::Matrix w = oslsel::e_step(solution.theta, problem.test_phi());
  for (auto _ : state) benchmark::DoNotOptimize(oslsel::m_step_gamma(w, problem, solution.theta.gamma).gamma);
}
BENCHMARK(BM_GammaStep)->Arg(1200);

}  // namespace
BENCHMARK_MAIN();
