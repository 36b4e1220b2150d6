#include <benchmark/benchmark.h>

#include "tpu/simulation.hpp"
#include "tpu/update_engine.hpp"

namespace {

using namespace tpu;

void BM_GaussHermiteCached(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(gauss_hermite(static_cast<int>(state.range(0))).nodes.data());
}
BENCHMARK(BM_GaussHermiteCached)->Arg(30)->Arg(60);

struct Fixture {
  ScenarioConfig cfg;
  Calibration cal;
  TwoPhaseDataset data;
  FitResult fit;
  CondDist dist;

  explicit Fixture(ModelKind kind)
      : cfg(make_cfg(kind)),
        cal(calibrate(cfg)),
        data(generate(cfg, 0, cal)),
        fit(fit_original(data, spec())),
        dist(fit_kernel_cond_dist(split(data).subsample, {0})) {}

  static ScenarioConfig make_cfg(ModelKind kind) {
    ScenarioConfig c;
    c.model = kind;
    return c;
  }
  ModelSpec spec() const {
    ModelSpec m;
    m.kind = cfg.model;
    return m;
  }
};

// One sweep of the full-sample phi* equation (1000 subjects x 200 kernel atoms).
void BM_PhiStarSweep(benchmark::State& state) {
  const Fixture fx(static_cast<ModelKind>(state.range(0)));
  std::vector<std::size_t> all(fx.data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const SampleView full(fx.data, all);
  const PhiStarSystem sys(fx.spec(), fx.fit.nuisance, fx.dist, full);
  const Vector w = Vector::Ones(static_cast<Eigen::Index>(fx.data.size()));
  for (auto _ : state) benchmark::DoNotOptimize(sys.weighted_sum(fx.fit.theta, w));
}
BENCHMARK(BM_PhiStarSweep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_WorkingPair(benchmark::State& state) {
  const Fixture fx(static_cast<ModelKind>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        solve_working_pair(fx.data, fx.fit.theta, fx.spec(), fx.fit.nuisance, fx.dist, 0.0).vartheta_f);
  }
}
BENCHMARK(BM_WorkingPair)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_CoxFit(benchmark::State& state) {
  const Fixture fx(ModelKind::Cox);
  for (auto _ : state) benchmark::DoNotOptimize(fit_original(fx.data, fx.spec()).theta);
}
BENCHMARK(BM_CoxFit)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
