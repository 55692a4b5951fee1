#include "fracimp/calib.hpp"
#include "fracimp/fhdi.hpp"
#include "fracimp/pfi.hpp"
#include "fracimp/semiparam.hpp"
#include "fracimp/sim.hpp"
#include "fracimp/variance.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <limits>
#include <optional>

using namespace fracimp;

namespace {

std::shared_ptr<const SurveyDataset> normal_data(std::size_t n)
{
    auto rng = substream(11, Stream::population, 0);
    std::vector<Item> items { { "x", ItemKind::continuous, {} }, { "y", ItemKind::continuous, {} } };
    std::vector<UnitRecord> units(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = standard_normal(rng);
        const double y = 1.0 + 2.0 * x + standard_normal(rng);
        units[i].id = std::to_string(i);
        units[i].weight = 1.0;
        units[i].values = { x, uniform01(rng) < 0.3 ? std::nullopt : std::optional<double>(y) };
    }
    return std::make_shared<const SurveyDataset>(std::move(items), std::move(units));
}

PFIResult pfi(const std::shared_ptr<const SurveyDataset>& d, const std::shared_ptr<SequentialModel>& model,
    std::size_t M)
{
    const Vector theta0 = fit_conditional_components(*d, *model);
    PFIConfig cfg;
    cfg.M = M;
    cfg.sir_pool = std::max<std::size_t>(M, 100);
    return run_em(d, *model, plugin_proposal(model, theta0, cfg.sir_pool), theta0, cfg, 1);
}

void BM_PfiEm(benchmark::State& state)
{
    const auto d = normal_data(static_cast<std::size_t>(state.range(0)));
    auto model = make_normal_model(1, { 0 }, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(pfi(d, model, static_cast<std::size_t>(state.range(1))).theta);
    }
}
BENCHMARK(BM_PfiEm)->Args({ 200, 100 })->Args({ 1000, 100 })->Unit(benchmark::kMillisecond);

void BM_JackknifeReplicates(benchmark::State& state)
{
    const auto d = normal_data(static_cast<std::size_t>(state.range(0)));
    auto model = make_normal_model(1, { 0 }, 2);
    const auto res = pfi(d, model, 100);
    ReplicateOptions o;
    o.method = state.range(1) == 0 ? ReplicateMethod::one_step_newton : ReplicateMethod::em;
    const ReplicateEngine eng(res, model, build_delete1(*d), o);
    for (auto _ : state) {
        benchmark::DoNotOptimize(eng.run({ EstimatingFunction::mean(1) }));
    }
}
BENCHMARK(BM_JackknifeReplicates)->Args({ 200, 0 })->Args({ 200, 1 })->Unit(benchmark::kMillisecond);

void BM_FhdiContinuous(benchmark::State& state)
{
    const auto d = normal_data(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        const auto cells = discretize(*d, { 0, 1 }, 4);
        const auto em = categorical_em(cells.shadow, { 0, 1 });
        benchmark::DoNotOptimize(fhdi_continuous(d, cells, em, 3).fdata.size());
    }
}
BENCHMARK(BM_FhdiContinuous)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_KernelFi(benchmark::State& state)
{
    const auto d = normal_data(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(kernel_fi(d, { 0 }, 1, EstimatingFunction::mean(1)).fdata.size());
    }
}
BENCHMARK(BM_KernelFi)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_RegressionCalibration(benchmark::State& state)
{
    const auto d = normal_data(500);
    auto model = make_normal_model(1, { 0 }, 2);
    const auto res = pfi(d, model, 100);
    const Controls S = score_controls(model, res.theta);
    const auto reduced = pps_subsample(res.fdata, static_cast<std::size_t>(state.range(0)), 1).fdata;
    for (auto _ : state) {
        benchmark::DoNotOptimize(regression_reweight(reduced, S).fdata.size());
    }
}
BENCHMARK(BM_RegressionCalibration)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_SimulationReplicate(benchmark::State& state)
{
    StudyConfig cfg;
    cfg.replicates = 1;
    cfg.methods.mi_m = 100;
    cfg.methods.pfi_M = 100;
    for (auto _ : state) {
        benchmark::DoNotOptimize(run_replicates(cfg).replicates.size());
        ++cfg.seed;
    }
}
BENCHMARK(BM_SimulationReplicate)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
