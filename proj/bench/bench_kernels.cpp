#include <benchmark/benchmark.h>

#include <omp.h>

#include "tap/kernels.hpp"

using namespace tap;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = normal(rng);
    return m;
}

// Serial and parallel variants share one body; the second template argument picks the namespace.
template <bool Parallel>
void bm_linear(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix x = random_matrix(n, 64, 1), w = random_matrix(128, 64, 2);
    const std::vector<double> b(128, 0.1);
    for (auto _ : state) {
        auto out = Parallel ? kernels::parallel::linear(x, w, b) : kernels::serial::linear(x, w, b);
        benchmark::DoNotOptimize(out.data().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

template <bool Parallel>
void bm_gram(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix x = random_matrix(n, 10, 3);
    for (auto _ : state) {
        auto k = Parallel ? kernels::parallel::gaussian_gram(x, 1.5) : kernels::serial::gaussian_gram(x, 1.5);
        benchmark::DoNotOptimize(k.data().data());
    }
}

template <bool Parallel>
void bm_hsic(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix k = kernels::serial::gaussian_gram(random_matrix(n, 1, 4), 1.0);
    const Matrix l = kernels::serial::center_gram(kernels::serial::gaussian_gram(random_matrix(n, 10, 5), 2.0));
    for (auto _ : state) {
        const double v = Parallel ? kernels::parallel::hsic_centered(k, l) : kernels::serial::hsic_centered(k, l);
        benchmark::DoNotOptimize(v);
    }
}

template <bool Parallel>
void bm_mixture_density(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix pts = random_matrix(n, 32, 6), means = random_matrix(8, 32, 7);
    const Matrix vars(8, 32, 1.0);
    const std::vector<double> w(8, 0.125);
    for (auto _ : state) {
        auto out = Parallel ? kernels::parallel::diag_mixture_log_density(pts, w, means, vars)
                            : kernels::serial::diag_mixture_log_density(pts, w, means, vars);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

}  // namespace

BENCHMARK(bm_linear<false>)->Name("linear/serial")->Arg(512)->Arg(4096);
BENCHMARK(bm_linear<true>)->Name("linear/parallel")->Arg(512)->Arg(4096)->UseRealTime();
BENCHMARK(bm_gram<false>)->Name("gaussian_gram/serial")->Arg(256)->Arg(1024);
BENCHMARK(bm_gram<true>)->Name("gaussian_gram/parallel")->Arg(256)->Arg(1024)->UseRealTime();
BENCHMARK(bm_hsic<false>)->Name("hsic_centered/serial")->Arg(512)->Arg(1024);
BENCHMARK(bm_hsic<true>)->Name("hsic_centered/parallel")->Arg(512)->Arg(1024)->UseRealTime();
BENCHMARK(bm_mixture_density<false>)->Name("mixture_density/serial")->Arg(4096);
BENCHMARK(bm_mixture_density<true>)->Name("mixture_density/parallel")->Arg(4096)->UseRealTime();

int main(int argc, char** argv) {
    benchmark::Initialize(&argc, argv);
    benchmark::AddCustomContext("omp_max_threads", std::to_string(omp_get_max_threads()));
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
