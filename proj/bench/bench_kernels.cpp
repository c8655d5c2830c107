// Parallel kernels against their serial reference implementations.
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "selfdetr/kernels.hpp"

namespace k = selfdetr::kernels;

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <auto Gemm>
void bm_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Gemm(n, n, n, a, b, c, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Softmax>
void bm_softmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_values(n * n, 3);
    std::vector<double> y(n * n);
    for (auto _ : state) {
        Softmax(n, n, 0.125, x, y);
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Norm>
void bm_layer_norm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_values(n * n, 4);
    std::vector<double> xhat(n * n), inv(n);
    for (auto _ : state) {
        Norm(n, n, 1e-5, x, xhat, inv);
        benchmark::DoNotOptimize(xhat.data());
    }
}

}  // namespace

BENCHMARK(bm_gemm<k::gemm_nn>)->Name("gemm_nn/parallel")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_gemm<k::ref::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_gemm<k::gemm_nt>)->Name("gemm_nt/parallel")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_gemm<k::ref::gemm_nt>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_gemm<k::gemm_tn>)->Name("gemm_tn/parallel")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_gemm<k::ref::gemm_tn>)->Name("gemm_tn/serial")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(bm_softmax<k::softmax_rows>)->Name("softmax/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_softmax<k::ref::softmax_rows>)->Name("softmax/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_layer_norm<k::layer_norm_rows>)->Name("layer_norm/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_layer_norm<k::ref::layer_norm_rows>)->Name("layer_norm/serial")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
