#include <benchmark/benchmark.h>

#include "jotr/ops.hpp"
#include "jotr/rng.hpp"

using namespace jotr;

namespace {

template <typename T>
Tensor<T> rand_tensor(Dims dims, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<T> v(numel(dims));
    for (auto& x : v) x = T(rng.uniform(-1.0, 1.0));
    return Tensor<T>::from(std::move(dims), std::move(v));
}

} // namespace

static void BM_matmul_f32(benchmark::State& state) {
    const std::size_t n = std::size_t(state.range(0));
    auto a = rand_tensor<float>({n, n}, 1);
    auto b = rand_tensor<float>({n, n}, 2);
    for (auto _ : state) {
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * int64_t(2 * n * n * n));
}
BENCHMARK(BM_matmul_f32)->Arg(64)->Arg(128)->Arg(256);

static void BM_softmax_rows_f32(benchmark::State& state) {
    auto x = rand_tensor<float>({512, 512}, 3);
    for (auto _ : state) {
        auto y = softmax(x, 1);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_softmax_rows_f32);

BENCHMARK_MAIN();
