// Compares the OpenMP kernels against the serial reference loops on the layer
// shapes that dominate zoo training and detector training.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "trojanscope/kernels.hpp"

namespace ks = trojanscope::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, unsigned seed)
{
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v)
        x = d(rng);
    return v;
}

// batch 64, 14x14x16 -> 14x14x32, 3x3 pad 1: the second conv of the zoo nets
ks::ConvGeometry zoo_conv() { return {64, 14, 14, 16, 32, 3, 1, 1}; }

template <bool Reference>
void BM_ConvForward(benchmark::State& state)
{
    const auto g = zoo_conv();
    auto in = random_vector(std::size_t(g.batch) * g.in_h * g.in_w * g.in_c, 1);
    auto w = random_vector(std::size_t(g.out_c) * g.patch(), 2);
    auto b = random_vector(g.out_c, 3);
    std::vector<float> out(std::size_t(g.batch) * g.out_h() * g.out_w() * g.out_c);
    for (auto _ : state) {
        if constexpr (Reference)
            ks::reference::conv2d_forward<float>(g, in, w, b, out);
        else
            ks::conv2d_forward<float>(g, in, w, b, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * g.batch * g.out_h() * g.out_w() * g.out_c * g.patch(),
                                                  benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::OneK::kIs1000) ;
}

template <bool Reference>
void BM_ConvBackwardParams(benchmark::State& state)
{
    const auto g = zoo_conv();
    auto in = random_vector(std::size_t(g.batch) * g.in_h * g.in_w * g.in_c, 1);
    auto go = random_vector(std::size_t(g.batch) * g.out_h() * g.out_w() * g.out_c, 2);
    std::vector<float> gw(std::size_t(g.out_c) * g.patch());
    std::vector<float> gb(g.out_c);
    for (auto _ : state) {
        if constexpr (Reference)
            ks::reference::conv2d_backward_params<float>(g, in, go, gw, gb);
        else
            ks::conv2d_backward_params<float>(g, in, go, gw, gb);
        benchmark::DoNotOptimize(gw.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * g.batch * g.out_h() * g.out_w() * g.out_c * g.patch(),
                                                  benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::OneK::kIs1000);
}

template <bool Reference>
void BM_ConvBackwardInput(benchmark::State& state)
{
    const auto g = zoo_conv();
    auto go = random_vector(std::size_t(g.batch) * g.out_h() * g.out_w() * g.out_c, 2);
    auto w = random_vector(std::size_t(g.out_c) * g.patch(), 2);
    std::vector<float> gi(std::size_t(g.batch) * g.in_h * g.in_w * g.in_c);
    for (auto _ : state) {
        if constexpr (Reference)
            ks::reference::conv2d_backward_input<float>(g, go, w, gi);
        else
            ks::conv2d_backward_input<float>(g, go, w, gi);
        benchmark::DoNotOptimize(gi.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * g.batch * g.out_h() * g.out_w() * g.out_c * g.patch(),
                                                  benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::OneK::kIs1000);
}

// batch 16, 2500 -> 3126: first layer of the detector window MLP
template <bool Reference>
void BM_DenseForward(benchmark::State& state)
{
    const int n = 16, in = 2500, out = 3126;
    auto x = random_vector(std::size_t(n) * in, 1);
    auto w = random_vector(std::size_t(out) * in, 2);
    auto b = random_vector(out, 3);
    std::vector<float> y(std::size_t(n) * out);
    for (auto _ : state) {
        if constexpr (Reference)
            ks::reference::dense_forward<float>(n, in, out, x, w, b, y);
        else
            ks::dense_forward<float>(n, in, out, x, w, b, y);
        benchmark::DoNotOptimize(y.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * in * out, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::OneK::kIs1000);
}

template <bool Reference>
void BM_DenseBackward(benchmark::State& state)
{
    const int n = 16, in = 2500, out = 3126;
    auto x = random_vector(std::size_t(n) * in, 1);
    auto w = random_vector(std::size_t(out) * in, 2);
    auto go = random_vector(std::size_t(n) * out, 3);
    std::vector<float> gi(std::size_t(n) * in), gw(std::size_t(out) * in), gb(out);
    for (auto _ : state) {
        if constexpr (Reference) {
            ks::reference::dense_backward_input<float>(n, in, out, go, w, gi);
            ks::reference::dense_backward_params<float>(n, in, out, x, go, gw, gb);
        } else {
            ks::dense_backward_input<float>(n, in, out, go, w, gi);
            ks::dense_backward_params<float>(n, in, out, x, go, gw, gb);
        }
        benchmark::DoNotOptimize(gw.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(4.0 * n * in * out, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::OneK::kIs1000);
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardInput<true>)->Name("conv_backward_input/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardInput<false>)->Name("conv_backward_input/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardParams<true>)->Name("conv_backward_params/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardParams<false>)->Name("conv_backward_params/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseForward<true>)->Name("dense_forward/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseForward<false>)->Name("dense_forward/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseBackward<true>)->Name("dense_backward/reference")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseBackward<false>)->Name("dense_backward/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
