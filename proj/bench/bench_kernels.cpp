// Serial reference vs OpenMP kernels on model-sized shapes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "kvd/kernels.hpp"

namespace {

namespace k = kvd::kernels;

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <auto Fn>
void bm_matmul_nn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const k::MatDims d{n, 64, 256};
    const auto a = random_vec(d.m * d.k, 1), b = random_vec(d.k * d.n, 2);
    std::vector<float> c(d.m * d.n);
    for (auto _ : state) {
        Fn(a, b, c, d, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.m * d.k * d.n));
}

template <auto Fn>
void bm_matmul_nt(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const k::MatDims d{n, 64, 512};
    const auto a = random_vec(d.m * d.k, 1), b = random_vec(d.n * d.k, 2);
    std::vector<float> c(d.m * d.n);
    for (auto _ : state) {
        Fn(a, b, c, d, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(d.m * d.k * d.n));
}

template <auto Fn>
void bm_attention(benchmark::State& state) {
    const auto t = static_cast<std::size_t>(state.range(0));
    const k::AttnDims d{t, t, 0, 4, 16};
    const auto q = random_vec(t * 64, 1), kk = random_vec(t * 64, 2), v = random_vec(t * 64, 3);
    std::vector<float> probs(4 * t * t), out(t * 64);
    for (auto _ : state) {
        Fn(q, kk, v, {}, 0.25f, d, probs, out);
        benchmark::DoNotOptimize(out.data());
    }
}

template <auto Fn>
void bm_attention_gated_decode(benchmark::State& state) {
    // One new query over a gated compressed past.
    const auto past = static_cast<std::size_t>(state.range(0));
    const k::AttnDims d{1, past + 1, past, 4, 16};
    const auto q = random_vec(64, 1), kk = random_vec((past + 1) * 64, 2), v = random_vec((past + 1) * 64, 3);
    const auto gate = random_vec(past, 4);
    std::vector<float> probs(4 * (past + 1)), out(64);
    for (auto _ : state) {
        Fn(q, kk, v, gate, 0.25f, d, probs, out);
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(bm_matmul_nn<k::serial::matmul_nn>)->Name("matmul_nn/serial")->Arg(128)->Arg(512);
BENCHMARK(bm_matmul_nn<k::omp::matmul_nn>)->Name("matmul_nn/omp")->Arg(128)->Arg(512);
BENCHMARK(bm_matmul_nt<k::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(128)->Arg(512);
BENCHMARK(bm_matmul_nt<k::omp::matmul_nt>)->Name("matmul_nt/omp")->Arg(128)->Arg(512);
BENCHMARK(bm_attention<k::serial::attention_forward>)->Name("attention/serial")->Arg(128)->Arg(512);
BENCHMARK(bm_attention<k::omp::attention_forward>)->Name("attention/omp")->Arg(128)->Arg(512);
BENCHMARK(bm_attention_gated_decode<k::serial::attention_forward>)->Name("decode_gated/serial")->Arg(256);
BENCHMARK(bm_attention_gated_decode<k::omp::attention_forward>)->Name("decode_gated/omp")->Arg(256);

BENCHMARK_MAIN();
