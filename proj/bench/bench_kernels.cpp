#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "evtraffic/kernels.hpp"
#include "evtraffic/lwr.hpp"

using namespace evtraffic;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Arguments: batch, m, k, n.
kernels::GemmDims dims(const benchmark::State& st) {
  return {static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
          static_cast<std::size_t>(st.range(2)), static_cast<std::size_t>(st.range(3))};
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& st) {
  const auto d = dims(st);
  const auto a = random_vec(d.batch * d.m * d.k, 1);
  const auto b = random_vec(d.batch * d.k * d.n, 2);
  std::vector<double> c(d.batch * d.m * d.n);
  const kernels::BatchStrides s{d.m * d.k, d.k * d.n, d.m * d.n};
  for (auto _ : st) {
    if constexpr (Parallel) {
      kernels::parallel::gemm_nn(d, a.data(), b.data(), c.data(), s, false);
    } else {
      kernels::serial::gemm_nn(d, a.data(), b.data(), c.data(), s, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(d.batch * d.m * d.k * d.n));
}

template <bool Parallel>
void BM_gemm_tn(benchmark::State& st) {
  const auto d = dims(st);
  const auto a = random_vec(d.batch * d.m * d.k, 3);
  const auto b = random_vec(d.batch * d.m * d.n, 4);
  std::vector<double> c(d.k * d.n);
  const kernels::BatchStrides s{d.m * d.k, d.m * d.n, 0};
  for (auto _ : st) {
    std::fill(c.begin(), c.end(), 0.0);
    if constexpr (Parallel) {
      kernels::parallel::gemm_tn(d, a.data(), b.data(), c.data(), s);
    } else {
      kernels::serial::gemm_tn(d, a.data(), b.data(), c.data(), s);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(d.batch * d.m * d.k * d.n));
}

template <bool Parallel>
void BM_gemm_nt(benchmark::State& st) {
  const auto d = dims(st);
  const auto a = random_vec(d.batch * d.m * d.n, 5);
  const auto b = random_vec(d.batch * d.k * d.n, 6);
  std::vector<double> c(d.batch * d.m * d.k);
  const kernels::BatchStrides s{d.m * d.n, d.k * d.n, d.m * d.k};
  for (auto _ : st) {
    std::fill(c.begin(), c.end(), 0.0);
    if constexpr (Parallel) {
      kernels::parallel::gemm_nt(d, a.data(), b.data(), c.data(), s);
    } else {
      kernels::serial::gemm_nt(d, a.data(), b.data(), c.data(), s);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(d.batch * d.m * d.k * d.n));
}

template <Exec E>
void BM_godunov(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const RoadGraph g = RoadGraph::ring(n);
  const FundamentalDiagram fd;
  std::vector<double> k = random_vec(n, 7);
  for (auto& x : k) x = 30.0 + 20.0 * x;
  for (auto _ : st) {
    auto r = godunov_step(k, g, fd, 0.1, {}, E);
    benchmark::DoNotOptimize(r.density.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n));
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({16, 12, 63, 16});    // GRU gate transform
  b->Args({16, 12, 12, 21});    // kernel times node features
  b->Args({1, 256, 256, 256});  // large square
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_gemm_tn<false>)->Name("gemm_tn/serial")->Apply(gemm_shapes);
BENCHMARK(BM_gemm_tn<true>)->Name("gemm_tn/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nt<false>)->Name("gemm_nt/serial")->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nt<true>)->Name("gemm_nt/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_godunov<Exec::serial>)->Name("godunov/serial")->Arg(4096);
BENCHMARK(BM_godunov<Exec::parallel>)->Name("godunov/parallel")->Arg(4096);

BENCHMARK_MAIN();
