#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "partrag/kernels.hpp"

namespace k = partrag::kernels;

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(gen);
  return v;
}

std::vector<k::Point3> random_points(std::size_t n, unsigned seed) {
  const auto v = random_values(3 * n, seed);
  std::vector<k::Point3> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  return p;
}

template <auto Fn>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Fn(a, b, c, n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <auto Fn>
void BM_nearest(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_points(n, 3), b = random_points(n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

template <auto Fn>
void BM_row_dots(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  constexpr std::size_t d = 32;
  const auto rows = random_values(n * d, 5), q = random_values(d, 6);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(rows, d, q));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * d));
}

}  // namespace

BENCHMARK(BM_matmul<k::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<k::parallel::matmul>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<k::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<k::parallel::matmul_nt>)->Name("matmul_nt/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_nearest<k::serial::nearest_sq_dist>)->Name("nearest_sq_dist/serial")->Arg(2048)->Arg(8192);
BENCHMARK(BM_nearest<k::parallel::nearest_sq_dist>)->Name("nearest_sq_dist/parallel")->Arg(2048)->Arg(8192);
BENCHMARK(BM_row_dots<k::serial::row_dots>)->Name("row_dots/serial")->Arg(4096)->Arg(65536);
BENCHMARK(BM_row_dots<k::parallel::row_dots>)->Name("row_dots/parallel")->Arg(4096)->Arg(65536);

BENCHMARK_MAIN();
