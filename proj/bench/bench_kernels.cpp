// Serial reference kernels against the production (blocked, OpenMP) ones.
// Shapes follow the default model: d_model 128, d_ff 512, 4 heads, batch 32
// sequences of 32 tokens.
#include <vector>

#include <benchmark/benchmark.h>

#include "reclab/kernels.hpp"
#include "reclab/rng.hpp"

using namespace reclab;

namespace {

std::vector<Real> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(n);
  for (auto& x : v) x = Real(rng.normal());
  return v;
}

constexpr std::size_t kRows = 32 * 32;
constexpr std::size_t kModel = 128;
constexpr std::size_t kFf = 512;
constexpr std::size_t kHeads = 4;
constexpr std::size_t kSeq = 32;

template <bool Serial>
void matmul(benchmark::State& state) {
  const std::size_t m = kRows, k = kModel, n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(m * k, 1), b = filled(k * n, 2);
  std::vector<Real> c(m * n);
  kernels::set_num_threads(static_cast<int>(state.range(1)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::matmul(a, b, c, m, k, n);
    else kernels::matmul(a, b, c, m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <bool Serial>
void matmul_tn(benchmark::State& state) {
  // Weight gradient shape: [k, m]^T [k, n] with k the token count.
  const std::size_t k = kRows, m = kModel, n = kFf;
  const auto a = filled(k * m, 3), b = filled(k * n, 4);
  std::vector<Real> c(m * n);
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::matmul_tn(a, b, c, m, k, n);
    else kernels::matmul_tn(a, b, c, m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <bool Serial>
void attention(benchmark::State& state) {
  const std::size_t n_seq = kRows / kSeq;
  const auto q = filled(kRows * kModel, 5), k = filled(kRows * kModel, 6), v = filled(kRows * kModel, 7);
  std::vector<Real> out(kRows * kModel), probs(n_seq * kHeads * kSeq * kSeq);
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::attention(q, k, v, out, probs, n_seq, kSeq, kHeads, kModel);
    else kernels::attention(q, k, v, out, probs, n_seq, kSeq, kHeads, kModel);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Serial>
void attention_backward(benchmark::State& state) {
  const std::size_t n_seq = kRows / kSeq;
  const auto q = filled(kRows * kModel, 5), k = filled(kRows * kModel, 6), v = filled(kRows * kModel, 7);
  const auto dout = filled(kRows * kModel, 8);
  std::vector<Real> out(kRows * kModel), probs(n_seq * kHeads * kSeq * kSeq);
  kernels::serial::attention(q, k, v, out, probs, n_seq, kSeq, kHeads, kModel);
  std::vector<Real> dq(q.size()), dk(k.size()), dv(v.size());
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::attention_backward(q, k, v, probs, dout, dq, dk, dv, n_seq, kSeq, kHeads, kModel);
    else kernels::attention_backward(q, k, v, probs, dout, dq, dk, dv, n_seq, kSeq, kHeads, kModel);
    benchmark::DoNotOptimize(dq.data());
  }
}

template <bool Serial>
void layer_norm(benchmark::State& state) {
  const auto x = filled(kRows * kModel, 9), gain = filled(kModel, 10), bias = filled(kModel, 11);
  std::vector<Real> y(x.size()), mean(kRows), rstd(kRows);
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::layer_norm(x, gain, bias, y, mean, rstd, kRows, kModel, Real(1e-5));
    else kernels::layer_norm(x, gain, bias, y, mean, rstd, kRows, kModel, Real(1e-5));
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Serial>
void softmax(benchmark::State& state) {
  const std::size_t outer = kRows, n = 512;
  const auto x = filled(outer * n, 12);
  std::vector<Real> y(x.size());
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::softmax(x, y, outer, n, 1);
    else kernels::softmax(x, y, outer, n, 1);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Serial>
void gelu(benchmark::State& state) {
  const auto x = filled(kRows * kFf, 13);
  std::vector<Real> y(x.size());
  kernels::set_num_threads(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    if constexpr (Serial) kernels::serial::gelu(x, y);
    else kernels::gelu(x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

void thread_counts(benchmark::internal::Benchmark* b) {
  for (int t = 1; t <= std::max(1, kernels::num_threads()); t *= 2) b->Arg(t);
}

void matmul_args(benchmark::internal::Benchmark* b) {
  for (std::int64_t n : {128, 512}) {
    for (int t = 1; t <= std::max(1, kernels::num_threads()); t *= 2) b->Args({n, t});
  }
}

}  // namespace

BENCHMARK(matmul<true>)->Name("serial/matmul")->Args({128, 1})->Args({512, 1})->Unit(benchmark::kMicrosecond);
BENCHMARK(matmul<false>)->Name("parallel/matmul")->Apply(matmul_args)->Unit(benchmark::kMicrosecond);
BENCHMARK(matmul_tn<true>)->Name("serial/matmul_tn")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(matmul_tn<false>)->Name("parallel/matmul_tn")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(attention<true>)->Name("serial/attention")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(attention<false>)->Name("parallel/attention")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(attention_backward<true>)->Name("serial/attention_backward")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(attention_backward<false>)->Name("parallel/attention_backward")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(layer_norm<true>)->Name("serial/layer_norm")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(layer_norm<false>)->Name("parallel/layer_norm")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(softmax<true>)->Name("serial/softmax")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(softmax<false>)->Name("parallel/softmax")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);
BENCHMARK(gelu<true>)->Name("serial/gelu")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(gelu<false>)->Name("parallel/gelu")->Apply(thread_counts)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
