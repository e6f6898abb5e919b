#include <benchmark/benchmark.h>

#include "certkit/ibp.hpp"
#include "certkit/net.hpp"
#include "certkit/objective.hpp"
#include "certkit/rng.hpp"
#include "certkit/tensor.hpp"

namespace {

using namespace certkit;

void bm_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  SeededRng rng(1);
  Tensor<double> a = rng.gaussian<double>({n, n}, 0.0, 1.0);
  Tensor<double> b = rng.gaussian<double>({n, n}, 0.0, 1.0);
  for (auto _ : state) {
    Tensor<double> c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

void bm_conv2d(benchmark::State& state) {
  const int64_t c = state.range(0);
  SeededRng rng(1);
  Tensor<double> x = rng.gaussian<double>({8, c, 14, 14}, 0.0, 1.0);
  Tensor<double> k = rng.gaussian<double>({c, c, 3, 3}, 0.0, 0.1);
  Tensor<double> b(Shape{c}, 0.0);
  for (auto _ : state) {
    Tensor<double> y = conv2d(x, k, b, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_conv2d)->Arg(8)->Arg(16)->Arg(32);

ArchDescription bench_arch() {
  ArchDescription a;
  a.input = {1, 14, 14};
  a.classes = 10;
  a.full_bn = true;
  a.layers = {
      LayerEntry{.kind = LayerKind::Conv2d, .c_out = 8, .k = 3, .stride = 2, .padding = 1},
      LayerEntry{.kind = LayerKind::Relu},
      LayerEntry{.kind = LayerKind::Conv2d, .c_out = 16, .k = 3, .stride = 2, .padding = 1},
      LayerEntry{.kind = LayerKind::Relu},
      LayerEntry{.kind = LayerKind::Flatten},
      LayerEntry{.kind = LayerKind::Dense, .out = 64},
      LayerEntry{.kind = LayerKind::Relu},
      LayerEntry{.kind = LayerKind::Dense, .out = 10},
  };
  return a;
}

void bm_propagate(benchmark::State& state) {
  Network<double> net = build<double>(bench_arch());
  SeededRng rng(1);
  initialize(net, InitScheme::Ibp, rng);
  Tensor<double> x = rng.uniform<double>({16, 1, 14, 14}, 0.0, 1.0);
  InputSpec<double> spec;
  PropagateOptions opts;
  for (auto _ : state) {
    BoundTrace<double> trace = propagate(net, x, 0.1, spec, opts);
    benchmark::DoNotOptimize(trace.hidden.size());
  }
}
BENCHMARK(bm_propagate);

void bm_objective_backward(benchmark::State& state) {
  Network<double> net = build<double>(bench_arch());
  SeededRng rng(1);
  initialize(net, InitScheme::Ibp, rng);
  Tensor<double> x = rng.uniform<double>({16, 1, 14, 14}, 0.0, 1.0);
  std::vector<int64_t> y(16);
  for (auto& v : y) v = rng.next_index(10);
  InputSpec<double> spec;
  ObjectiveConfig ocfg;
  ocfg.lambda0 = 0.5;
  ocfg.eps_target = 0.1;
  for (auto _ : state) {
    PropagateOptions opts;
    opts.train_params = true;
    Tape<double> tape;
    ObjectiveResult<double> res = total_objective(net, x, y, 0.05, spec, ocfg, opts);
    tape.backward(res.loss);
    benchmark::DoNotOptimize(res.components.loss);
  }
}
BENCHMARK(bm_objective_backward);

}  // namespace

BENCHMARK_MAIN();
