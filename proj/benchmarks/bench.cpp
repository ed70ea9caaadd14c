#include <benchmark/benchmark.h>

#include "dowser/model.hpp"
#include "dowser/probe.hpp"
#include "dowser/score.hpp"

namespace {

using namespace dowser;

void bm_mlp_forward(benchmark::State& state) {
  model m = build_mlp({64, 128, 32}, "gelu", 1);
  std::vector<double> x(64, 0.1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(m.forward(probe_input::vec(x)));
  }
}
BENCHMARK(bm_mlp_forward);

void bm_mlp_forward_backward(benchmark::State& state) {
  model m = build_mlp({64, 128, 32}, "gelu", 1);
  std::vector<double> x(64, 0.1);
  tensor xi = tensor::zeros({32});
  xi.data[0] = 1.0;
  for (auto _ : state) {
    capture_result cap = m.capture(probe_input::vec(x));
    cap.backward(xi);
    benchmark::DoNotOptimize(cap.g.grad(cap.param_nodes.at("layer0.weight")));
  }
}
BENCHMARK(bm_mlp_forward_backward);

void bm_lm_forward(benchmark::State& state) {
  model m = build_tiny_lm(16, 8, 32, 2, 1);
  std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  for (auto _ : state) {
    benchmark::DoNotOptimize(m.logits(tokens));
  }
}
BENCHMARK(bm_lm_forward);

void bm_hutchinson_r8(benchmark::State& state) {
  model m = build_tiny_lm(16, 8, 32, 2, 1);
  std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  for (auto _ : state) {
    benchmark::DoNotOptimize(hutchinson_norms(m, probe_input::seq(tokens), 8, 7));
  }
}
BENCHMARK(bm_hutchinson_r8);

void bm_score_once(benchmark::State& state) {
  model m = build_tiny_lm(16, 8, 32, 2, 1);
  std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  probe_config cfg;
  cfg.r = 8;
  for (auto _ : state) {
    benchmark::DoNotOptimize(score_once(m, probe_input::seq(tokens), cfg));
  }
}
BENCHMARK(bm_score_once);

void bm_make_mask(benchmark::State& state) {
  model m = build_tiny_lm(16, 8, 32, 2, 1);
  probe_config cfg;
  cfg.r = 2;
  score_map scores = score_once(m, probe_input::seq({3, 1, 4, 1, 5, 9, 2, 6}), cfg);
  for (auto _ : state) {
    benchmark::DoNotOptimize(make_mask(scores, 0.5, 11));
  }
}
BENCHMARK(bm_make_mask);

}  // namespace

BENCHMARK_MAIN();
