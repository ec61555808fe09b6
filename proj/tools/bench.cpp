// Benchmarks the OpenMP batch kernels against the serial reference and checks
// that both produce bit-identical results.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "preflab/datagen.hpp"
#include "preflab/evaluate.hpp"
#include "preflab/objectives.hpp"
#include "preflab/parallel.hpp"
#include "preflab/policy.hpp"
#include "preflab/world.hpp"

using namespace preflab;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

template <typename F>
double time_ms(int reps, F&& fn) {
  fn();  // warmup
  const double t0 = now_ms();
  for (int i = 0; i < reps; ++i) fn();
  return (now_ms() - t0) / reps;
}

bool grad_equal(const ParamGrad& a, const ParamGrad& b) {
  const auto eq = [](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] != y[i]) return false;
    }
    return true;
  };
  return eq(a.token_table, b.token_table) && eq(a.image_proj, b.image_proj) &&
         eq(a.hidden_weights, b.hidden_weights) && eq(a.hidden_bias, b.hidden_bias) &&
         eq(a.context_weights, b.context_weights) && eq(a.bias, b.bias);
}

}  // namespace

int main() {
  WorldConfig wc;
  const WorldSpec world = generate_world(wc, 7);
  PolicyConfig pc;
  const PolicyParams params = init_params(world, pc, 11);
  const PolicyParams ref = init_params(world, pc, 13);
  const Token end = world.vocab.end_token;

  const std::size_t n = 2048;
  Rng rng(99);
  const auto positives = sample_annotated_examples(world, n, rng);
  NegativeConfig neg;
  neg.schedule = make_noise_schedule(12, 0.05, 0.7);
  neg.noise_step = 6;
  neg.rules = InjectionRuleSet::for_world(world);
  neg.seed = 123;
  const auto built = build_preference_dataset(positives, neg, params, world);

  std::printf("threads: %d, batch: %zu tuples\n\n", max_threads(), built.tuples.size());
  std::printf("%-18s %12s %12s %9s %10s\n", "kernel", "serial ms", "parallel ms", "speedup", "bit-equal");

  const auto bench_pair = [&](const char* name, auto&& serial_fn, auto&& parallel_fn, bool equal) {
    const double ts = time_ms(3, serial_fn);
    const double tp = time_ms(3, parallel_fn);
    std::printf("%-18s %12.2f %12.2f %8.2fx %10s\n", name, ts, tp, ts / tp, equal ? "yes" : "NO");
  };

  {
    const BatchLoss a = dpo_loss(params, ref, built.tuples, 0.1, end, Exec::serial);
    const BatchLoss b = dpo_loss(params, ref, built.tuples, 0.1, end, Exec::parallel);
    bench_pair("dpo_loss",
               [&] { dpo_loss(params, ref, built.tuples, 0.1, end, Exec::serial); },
               [&] { dpo_loss(params, ref, built.tuples, 0.1, end, Exec::parallel); },
               a.sum == b.sum && a.mean == b.mean);
  }
  {
    const ParamGrad a = dpo_grad(params, ref, built.tuples, 0.1, end, Exec::serial);
    const ParamGrad b = dpo_grad(params, ref, built.tuples, 0.1, end, Exec::parallel);
    bench_pair("dpo_grad",
               [&] { dpo_grad(params, ref, built.tuples, 0.1, end, Exec::serial); },
               [&] { dpo_grad(params, ref, built.tuples, 0.1, end, Exec::parallel); },
               grad_equal(a, b));
  }
  {
    const BatchLoss a = sft_loss(params, positives, end, Exec::serial);
    const BatchLoss b = sft_loss(params, positives, end, Exec::parallel);
    bench_pair("sft_loss",
               [&] { sft_loss(params, positives, end, Exec::serial); },
               [&] { sft_loss(params, positives, end, Exec::parallel); },
               a.sum == b.sum && a.mean == b.mean);
  }
  {
    const ParamGrad a = sft_grad(params, positives, end, Exec::serial);
    const ParamGrad b = sft_grad(params, positives, end, Exec::parallel);
    bench_pair("sft_grad",
               [&] { sft_grad(params, positives, end, Exec::serial); },
               [&] { sft_grad(params, positives, end, Exec::parallel); },
               grad_equal(a, b));
  }
  {
    Rng ra(5), rb(5);
    const auto a = greedy_eval_pairs(params, world, 512, 8, ra, Exec::serial);
    const auto b = greedy_eval_pairs(params, world, 512, 8, rb, Exec::parallel);
    bool equal = a.size() == b.size();
    for (std::size_t i = 0; equal && i < a.size(); ++i) equal = a[i].second == b[i].second;
    bench_pair("greedy_eval",
               [&] { Rng r(7); greedy_eval_pairs(params, world, 512, 8, r, Exec::serial); },
               [&] { Rng r(7); greedy_eval_pairs(params, world, 512, 8, r, Exec::parallel); }, equal);
  }
  return 0;
}
