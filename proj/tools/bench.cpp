// Compares the serial reference kernels against the OpenMP graph kernels and
// measures batch training throughput at different thread counts.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <vector>

#include "modnet/trainer.hpp"
#include "../tests/ref/ref_kernels.hpp"

using namespace modnet;
namespace chrono = std::chrono;

namespace {

double seconds_since(chrono::steady_clock::time_point t0) {
  return chrono::duration<double>(chrono::steady_clock::now() - t0).count();
}

std::vector<Scalar> random_vec(size_t n, Rng& rng) {
  std::vector<Scalar> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

void bench_matmul(int size, int reps, Rng& rng) {
  auto a = random_vec(static_cast<size_t>(size) * size, rng);
  auto b = random_vec(static_cast<size_t>(size) * size, rng);

  auto t0 = chrono::steady_clock::now();
  std::vector<Scalar> r;
  for (int i = 0; i < reps; ++i) r = ref::matmul(a, b, size, size, size);
  const double serial = seconds_since(t0) / reps;

  Graph g;
  NodeId na = g.constant({size, size}, a);
  NodeId nb = g.constant({size, size}, b);
  NodeId nc = g.matmul(na, nb);
  g.forward();
  t0 = chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) {
    Graph g2;
    nc = g2.matmul(g2.constant({size, size}, a), g2.constant({size, size}, b));
    g2.forward();
  }
  const double parallel = seconds_since(t0) / reps;
  const double gflop = 2.0 * size * size * size / 1e9;
  std::printf("matmul %4d: serial %8.2f ms (%5.2f GF/s)  omp %8.2f ms (%5.2f GF/s)  speedup %.2fx\n",
              size, serial * 1e3, gflop / serial, parallel * 1e3, gflop / parallel,
              serial / parallel);
}

void bench_batch(int threads) {
  omp_set_num_threads(threads);
  Rng rng(42);
  const Vocab vocab = Vocab::builtin();
  ModelConfig cfg;
  Model model = Model::fresh(cfg, vocab, 1);
  TrainOptions opts;
  opts.stage = Stage::Clone;
  opts.rl.batch_size = 64;
  Trainer trainer(model, opts);

  std::vector<QAItem> items;
  for (int i = 0; i < 64; ++i) {
    for (uint64_t attempt = 0;; ++attempt) {
      Rng item_rng(mix_seed(99, i, attempt));
      Scene scene = gen_scene(item_rng);
      auto item = gen_question(scene, 1 + static_cast<int>(item_rng.below(4)), item_rng);
      if (!item) continue;
      item->image = render_scene(item->scene);
      items.push_back(*item);
      break;
    }
  }
  std::vector<const QAItem*> batch;
  for (const auto& it : items) batch.push_back(&it);

  trainer.cloning_step(batch, 0);  // warm up allocators
  auto t0 = chrono::steady_clock::now();
  const int reps = 5;
  for (int r = 0; r < reps; ++r) trainer.cloning_step(batch, r + 1);
  const double per_batch = seconds_since(t0) / reps;
  std::printf("cloning batch(64) with %2d thread(s): %7.1f ms  (%.0f items/s)\n", threads,
              per_batch * 1e3, 64.0 / per_batch);
}

}  // namespace

int main() {
  Rng rng(7);
  std::printf("== kernel comparison (serial reference vs OpenMP graph) ==\n");
  bench_matmul(64, 20, rng);
  bench_matmul(256, 5, rng);
  bench_matmul(512, 2, rng);

  std::printf("\n== batch training throughput ==\n");
  const int max_threads = omp_get_max_threads();
  bench_batch(1);
  if (max_threads > 1) bench_batch(max_threads);
  return 0;
}
