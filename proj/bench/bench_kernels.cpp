// Throughput comparison: serial reference kernels vs the OpenMP kernels the
// training path uses, plus one end-to-end training-step timing.
#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mtasr/kernels.hpp"
#include "mtasr/model.hpp"
#include "mtasr/pipeline.hpp"

using namespace mtasr;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<double> random_vec(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

void bench_gemm(int m, int k, int n, int reps, std::mt19937_64& rng) {
  auto a = random_vec(static_cast<size_t>(m) * k, rng);
  auto b = random_vec(static_cast<size_t>(k) * n, rng);
  std::vector<double> c(static_cast<size_t>(m) * n);
  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    serial::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  const double ts = ms_since(t0);
  t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  const double tp = ms_since(t0);
  const double gflop = 2.0 * m * k * n * reps / 1e6;
  std::printf("gemm %4dx%4dx%4d  serial %8.2f ms (%6.2f GF/s)  omp %8.2f ms "
              "(%6.2f GF/s)  speedup %.2fx\n",
              m, k, n, ts, gflop / ts, tp, gflop / tp, ts / tp);
}

void bench_rows(int rows, int cols, int reps, std::mt19937_64& rng) {
  auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
  std::vector<double> y(x.size()), mu(static_cast<size_t>(rows)),
      rstd(static_cast<size_t>(rows));
  auto gain = random_vec(static_cast<size_t>(cols), rng);
  auto offset = random_vec(static_cast<size_t>(cols), rng);

  auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    serial::softmax_rows(x.data(), nullptr, y.data(), rows, cols);
  const double ss = ms_since(t0);
  t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    kernels::softmax_rows(x.data(), nullptr, y.data(), rows, cols);
  const double sp = ms_since(t0);
  std::printf("softmax %5dx%-4d     serial %8.2f ms             omp %8.2f ms"
              "             speedup %.2fx\n",
              rows, cols, ss, sp, ss / sp);

  t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    serial::layernorm_rows(x.data(), gain.data(), offset.data(), 1e-5,
                           y.data(), mu.data(), rstd.data(), rows, cols);
  const double ls = ms_since(t0);
  t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    kernels::layernorm_rows(x.data(), gain.data(), offset.data(), 1e-5,
                            y.data(), mu.data(), rstd.data(), rows, cols);
  const double lp = ms_since(t0);
  std::printf("layernorm %5dx%-4d   serial %8.2f ms             omp %8.2f ms"
              "             speedup %.2fx\n",
              rows, cols, ls, lp, ls / lp);
}

void bench_training_step() {
  GenSpec spec;
  spec.num_talkers = 3;
  spec.noise_std = 0.5;
  spec.seed = 9;
  Dataset ds = generate_dataset(spec, 64);

  ModelConfig mc;
  mc.num_talkers = 3;
  auto model = build_model(mc, 1);

  StagePlan plan;
  plan.stage = Stage::sot_baseline;
  plan.epochs = 1;
  StageTrainer trainer(*model, plan, ds, nullptr);
  trainer.prepare();
  auto t0 = Clock::now();
  trainer.run_epoch(1);
  const double t = ms_since(t0);
  std::printf("sot_baseline epoch, %zu samples: %8.2f ms (%.2f ms/sample)\n",
              ds.samples.size(), t, t / ds.samples.size());

  StagePlan sp2;
  sp2.stage = Stage::serctc;
  sp2.epochs = 1;
  auto model2 = build_model(mc, 1);
  StageTrainer trainer2(*model2, sp2, ds, nullptr);
  trainer2.prepare();
  t0 = Clock::now();
  trainer2.run_epoch(1);
  const double t2 = ms_since(t0);
  std::printf("serctc epoch, %zu samples:       %8.2f ms (%.2f ms/sample)\n",
              ds.samples.size(), t2, t2 / ds.samples.size());
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("OpenMP not enabled; both columns run serially\n");
#endif
  std::mt19937_64 rng(7);
  bench_gemm(64, 64, 64, 2000, rng);
  bench_gemm(256, 256, 256, 40, rng);
  bench_gemm(512, 512, 512, 8, rng);
  bench_rows(4096, 64, 200, rng);
  bench_rows(4096, 512, 40, rng);
  bench_training_step();
  return 0;
}
