#include <random>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "mtasr/kernels.hpp"

using namespace mtasr;

namespace {

std::vector<double> randv(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("parallel gemms match the serial reference bit for bit") {
  std::mt19937_64 rng(11);
  const std::vector<std::tuple<int, int, int>> shapes{
      {3, 4, 5}, {17, 33, 9}, {64, 64, 64}, {1, 7, 1}, {128, 40, 96}};
  for (auto [m, k, n] : shapes) {
    auto a = randv(static_cast<size_t>(m) * k, rng);
    auto b = randv(static_cast<size_t>(k) * n, rng);
    std::vector<double> c1(static_cast<size_t>(m) * n), c2 = c1;
    kernels::gemm_nn(a.data(), b.data(), c1.data(), m, k, n, false);
    serial::gemm_nn(a.data(), b.data(), c2.data(), m, k, n, false);
    CHECK(c1 == c2);

    auto bt = randv(static_cast<size_t>(n) * k, rng);
    std::vector<double> d1(static_cast<size_t>(m) * n), d2 = d1;
    kernels::gemm_nt(a.data(), bt.data(), d1.data(), m, k, n, false);
    serial::gemm_nt(a.data(), bt.data(), d2.data(), m, k, n, false);
    CHECK(d1 == d2);

    auto e = randv(static_cast<size_t>(m) * n, rng);
    std::vector<double> f1(static_cast<size_t>(k) * n), f2 = f1;
    kernels::gemm_tn(a.data(), e.data(), f1.data(), m, k, n, false);
    serial::gemm_tn(a.data(), e.data(), f2.data(), m, k, n, false);
    CHECK(f1 == f2);
  }
}

TEST_CASE("gemm accumulate adds onto existing output") {
  std::mt19937_64 rng(5);
  auto a = randv(6, rng), b = randv(6, rng);
  std::vector<double> c(4, 1.5);
  kernels::gemm_nn(a.data(), b.data(), c.data(), 2, 3, 2, true);
  std::vector<double> fresh(4, 0.0);
  kernels::gemm_nn(a.data(), b.data(), fresh.data(), 2, 3, 2, false);
  for (int i = 0; i < 4; ++i) CHECK(c[i] == doctest::Approx(1.5 + fresh[i]));
}

TEST_CASE("softmax rows agree with serial and respect masks") {
  std::mt19937_64 rng(7);
  const int rows = 33, cols = 12;
  auto x = randv(static_cast<size_t>(rows) * cols, rng);
  std::vector<double> bias(static_cast<size_t>(rows) * cols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j + 1 < cols; ++j)
      if ((r + j) % 3 == 0) bias[r * cols + j] = kNegInf;
  std::vector<double> y1(x.size()), y2(x.size());
  CHECK(kernels::softmax_rows(x.data(), bias.data(), y1.data(), rows, cols) ==
        -1);
  CHECK(serial::softmax_rows(x.data(), bias.data(), y2.data(), rows, cols) ==
        -1);
  CHECK(y1 == y2);
  for (int r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      sum += y1[r * cols + j];
      if (bias[r * cols + j] <= kMaskThreshold) CHECK(y1[r * cols + j] == 0.0);
      CHECK(y1[r * cols + j] >= 0.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("softmax reports the first fully masked row") {
  const int rows = 3, cols = 4;
  std::vector<double> x(rows * cols, 0.0), y(rows * cols);
  std::vector<double> bias(rows * cols, 0.0);
  for (int j = 0; j < cols; ++j) bias[1 * cols + j] = kNegInf;
  CHECK(kernels::softmax_rows(x.data(), bias.data(), y.data(), rows, cols) ==
        1);
}

TEST_CASE("layernorm parallel matches serial") {
  std::mt19937_64 rng(13);
  const int rows = 50, cols = 24;
  auto x = randv(static_cast<size_t>(rows) * cols, rng);
  auto gain = randv(cols, rng);
  auto offset = randv(cols, rng);
  std::vector<double> y1(x.size()), y2(x.size()), mu1(rows), mu2(rows),
      rs1(rows), rs2(rows);
  kernels::layernorm_rows(x.data(), gain.data(), offset.data(), 1e-5, y1.data(),
                          mu1.data(), rs1.data(), rows, cols);
  serial::layernorm_rows(x.data(), gain.data(), offset.data(), 1e-5, y2.data(),
                         mu2.data(), rs2.data(), rows, cols);
  CHECK(y1 == y2);
  CHECK(mu1 == mu2);
  CHECK(rs1 == rs2);
}

}  // TEST_SUITE
