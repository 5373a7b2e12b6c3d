#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mtasr/lora.hpp"

using namespace mtasr;
using namespace mtasr::testing;

namespace {

std::vector<double> forward_vals(Linear& lin, const Mat& x, bool train = false,
                                 std::mt19937_64* rng = nullptr) {
  Graph g;
  Ctx ctx(g);
  ctx.train = train;
  ctx.rng = rng;
  return lin.forward(ctx, ctx.rows_of(x)).value();
}

}  // namespace

TEST_SUITE("lora") {

TEST_CASE("attach keeps the forward exactly equal to the base (B = 0)") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 16, 16, false, 3);
  std::mt19937_64 rng(1);
  Mat x = random_mat(4, 16, rng);
  auto base = forward_vals(lin, x);
  attach_lora(ps, slots, lin, {16, 32.0, 0.1}, 5);
  auto with = forward_vals(lin, x);
  CHECK(base == with);
  CHECK(lin.w->trainable == false);
}

TEST_CASE("rank must not exceed min(d_in, d_out)") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 64, 64, false, 3);
  CHECK_NOTHROW(attach_lora(ps, slots, lin, {16, 32.0, 0.1}, 5));
  Linear lin2 = make_linear(ps, "lin2", 64, 64, false, 3);
  CHECK_THROWS_AS(attach_lora(ps, slots, lin2, {65, 1.0, 0.0}, 5),
                  std::runtime_error);
}

TEST_CASE("worked merge example") {
  // W = I2, r=1, alpha=1, B=[[1],[0]], A=[[0,1]] -> W' = [[1,1],[0,1]].
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 2, 2, false, 1);
  lin.w->value = {1, 0, 0, 1};
  LoraSlot* slot = attach_lora(ps, slots, lin, {1, 1.0, 0.0}, 1);
  slot->a->value = {0, 1};
  slot->b->value = {1, 0};
  merge_lora(ps, slots, lin);
  CHECK(lin.w->value == std::vector<double>{1, 1, 0, 1});
  Mat x(1, 2);
  x.data = {1, 1};
  CHECK(forward_vals(lin, x) == std::vector<double>{2, 1});
}

TEST_CASE("merging a zero B is a no-op on the weights") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 6, 5, false, 2);
  const auto w0 = lin.w->value;
  attach_lora(ps, slots, lin, {2, 8.0, 0.0}, 3);
  merge_lora(ps, slots, lin);
  CHECK(lin.w->value == w0);
}

TEST_CASE("double merge is an error and buffers are removed") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 4, 4, false, 2);
  attach_lora(ps, slots, lin, {2, 4.0, 0.0}, 3);
  CHECK(ps.find("lin.lora_a") != nullptr);
  merge_lora(ps, slots, lin);
  CHECK(ps.find("lin.lora_a") == nullptr);
  CHECK(ps.find("lin.lora_b") == nullptr);
  CHECK(lin.lora == nullptr);
  CHECK_THROWS_AS(merge_lora(ps, slots, lin), std::runtime_error);
}

TEST_CASE("merged forward equals the adapter-path forward") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore ps;
    std::map<std::string, LoraSlot> slots;
    Linear lin = make_linear(ps, "lin", 10, 7, trial % 2 == 0, 50 + trial);
    LoraSlot* slot = attach_lora(ps, slots, lin, {3, 6.0, 0.1}, 60 + trial);
    // Give the slot nonzero content.
    std::normal_distribution<double> d(0.0, 0.3);
    for (double& v : slot->a->value) v = d(rng);
    for (double& v : slot->b->value) v = d(rng);

    std::vector<Mat> inputs;
    for (int i = 0; i < 100; ++i) inputs.push_back(random_mat(1, 7, rng));
    std::vector<std::vector<double>> before;
    for (const auto& x : inputs) before.push_back(forward_vals(lin, x));

    merge_lora(ps, slots, lin);
    for (size_t i = 0; i < inputs.size(); ++i) {
      auto after = forward_vals(lin, inputs[i]);
      for (size_t j = 0; j < after.size(); ++j) {
        CHECK(std::fabs(after[j] - before[i][j]) <= 1e-10);
      }
    }
  }
}

TEST_CASE("dropout only applies on the adapter path during training") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 8, 8, false, 5);
  LoraSlot* slot = attach_lora(ps, slots, lin, {2, 4.0, 0.5}, 6);
  std::normal_distribution<double> d(0.0, 0.5);
  std::mt19937_64 rng(7);
  for (double& v : slot->a->value) v = d(rng);
  for (double& v : slot->b->value) v = d(rng);
  Mat x = random_mat(2, 8, rng);
  // Eval forward is deterministic regardless of dropout config.
  CHECK(forward_vals(lin, x) == forward_vals(lin, x));
  // Train forwards with different streams differ.
  std::mt19937_64 r1(1), r2(2);
  CHECK(forward_vals(lin, x, true, &r1) != forward_vals(lin, x, true, &r2));
}

TEST_CASE("stage targets enumerate the adapted projections") {
  auto s0 = stage_targets(LoraStage::stage0_self_attention, 4, false, false);
  CHECK(s0.size() == 16);
  CHECK(std::count(s0.begin(), s0.end(), "dec.l0.sa.q") == 1);
  CHECK(std::count(s0.begin(), s0.end(), "dec.l3.sa.o") == 1);

  auto s2 = stage_targets(LoraStage::stage2_refine, 4, true, false);
  CHECK(s2.size() == 32);
  CHECK(std::count(s2.begin(), s2.end(), "dec.l2.ad.v") == 1);

  auto ca = stage_targets(LoraStage::stage2_refine, 4, true, true);
  CHECK(ca.size() == 16);
  for (const auto& name : ca) {
    CHECK(name.find(".ad.") != std::string::npos);
  }

  CHECK_THROWS_AS(stage_targets(LoraStage::stage2_refine, 4, false, false),
                  std::runtime_error);
}

TEST_CASE("gradient flows through the low-rank path") {
  ParamStore ps;
  std::map<std::string, LoraSlot> slots;
  Linear lin = make_linear(ps, "lin", 5, 4, true, 8);
  LoraSlot* slot = attach_lora(ps, slots, lin, {2, 2.0, 0.0}, 9);
  std::mt19937_64 rng(10);
  std::normal_distribution<double> d(0.0, 0.4);
  for (double& v : slot->a->value) v = d(rng);
  for (double& v : slot->b->value) v = d(rng);
  // Only A and B are trainable after attach.
  auto res = check_gradients(
      [&](Graph& g, const std::vector<Tensor>& in) {
        // Rebuild the lora forward from leaves to keep the check pure.
        Tensor y = matmul_nt(in[0], in[1]);
        Tensor low = matmul_nt(in[0], in[2]);
        Tensor up = matmul_nt(low, in[3]);
        return sum_all(mul(add(y, scale(up, 2.0 / 2)), in[4]));
      },
      {random_mat(3, 4, rng), random_mat(5, 4, rng), random_mat(2, 4, rng),
       random_mat(5, 2, rng), random_mat(3, 5, rng)});
  CHECK(res.max_rel_err <= 1e-4);
}

}  // TEST_SUITE
