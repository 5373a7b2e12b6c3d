#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtasr/tensor.hpp"

namespace mtasr {

// Named parameter buffers with stable iteration order (checkpoint layout).
class ParamStore {
 public:
  Param* create(const std::string& name, const Shape& shape,
                std::vector<double> init);
  Param* get(const std::string& name);
  const Param* find(const std::string& name) const;
  bool erase(const std::string& name);

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [name, p] : store_) fn(p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, p] : store_) fn(p);
  }
  size_t size() const { return store_.size(); }

 private:
  std::map<std::string, Param> store_;
};

// Per-forward context: binds parameters into a graph once each, carries the
// train/grad flags and the dropout stream.
struct Ctx {
  Graph& g;
  bool want_grad = false;  // record backward rules for trainable params
  bool train = false;      // dropout active
  std::mt19937_64* rng = nullptr;

  explicit Ctx(Graph& graph) : g(graph) {}

  Tensor use(Param& p);
  Tensor rows_of(const Mat& m) {
    return g.constant({m.rows, m.cols}, m.data);
  }
  // Adds every bound leaf gradient into its param accumulator.
  void collect_grads();
  // Same, but into an external sink (batch workers accumulate privately and
  // merge in a fixed order afterwards).
  void collect_grads_into(
      std::unordered_map<Param*, std::vector<double>>& sink);

 private:
  std::unordered_map<Param*, Tensor> bound_;
};

// Low-rank residual slot on a Linear: y += (alpha/r) * drop(x) A^T B^T.
// A: [r x d_in], B: [d_out x r]; B starts at zero so attach is a no-op.
struct LoraSlot {
  Param* a = nullptr;
  Param* b = nullptr;
  int rank = 0;
  double alpha = 0.0;
  double dropout = 0.0;
  bool enabled = false;
  bool merged = false;
};

// Weight [d_out x d_in] with optional bias and optional LoRA slot.
struct Linear {
  std::string name;
  Param* w = nullptr;
  Param* b = nullptr;
  LoraSlot* lora = nullptr;

  int d_out() const { return w->shape[0]; }
  int d_in() const { return w->shape[1]; }
  Tensor forward(Ctx& ctx, const Tensor& x) const;
};

struct LayerNormP {
  Param* gain = nullptr;
  Param* offset = nullptr;
  double eps = 1e-5;

  Tensor forward(Ctx& ctx, const Tensor& x) const {
    return layernorm(x, ctx.use(*gain), ctx.use(*offset), eps);
  }
};

// Deterministic initializers keyed by (seed, param name).
std::vector<double> init_uniform(const Shape& shape, double bound,
                                 uint64_t seed, const std::string& name);
std::vector<double> init_zeros(const Shape& shape);
std::vector<double> init_ones(const Shape& shape);
std::vector<double> init_const(const Shape& shape, double v);

Linear make_linear(ParamStore& ps, const std::string& name, int d_out,
                   int d_in, bool bias, uint64_t seed);
LayerNormP make_layernorm(ParamStore& ps, const std::string& name, int dim,
                          double eps = 1e-5);

}  // namespace mtasr
