#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtasr/kernels.hpp"

namespace mtasr {

using Shape = std::vector<int>;
using TokenSeq = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Plain owned row-major matrix for values that live outside any graph
// (dataset frames, cached activations, decoded embeddings).
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols + c];
  }
  bool operator==(const Mat&) const = default;
};

class Graph;

// Handle into a Graph node. Cheap to copy; valid for the lifetime of its
// graph. All numeric state (values, grads) lives in the graph.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph* g, int id) : g_(g), id_(id) {}

  bool valid() const { return g_ != nullptr; }
  Graph* graph() const { return g_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int rows() const { return shape().at(0); }
  int cols() const { return shape().at(1); }
  int numel() const { return shape_numel(shape()); }
  bool requires_grad() const;

  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  double scalar() const;

 private:
  Graph* g_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in forward (hence topological) order;
// backward() sweeps them in reverse exactly once. A graph is single-shot:
// one forward build, one backward. Node buffers are recycled through a
// per-thread pool; graphs must be created and destroyed on the same thread.
class Graph {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized only when requires_grad
    bool requires_grad = false;
    std::function<void(Graph&)> backward;  // empty for leaves
  };

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(const Shape& shape, const double* data, bool requires_grad);
  Tensor leaf(const Shape& shape, const std::vector<double>& data,
              bool requires_grad);
  Tensor constant(const Shape& shape, const std::vector<double>& data);
  Tensor constant_scalar(double v);
  Tensor zeros(const Shape& shape, bool requires_grad);

  // Reserved for op implementations: allocate an uninitialized output node.
  Tensor alloc(const Shape& shape, bool requires_grad);
  void set_backward(const Tensor& t, std::function<void(Graph&)> fn);

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t num_nodes() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss)=1 and runs every recorded backward rule once, in
  // reverse order. Throws on a second call, on a non-scalar loss, and on any
  // non-finite gradient produced by the sweep.
  void backward(const Tensor& loss);

 private:
  std::vector<double> take_buffer(int n, bool zero);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a[R x in] * w[out x in]^T -> [R x out]; the layout used by weight matrices.
Tensor matmul_nt(const Tensor& a, const Tensor& w);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// Broadcast multiply by a one-element tensor (the adapter gate).
Tensor scale_by(const Tensor& s, const Tensor& x);
// x[R x C] + row vector b[C] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor tanh_t(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor logaddexp(const Tensor& a, const Tensor& b);
// Flat shift toward higher indices by k, vacated slots filled with kNegInf.
Tensor shift_down(const Tensor& x, int k);
Tensor pick(const Tensor& x, int flat_index);
// Gather rows of table[V x D] by token id; backward scatter-adds.
Tensor embedding(const Tensor& table, const TokenSeq& ids);
// out[t][j] = x[t][cols_idx[j]]
Tensor gather_cols(const Tensor& x, const std::vector<int>& cols_idx);
Tensor softmax_lastdim(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x, const Tensor& bias);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                 double eps);
// Mean of -log softmax(logits)[t, target_t] over positions not equal to
// ignore_id. Targets must be < cols(logits).
Tensor cross_entropy(const Tensor& logits, const TokenSeq& targets,
                     int ignore_id);
// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, std::mt19937_64& rng);

// ---- parameters & optimizer -------------------------------------------------

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> acc;  // accumulated gradient for the pending step
  std::vector<double> m, v;  // Adam moments, sized on first step
  bool trainable = true;

  int numel() const { return shape_numel(shape); }
  void zero_acc();
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied as value *= (1 - lr*wd)
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Applies one update to every trainable param from its accumulated gradient
  // scaled by grad_scale (1/batch), then clears the accumulators.
  void step(std::span<Param* const> params, double grad_scale);
  int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Derives an independent, stable RNG stream from a base seed and a label so
// adding parameters or samples never shifts other streams.
std::mt19937_64 seeded_rng(uint64_t seed, const std::string& label);
uint64_t mix_seed(uint64_t seed, const std::string& label);

}  // namespace mtasr
