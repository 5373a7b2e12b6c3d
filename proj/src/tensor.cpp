#include "mtasr/tensor.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace mtasr {

int shape_numel(const Shape& s) {
  int n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

const Shape& Tensor::shape() const { return g_->node(id_).shape; }
bool Tensor::requires_grad() const { return g_->node(id_).requires_grad; }
const std::vector<double>& Tensor::value() const { return g_->node(id_).value; }
const std::vector<double>& Tensor::grad() const { return g_->node(id_).grad; }

double Tensor::scalar() const {
  const auto& v = value();
  if (v.size() != 1) {
    throw std::runtime_error("scalar() on tensor of shape " +
                             shape_str(shape()));
  }
  return v[0];
}

namespace {

// Recycled node buffers. A graph hands its vectors back on destruction, so
// steady-state training allocates almost nothing per sample.
thread_local std::vector<std::vector<double>> g_buffer_pool;
constexpr size_t kPoolCap = 8192;

}  // namespace

Graph::Graph() { nodes_.reserve(256); }

Graph::~Graph() {
  for (Node& n : nodes_) {
    if (g_buffer_pool.size() < kPoolCap && n.value.capacity() > 0) {
      g_buffer_pool.push_back(std::move(n.value));
    }
    if (g_buffer_pool.size() < kPoolCap && n.grad.capacity() > 0) {
      g_buffer_pool.push_back(std::move(n.grad));
    }
  }
}

std::vector<double> Graph::take_buffer(int n, bool zero) {
  std::vector<double> buf;
  if (!g_buffer_pool.empty()) {
    buf = std::move(g_buffer_pool.back());
    g_buffer_pool.pop_back();
  }
  buf.resize(static_cast<size_t>(n));
  if (zero) std::fill(buf.begin(), buf.end(), 0.0);
  return buf;
}

Tensor Graph::alloc(const Shape& shape, bool requires_grad) {
  Node n;
  n.shape = shape;
  // Recycled buffers carry stale contents; every op overwrites its output
  // in full (zeros() zeroes explicitly).
  n.value = take_buffer(shape_numel(shape), false);
  n.requires_grad = requires_grad;
  if (requires_grad) n.grad = take_buffer(shape_numel(shape), true);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Graph::leaf(const Shape& shape, const double* data,
                   bool requires_grad) {
  Tensor t = alloc(shape, requires_grad);
  std::memcpy(node(t.id()).value.data(), data,
              sizeof(double) * node(t.id()).value.size());
  return t;
}

Tensor Graph::leaf(const Shape& shape, const std::vector<double>& data,
                   bool requires_grad) {
  if (static_cast<int>(data.size()) != shape_numel(shape)) {
    throw std::runtime_error("leaf: data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
  }
  return leaf(shape, data.data(), requires_grad);
}

Tensor Graph::constant(const Shape& shape, const std::vector<double>& data) {
  return leaf(shape, data, false);
}

Tensor Graph::constant_scalar(double v) { return constant({1}, {v}); }

Tensor Graph::zeros(const Shape& shape, bool requires_grad) {
  Tensor t = alloc(shape, requires_grad);
  auto& v = node(t.id()).value;
  std::fill(v.begin(), v.end(), 0.0);
  return t;
}

void Graph::set_backward(const Tensor& t, std::function<void(Graph&)> fn) {
  node(t.id()).backward = std::move(fn);
}

void Graph::backward(const Tensor& loss) {
  if (backward_done_) {
    throw std::runtime_error(
        "backward already run on this graph; rebuild the forward pass first");
  }
  if (loss.graph() != this) throw std::runtime_error("backward: foreign tensor");
  Node& ln = node(loss.id());
  if (ln.value.size() != 1) {
    throw std::runtime_error("backward requires a scalar loss, got shape " +
                             shape_str(ln.shape));
  }
  if (!ln.requires_grad) {
    throw std::runtime_error("backward: loss does not require grad");
  }
  backward_done_ = true;
  ln.grad[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.backward) n.backward(*this);
  }
  for (int id = loss.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) continue;
    for (double gv : n.grad) {
      if (!std::isfinite(gv)) {
        throw std::runtime_error("non-finite gradient in node " +
                                 std::to_string(id) + " of shape " +
                                 shape_str(n.shape));
      }
    }
  }
}

// ---- op helpers --------------------------------------------------------------

namespace {

Graph* same_graph(const Tensor& a, const Tensor& b, const char* op) {
  if (a.graph() != b.graph()) {
    throw std::runtime_error(std::string(op) + ": tensors from different graphs");
  }
  return a.graph();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::runtime_error(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  }
}

void check_2d(const Tensor& x, const char* op) {
  if (x.shape().size() != 2) {
    throw std::runtime_error(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(x.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  Graph* g = same_graph(a, b, "matmul");
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw std::runtime_error("matmul: inner dimensions differ: " +
                             shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = g->alloc({m, n}, rg);
  kernels::gemm_nn(a.value().data(), b.value().data(),
                   g->node(out.id()).value.data(), m, k, n, false);
  if (rg) {
    const int aid = a.id(), bid = b.id(), oid = out.id();
    g->set_backward(out, [aid, bid, oid, m, k, n](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& na = gr.node(aid);
      auto& nb = gr.node(bid);
      if (na.requires_grad) {
        kernels::gemm_nt(go.data(), nb.value.data(), na.grad.data(), m, n, k,
                         true);
      }
      if (nb.requires_grad) {
        kernels::gemm_tn(na.value.data(), go.data(), nb.grad.data(), m, k, n,
                         true);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& w) {
  Graph* g = same_graph(a, w, "matmul_nt");
  check_2d(a, "matmul_nt");
  check_2d(w, "matmul_nt");
  const int m = a.rows(), in = a.cols(), out = w.rows();
  if (w.cols() != in) {
    throw std::runtime_error("matmul_nt: inner dimensions differ: " +
                             shape_str(a.shape()) + " vs " +
                             shape_str(w.shape()) + "^T");
  }
  const bool rg = a.requires_grad() || w.requires_grad();
  Tensor y = g->alloc({m, out}, rg);
  kernels::gemm_nt(a.value().data(), w.value().data(),
                   g->node(y.id()).value.data(), m, in, out, false);
  if (rg) {
    const int aid = a.id(), wid = w.id(), oid = y.id();
    g->set_backward(y, [aid, wid, oid, m, in, out](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& na = gr.node(aid);
      auto& nw = gr.node(wid);
      if (na.requires_grad) {
        // da[m x in] += dy[m x out] * w[out x in]
        kernels::gemm_nn(go.data(), nw.value.data(), na.grad.data(), m, out,
                         in, true);
      }
      if (nw.requires_grad) {
        // dw[out x in] += dy^T[out x m] * a[m x in]
        kernels::gemm_tn(go.data(), na.value.data(), nw.grad.data(), m, out,
                         in, true);
      }
    });
  }
  return y;
}

namespace {

// Shared scaffolding for elementwise binary ops with constant coefficients on
// the gradient of each side.
template <typename Fwd, typename Bwd>
Tensor binary_eltwise(const Tensor& a, const Tensor& b, const char* opname,
                      Fwd fwd, Bwd bwd) {
  Graph* g = same_graph(a, b, opname);
  check_same_shape(a, b, opname);
  const bool rg = a.requires_grad() || b.requires_grad();
  Tensor out = g->alloc(a.shape(), rg);
  auto& ov = g->node(out.id()).value;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  if (rg) {
    const int aid = a.id(), bid = b.id(), oid = out.id();
    g->set_backward(out, [aid, bid, oid, bwd](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& na = gr.node(aid);
      auto& nb = gr.node(bid);
      for (size_t i = 0; i < go.size(); ++i) {
        auto [da, db] = bwd(na.value[i], nb.value[i], gr.node(oid).value[i]);
        if (na.requires_grad) na.grad[i] += go[i] * da;
        if (nb.requires_grad) nb.grad[i] += go[i] * db;
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_eltwise(const Tensor& x, Fwd fwd, Bwd bwd) {
  Graph* g = x.graph();
  const bool rg = x.requires_grad();
  Tensor out = g->alloc(x.shape(), rg);
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, bwd](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      const auto& ov = gr.node(oid).value;
      for (size_t i = 0; i < go.size(); ++i) {
        nx.grad[i] += go[i] * bwd(nx.value[i], ov[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_eltwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_eltwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_eltwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  return binary_eltwise(
      a, b, "logaddexp",
      [](double x, double y) {
        const double mx = std::max(x, y);
        if (mx <= kMaskThreshold) return kNegInf;
        return mx + std::log1p(std::exp(std::min(x, y) - mx));
      },
      [](double x, double y, double o) {
        if (o <= kMaskThreshold) return std::pair<double, double>{0.0, 0.0};
        return std::pair<double, double>{std::exp(x - o), std::exp(y - o)};
      });
}

Tensor scale(const Tensor& a, double c) {
  return unary_eltwise(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Tensor tanh_t(const Tensor& x) {
  return unary_eltwise(
      x, [](double v) { return std::tanh(v); },
      [](double, double o) { return 1.0 - o * o; });
}

Tensor relu(const Tensor& x) {
  return unary_eltwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_eltwise(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double o) { return o * (1.0 - o); });
}

Tensor silu(const Tensor& x) {
  return unary_eltwise(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s + v * s * (1.0 - s);
      });
}

Tensor exp_t(const Tensor& x) {
  return unary_eltwise(
      x, [](double v) { return std::exp(v); },
      [](double, double o) { return o; });
}

Tensor scale_by(const Tensor& s, const Tensor& x) {
  Graph* g = same_graph(s, x, "scale_by");
  if (s.numel() != 1) {
    throw std::runtime_error("scale_by: scale must be one element, got " +
                             shape_str(s.shape()));
  }
  const bool rg = s.requires_grad() || x.requires_grad();
  Tensor out = g->alloc(x.shape(), rg);
  const double sv = s.value()[0];
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = sv * xv[i];
  if (rg) {
    const int sid = s.id(), xid = x.id(), oid = out.id();
    g->set_backward(out, [sid, xid, oid](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& ns = gr.node(sid);
      auto& nx = gr.node(xid);
      if (ns.requires_grad) {
        double acc = 0.0;
        for (size_t i = 0; i < go.size(); ++i) acc += go[i] * nx.value[i];
        ns.grad[0] += acc;
      }
      if (nx.requires_grad) {
        const double sv2 = ns.value[0];
        for (size_t i = 0; i < go.size(); ++i) nx.grad[i] += go[i] * sv2;
      }
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  Graph* g = same_graph(x, b, "add_row_bias");
  check_2d(x, "add_row_bias");
  const int rows = x.rows(), cols = x.cols();
  if (b.numel() != cols) {
    throw std::runtime_error("add_row_bias: bias " + shape_str(b.shape()) +
                             " does not match row width " + std::to_string(cols));
  }
  const bool rg = x.requires_grad() || b.requires_grad();
  Tensor out = g->alloc(x.shape(), rg);
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  const auto& bv = b.value();
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < cols; ++j)
      ov[static_cast<size_t>(r) * cols + j] =
          xv[static_cast<size_t>(r) * cols + j] + bv[static_cast<size_t>(j)];
  if (rg) {
    const int xid = x.id(), bid = b.id(), oid = out.id();
    g->set_backward(out, [xid, bid, oid, rows, cols](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      auto& nb = gr.node(bid);
      if (nx.requires_grad) {
        for (size_t i = 0; i < go.size(); ++i) nx.grad[i] += go[i];
      }
      if (nb.requires_grad) {
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < cols; ++j)
            nb.grad[static_cast<size_t>(j)] +=
                go[static_cast<size_t>(r) * cols + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: no parts");
  Graph* g = parts[0].graph();
  const int cols = parts[0].cols();
  int rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    same_graph(parts[0], p, "concat_rows");
    check_2d(p, "concat_rows");
    if (p.cols() != cols) {
      throw std::runtime_error("concat_rows: column mismatch " +
                               shape_str(parts[0].shape()) + " vs " +
                               shape_str(p.shape()));
    }
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Tensor out = g->alloc({rows, cols}, rg);
  auto& ov = g->node(out.id()).value;
  size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::memcpy(ov.data() + off, pv.data(), sizeof(double) * pv.size());
    off += pv.size();
  }
  if (rg) {
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const auto& p : parts) ids.push_back(p.id());
    const int oid = out.id();
    g->set_backward(out, [ids, oid](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      size_t off2 = 0;
      for (int pid : ids) {
        auto& np = gr.node(pid);
        if (np.requires_grad) {
          for (size_t i = 0; i < np.value.size(); ++i)
            np.grad[i] += go[off2 + i];
        }
        off2 += np.value.size();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  Graph* g = x.graph();
  check_2d(x, "slice_rows");
  const int rows = x.rows(), cols = x.cols();
  if (r0 < 0 || r1 > rows || r0 >= r1) {
    throw std::runtime_error("slice_rows: invalid range [" + std::to_string(r0) +
                             "," + std::to_string(r1) + ") for " +
                             shape_str(x.shape()));
  }
  const bool rg = x.requires_grad();
  Tensor out = g->alloc({r1 - r0, cols}, rg);
  auto& ov = g->node(out.id()).value;
  std::memcpy(ov.data(), x.value().data() + static_cast<size_t>(r0) * cols,
              sizeof(double) * ov.size());
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, r0, cols](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      double* dst = nx.grad.data() + static_cast<size_t>(r0) * cols;
      for (size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Graph* g = x.graph();
  const bool rg = x.requires_grad();
  Tensor out = g->alloc({1}, rg);
  double s = 0.0;
  for (double v : x.value()) s += v;
  g->node(out.id()).value[0] = s;
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid](Graph& gr) {
      const double go = gr.node(oid).grad[0];
      auto& nx = gr.node(xid);
      for (auto& gv : nx.grad) gv += go;
    });
  }
  return out;
}

Tensor shift_down(const Tensor& x, int k) {
  Graph* g = x.graph();
  const int n = x.numel();
  const bool rg = x.requires_grad();
  Tensor out = g->alloc(x.shape(), rg);
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  for (int i = 0; i < n; ++i) ov[i] = i < k ? kNegInf : xv[i - k];
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, k, n](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      for (int i = k; i < n; ++i) nx.grad[i - k] += go[i];
    });
  }
  return out;
}

Tensor pick(const Tensor& x, int flat_index) {
  Graph* g = x.graph();
  if (flat_index < 0 || flat_index >= x.numel()) {
    throw std::runtime_error("pick: index " + std::to_string(flat_index) +
                             " out of range for " + shape_str(x.shape()));
  }
  const bool rg = x.requires_grad();
  Tensor out = g->alloc({1}, rg);
  g->node(out.id()).value[0] = x.value()[static_cast<size_t>(flat_index)];
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, flat_index](Graph& gr) {
      gr.node(xid).grad[static_cast<size_t>(flat_index)] +=
          gr.node(oid).grad[0];
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const TokenSeq& ids) {
  Graph* g = table.graph();
  check_2d(table, "embedding");
  const int vocab = table.rows(), dim = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::runtime_error("embedding: token id " + std::to_string(id) +
                               " outside table " + shape_str(table.shape()));
    }
  }
  const bool rg = table.requires_grad();
  const int n = static_cast<int>(ids.size());
  Tensor out = g->alloc({n, dim}, rg);
  auto& ov = g->node(out.id()).value;
  const auto& tv = table.value();
  for (int i = 0; i < n; ++i) {
    std::memcpy(ov.data() + static_cast<size_t>(i) * dim,
                tv.data() + static_cast<size_t>(ids[i]) * dim,
                sizeof(double) * dim);
  }
  if (rg) {
    const int tid = table.id(), oid = out.id();
    g->set_backward(out, [tid, oid, ids, dim, n](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nt = gr.node(tid);
      for (int i = 0; i < n; ++i) {
        double* dst = nt.grad.data() + static_cast<size_t>(ids[i]) * dim;
        const double* src = go.data() + static_cast<size_t>(i) * dim;
        for (int j = 0; j < dim; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor gather_cols(const Tensor& x, const std::vector<int>& cols_idx) {
  Graph* g = x.graph();
  check_2d(x, "gather_cols");
  const int rows = x.rows(), cols = x.cols();
  for (int c : cols_idx) {
    if (c < 0 || c >= cols) {
      throw std::runtime_error("gather_cols: column " + std::to_string(c) +
                               " outside " + shape_str(x.shape()));
    }
  }
  const int k = static_cast<int>(cols_idx.size());
  const bool rg = x.requires_grad();
  Tensor out = g->alloc({rows, k}, rg);
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j)
      ov[static_cast<size_t>(r) * k + j] =
          xv[static_cast<size_t>(r) * cols + cols_idx[j]];
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, cols_idx, rows, cols, k](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
          nx.grad[static_cast<size_t>(r) * cols + cols_idx[j]] +=
              go[static_cast<size_t>(r) * k + j];
    });
  }
  return out;
}

namespace {

Tensor softmax_impl(const Tensor& x, const Tensor* bias) {
  Graph* g = x.graph();
  const Shape& sh = x.shape();
  if (sh.empty()) throw std::runtime_error("softmax: empty shape");
  const int cols = sh.back();
  const int rows = x.numel() / cols;
  if (bias) {
    check_same_shape(x, *bias, "softmax bias");
  }
  const bool rg =
      x.requires_grad() || (bias != nullptr && bias->requires_grad());
  Tensor out = g->alloc(sh, rg);
  const int bad = kernels::softmax_rows(
      x.value().data(), bias ? bias->value().data() : nullptr,
      g->node(out.id()).value.data(), rows, cols);
  if (bad >= 0) {
    throw std::runtime_error("softmax: fully masked attention row " +
                             std::to_string(bad));
  }
  if (rg) {
    const int xid = x.id(), oid = out.id();
    const int bid = bias ? bias->id() : -1;
    g->set_backward(out, [xid, bid, oid, rows, cols](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      const auto& ov = gr.node(oid).value;
      auto& nx = gr.node(xid);
      if (nx.requires_grad) {
        kernels::softmax_rows_backward(ov.data(), go.data(), nx.grad.data(),
                                       rows, cols);
      }
      if (bid >= 0) {
        auto& nb = gr.node(bid);
        if (nb.requires_grad) {
          kernels::softmax_rows_backward(ov.data(), go.data(), nb.grad.data(),
                                         rows, cols);
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl(x, nullptr); }

Tensor softmax_lastdim(const Tensor& x, const Tensor& bias) {
  same_graph(x, bias, "softmax");
  return softmax_impl(x, &bias);
}

Tensor log_softmax_lastdim(const Tensor& x) {
  Graph* g = x.graph();
  const Shape& sh = x.shape();
  if (sh.empty()) throw std::runtime_error("log_softmax: empty shape");
  const int cols = sh.back();
  const int rows = x.numel() / cols;
  const bool rg = x.requires_grad();
  Tensor out = g->alloc(sh, rg);
  kernels::log_softmax_rows(x.value().data(), g->node(out.id()).value.data(),
                            rows, cols);
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, rows, cols](Graph& gr) {
      kernels::log_softmax_rows_backward(gr.node(oid).value.data(),
                                         gr.node(oid).grad.data(),
                                         gr.node(xid).grad.data(), rows, cols);
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                 double eps) {
  Graph* g = x.graph();
  same_graph(x, gain, "layernorm");
  same_graph(x, offset, "layernorm");
  const Shape& sh = x.shape();
  if (sh.empty() || sh.back() == 0) {
    throw std::runtime_error("layernorm: last dimension of size 0");
  }
  if (eps <= 0.0) throw std::runtime_error("layernorm: eps must be positive");
  const int cols = sh.back();
  const int rows = x.numel() / cols;
  if (gain.numel() != cols || offset.numel() != cols) {
    throw std::runtime_error("layernorm: gain/offset must match last dim " +
                             std::to_string(cols));
  }
  const bool rg =
      x.requires_grad() || gain.requires_grad() || offset.requires_grad();
  Tensor out = g->alloc(sh, rg);
  auto mu = std::make_shared<std::vector<double>>(rows);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  kernels::layernorm_rows(x.value().data(), gain.value().data(),
                          offset.value().data(), eps,
                          g->node(out.id()).value.data(), mu->data(),
                          rstd->data(), rows, cols);
  if (rg) {
    const int xid = x.id(), gid = gain.id(), oid2 = offset.id(),
              oid = out.id();
    g->set_backward(out, [xid, gid, oid2, oid, mu, rstd, rows, cols](Graph& gr) {
      auto& nx = gr.node(xid);
      auto& ng = gr.node(gid);
      auto& no = gr.node(oid2);
      kernels::layernorm_rows_backward(
          nx.value.data(), ng.value.data(), mu->data(), rstd->data(),
          gr.node(oid).grad.data(),
          nx.requires_grad ? nx.grad.data() : nullptr,
          ng.requires_grad ? ng.grad.data() : nullptr,
          no.requires_grad ? no.grad.data() : nullptr, rows, cols);
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const TokenSeq& targets,
                     int ignore_id) {
  Graph* g = logits.graph();
  check_2d(logits, "cross_entropy");
  const int rows = logits.rows(), vocab = logits.cols();
  if (static_cast<int>(targets.size()) != rows) {
    throw std::runtime_error("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " rows");
  }
  int count = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || t >= vocab) {
      throw std::runtime_error("cross_entropy: target id " + std::to_string(t) +
                               " outside vocabulary of size " +
                               std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) {
    throw std::runtime_error("cross_entropy: no supervised positions");
  }
  // Cache row log-softmax for the backward pass.
  auto logp = std::make_shared<std::vector<double>>(
      static_cast<size_t>(rows) * vocab);
  kernels::log_softmax_rows(logits.value().data(), logp->data(), rows, vocab);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    loss -= (*logp)[static_cast<size_t>(r) * vocab + targets[r]];
  }
  loss /= count;
  const bool rg = logits.requires_grad();
  Tensor out = g->alloc({1}, rg);
  g->node(out.id()).value[0] = loss;
  if (rg) {
    const int lid = logits.id(), oid = out.id();
    g->set_backward(out, [lid, oid, logp, targets, ignore_id, rows, vocab,
                          count](Graph& gr) {
      const double go = gr.node(oid).grad[0] / count;
      auto& nl = gr.node(lid);
      for (int r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) continue;
        double* dst = nl.grad.data() + static_cast<size_t>(r) * vocab;
        const double* lp = logp->data() + static_cast<size_t>(r) * vocab;
        for (int j = 0; j < vocab; ++j) dst[j] += go * std::exp(lp[j]);
        dst[targets[r]] -= go;
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, bool train, std::mt19937_64& rng) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw std::runtime_error("dropout: p must be < 1");
  Graph* g = x.graph();
  const bool rg = x.requires_grad();
  Tensor out = g->alloc(x.shape(), rg);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double keep = 1.0 - p;
  auto& ov = g->node(out.id()).value;
  const auto& xv = x.value();
  for (size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = uni(rng) < keep ? 1.0 / keep : 0.0;
    ov[i] = xv[i] * (*mask)[i];
  }
  if (rg) {
    const int xid = x.id(), oid = out.id();
    g->set_backward(out, [xid, oid, mask](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      for (size_t i = 0; i < go.size(); ++i) nx.grad[i] += go[i] * (*mask)[i];
    });
  }
  return out;
}

// ---- parameters & optimizer ---------------------------------------------------

void Param::zero_acc() { std::fill(acc.begin(), acc.end(), 0.0); }

void Adam::step(std::span<Param* const> params, double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    if (!p->trainable) continue;
    if (p->m.empty()) {
      p->m.assign(p->value.size(), 0.0);
      p->v.assign(p->value.size(), 0.0);
    }
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (size_t i = 0; i < p->value.size(); ++i) {
      const double gv = p->acc[i] * grad_scale;
      p->m[i] = cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * gv;
      p->v[i] = cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * gv * gv;
      const double mh = p->m[i] / bc1;
      const double vh = p->v[i] / bc2;
      if (cfg_.weight_decay > 0.0) p->value[i] *= decay;
      p->value[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    p->zero_acc();
  }
}

uint64_t mix_seed(uint64_t seed, const std::string& label) {
  // FNV-1a over the label folded into a splitmix64 of the seed.
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ull;
  }
  uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::mt19937_64 seeded_rng(uint64_t seed, const std::string& label) {
  return std::mt19937_64(mix_seed(seed, label));
}

}  // namespace mtasr
