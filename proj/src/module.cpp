#include "mtasr/module.hpp"

#include <cmath>

namespace mtasr {

Param* ParamStore::create(const std::string& name, const Shape& shape,
                          std::vector<double> init) {
  if (store_.count(name)) {
    throw std::runtime_error("param already exists: " + name);
  }
  if (static_cast<int>(init.size()) != shape_numel(shape)) {
    throw std::runtime_error("param init size mismatch for " + name);
  }
  Param p;
  p.name = name;
  p.shape = shape;
  p.value = std::move(init);
  p.acc.assign(p.value.size(), 0.0);
  auto [it, ok] = store_.emplace(name, std::move(p));
  (void)ok;
  return &it->second;
}

Param* ParamStore::get(const std::string& name) {
  auto it = store_.find(name);
  if (it == store_.end()) throw std::runtime_error("unknown param: " + name);
  return &it->second;
}

const Param* ParamStore::find(const std::string& name) const {
  auto it = store_.find(name);
  return it == store_.end() ? nullptr : &it->second;
}

bool ParamStore::erase(const std::string& name) {
  return store_.erase(name) > 0;
}

Tensor Ctx::use(Param& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Tensor t = g.leaf(p.shape, p.value, want_grad && p.trainable);
  bound_.emplace(&p, t);
  return t;
}

void Ctx::collect_grads() {
  for (auto& [p, t] : bound_) {
    if (!t.requires_grad()) continue;
    const auto& gv = t.grad();
    for (size_t i = 0; i < gv.size(); ++i) p->acc[i] += gv[i];
  }
}

void Ctx::collect_grads_into(
    std::unordered_map<Param*, std::vector<double>>& sink) {
  for (auto& [p, t] : bound_) {
    if (!t.requires_grad()) continue;
    const auto& gv = t.grad();
    auto [it, fresh] = sink.try_emplace(p);
    if (fresh) it->second.assign(gv.size(), 0.0);
    for (size_t i = 0; i < gv.size(); ++i) it->second[i] += gv[i];
  }
}

Tensor Linear::forward(Ctx& ctx, const Tensor& x) const {
  Tensor y = matmul_nt(x, ctx.use(*w));
  if (b) y = add_row_bias(y, ctx.use(*b));
  if (lora && lora->enabled) {
    Tensor u = x;
    if (lora->dropout > 0.0 && ctx.train) {
      if (!ctx.rng) throw std::runtime_error("dropout needs a ctx rng");
      u = dropout(u, lora->dropout, true, *ctx.rng);
    }
    Tensor low = matmul_nt(u, ctx.use(*lora->a));
    Tensor up = matmul_nt(low, ctx.use(*lora->b));
    y = add(y, scale(up, lora->alpha / lora->rank));
  }
  return y;
}

std::vector<double> init_uniform(const Shape& shape, double bound,
                                 uint64_t seed, const std::string& name) {
  auto rng = seeded_rng(seed, "init/" + name);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> out(static_cast<size_t>(shape_numel(shape)));
  for (double& v : out) v = dist(rng);
  return out;
}

std::vector<double> init_zeros(const Shape& shape) {
  return std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0);
}

std::vector<double> init_ones(const Shape& shape) {
  return std::vector<double>(static_cast<size_t>(shape_numel(shape)), 1.0);
}

std::vector<double> init_const(const Shape& shape, double v) {
  return std::vector<double>(static_cast<size_t>(shape_numel(shape)), v);
}

Linear make_linear(ParamStore& ps, const std::string& name, int d_out,
                   int d_in, bool bias, uint64_t seed) {
  Linear lin;
  lin.name = name;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  lin.w = ps.create(name + ".w", {d_out, d_in},
                    init_uniform({d_out, d_in}, bound, seed, name + ".w"));
  if (bias) lin.b = ps.create(name + ".b", {d_out}, init_zeros({d_out}));
  return lin;
}

LayerNormP make_layernorm(ParamStore& ps, const std::string& name, int dim,
                          double eps) {
  LayerNormP ln;
  ln.gain = ps.create(name + ".g", {dim}, init_ones({dim}));
  ln.offset = ps.create(name + ".b", {dim}, init_zeros({dim}));
  ln.eps = eps;
  return ln;
}

}  // namespace mtasr
