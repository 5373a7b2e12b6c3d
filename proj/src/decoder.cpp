#include "mtasr/decoder.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace mtasr {

AdapterMode adapter_mode_from(const std::string& s) {
  if (s == "none") return AdapterMode::none;
  if (s == "stacked") return AdapterMode::stacked;
  if (s == "gated") return AdapterMode::gated;
  throw std::runtime_error("unknown adapter mode: " + s);
}

std::string adapter_mode_name(AdapterMode m) {
  switch (m) {
    case AdapterMode::none: return "none";
    case AdapterMode::stacked: return "stacked";
    case AdapterMode::gated: return "gated";
  }
  return "?";
}

Tensor memory_bias(Graph& g, int query_rows, const MemoryMask& mask) {
  const int t_m = static_cast<int>(mask.valid.size());
  bool any_valid = false;
  for (uint8_t v : mask.valid) any_valid = any_valid || v != 0;
  if (!any_valid) {
    throw std::runtime_error("memory mask has no valid positions");
  }
  std::vector<double> bias(static_cast<size_t>(query_rows) * t_m);
  for (int r = 0; r < query_rows; ++r)
    for (int j = 0; j < t_m; ++j)
      bias[static_cast<size_t>(r) * t_m + j] = mask.valid[j] ? 0.0 : kNegInf;
  return g.constant({query_rows, t_m}, bias);
}

Tensor causal_mha(const Tensor& q, const Tensor& k, const Tensor& v,
                  int n_heads) {
  Graph* g = q.graph();
  const int len = q.rows(), dim = q.cols();
  if (k.rows() != len || v.rows() != len || k.cols() != dim ||
      v.cols() != dim) {
    throw std::runtime_error("causal_mha: q/k/v shape mismatch");
  }
  if (dim % n_heads != 0) {
    throw std::runtime_error("causal_mha: model dim not divisible by heads");
  }
  const int dh = dim / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rg =
      q.requires_grad() || k.requires_grad() || v.requires_grad();
  Tensor out = g->alloc({len, dim}, rg);
  auto& ov = g->node(out.id()).value;
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();

  // Attention probabilities per head, cached for backward.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(n_heads) * len * len, 0.0);
  std::vector<double> row(static_cast<size_t>(len));
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    double* ph = probs->data() + static_cast<size_t>(h) * len * len;
    for (int i = 0; i < len; ++i) {
      double mx = -1e300;
      for (int j = 0; j <= i; ++j) {
        double s = 0.0;
        const double* qi = qv.data() + static_cast<size_t>(i) * dim + off;
        const double* kj = kv.data() + static_cast<size_t>(j) * dim + off;
        for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (int j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      double* pr = ph + static_cast<size_t>(i) * len;
      for (int j = 0; j <= i; ++j) pr[j] = row[j] / sum;
      double* orow = ov.data() + static_cast<size_t>(i) * dim + off;
      for (int d = 0; d < dh; ++d) orow[d] = 0.0;
      for (int j = 0; j <= i; ++j) {
        const double a = pr[j];
        const double* vj = vv.data() + static_cast<size_t>(j) * dim + off;
        for (int d = 0; d < dh; ++d) orow[d] += a * vj[d];
      }
    }
  }

  if (rg) {
    const int qid = q.id(), kid = k.id(), vid = v.id(), oid = out.id();
    g->set_backward(out, [qid, kid, vid, oid, probs, len, dim, dh, n_heads,
                          scale](Graph& gr) {
      const auto& go = gr.node(oid).grad;
      auto& nq = gr.node(qid);
      auto& nk = gr.node(kid);
      auto& nv = gr.node(vid);
      std::vector<double> datt(static_cast<size_t>(len));
      std::vector<double> dscore(static_cast<size_t>(len));
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        const double* ph = probs->data() + static_cast<size_t>(h) * len * len;
        for (int i = 0; i < len; ++i) {
          const double* grow = go.data() + static_cast<size_t>(i) * dim + off;
          const double* pr = ph + static_cast<size_t>(i) * len;
          // dV and d(attention probs)
          double dot = 0.0;
          for (int j = 0; j <= i; ++j) {
            const double* vj = nv.value.data() + static_cast<size_t>(j) * dim + off;
            double s = 0.0;
            for (int d = 0; d < dh; ++d) s += grow[d] * vj[d];
            datt[j] = s;
            dot += s * pr[j];
            if (nv.requires_grad) {
              double* dvj = nv.grad.data() + static_cast<size_t>(j) * dim + off;
              for (int d = 0; d < dh; ++d) dvj[d] += pr[j] * grow[d];
            }
          }
          for (int j = 0; j <= i; ++j) {
            dscore[j] = pr[j] * (datt[j] - dot) * scale;
          }
          if (nq.requires_grad) {
            double* dqi = nq.grad.data() + static_cast<size_t>(i) * dim + off;
            for (int j = 0; j <= i; ++j) {
              const double* kj = nk.value.data() + static_cast<size_t>(j) * dim + off;
              for (int d = 0; d < dh; ++d) dqi[d] += dscore[j] * kj[d];
            }
          }
          if (nk.requires_grad) {
            const double* qi = nq.value.data() + static_cast<size_t>(i) * dim + off;
            for (int j = 0; j <= i; ++j) {
              double* dkj = nk.grad.data() + static_cast<size_t>(j) * dim + off;
              for (int d = 0; d < dh; ++d) dkj[d] += dscore[j] * qi[d];
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {

// Shared core of the adapter: cross-attention context plus post-norm state.
Tensor xattn_base(Ctx& ctx, const AdapterBlock& ad, const Tensor& h,
                  const Tensor& memory, const Tensor* mask_bias) {
  Tensor hl = ad.ln_in.forward(ctx, h);
  Tensor q = ad.wq.forward(ctx, hl);
  Tensor k = ad.wk.forward(ctx, memory);
  Tensor v = ad.wv.forward(ctx, memory);
  Tensor scores = scale(matmul_nt(q, k),
                        1.0 / std::sqrt(static_cast<double>(ad.d_attn)));
  Tensor att = mask_bias ? softmax_lastdim(scores, *mask_bias)
                         : softmax_lastdim(scores);
  Tensor context = matmul(att, v);
  Tensor u = ad.wo.forward(ctx, context);
  return ad.ln_out.forward(ctx, add(h, u));
}

}  // namespace

Tensor adapter_forward(Ctx& ctx, const AdapterBlock& ad, const Tensor& h,
                       const Tensor& memory, const Tensor* mask_bias) {
  if (!ad.gamma) {
    throw std::runtime_error("adapter_forward: block has no gate");
  }
  Tensor base = xattn_base(ctx, ad, h, memory, mask_bias);
  Tensor delta = sub(base, h);
  Tensor gate = sigmoid(ctx.use(*ad.gamma));
  return add(h, scale_by(gate, delta));
}

Tensor stacked_xattn_forward(Ctx& ctx, const AdapterBlock& ad, const Tensor& h,
                             const Tensor& memory, const Tensor* mask_bias) {
  return xattn_base(ctx, ad, h, memory, mask_bias);
}

Tensor Decoder::hidden(Ctx& ctx, const Tensor& x, const Tensor* memory,
                       const Tensor* mask_bias) const {
  const int len = x.rows();
  if (len > cfg.max_len) {
    throw std::runtime_error("decoder: sequence length " + std::to_string(len) +
                             " exceeds max length " +
                             std::to_string(cfg.max_len));
  }
  Tensor pos = slice_rows(ctx.use(*pos_emb), 0, len);
  Tensor h = add(x, pos);
  for (const auto& layer : layers) {
    Tensor u = layer.ln1.forward(ctx, h);
    Tensor att = causal_mha(layer.wq.forward(ctx, u), layer.wk.forward(ctx, u),
                            layer.wv.forward(ctx, u), cfg.n_heads);
    h = add(h, layer.wo.forward(ctx, att));
    if (layer.adapter) {
      if (!memory) {
        throw std::runtime_error("decoder: adapter present but no memory given");
      }
      h = layer.adapter->gamma
              ? adapter_forward(ctx, *layer.adapter, h, *memory, mask_bias)
              : stacked_xattn_forward(ctx, *layer.adapter, h, *memory,
                                      mask_bias);
    }
    Tensor m = layer.ln2.forward(ctx, h);
    h = add(h, layer.mlp_out.forward(ctx, silu(layer.mlp_in.forward(ctx, m))));
  }
  return ln_f.forward(ctx, h);
}

Tensor Decoder::logits(Ctx& ctx, const Tensor& x, const Tensor* memory,
                       const Tensor* mask_bias) const {
  return lm_head.forward(ctx, hidden(ctx, x, memory, mask_bias));
}

Tensor Decoder::embed(Ctx& ctx, const TokenSeq& ids) const {
  return embedding(ctx.use(*tok_emb), ids);
}

Decoder make_decoder(ParamStore& ps, const DecoderConfig& cfg, uint64_t seed) {
  if (cfg.d_model % cfg.n_heads != 0) {
    throw std::runtime_error("decoder: d_model must be divisible by heads");
  }
  if (cfg.d_attn < 1) throw std::runtime_error("decoder: d_attn must be > 0");
  Decoder dec;
  dec.cfg = cfg;
  dec.tok_emb = ps.create(
      "dec.emb", {cfg.vocab_size, cfg.d_model},
      init_uniform({cfg.vocab_size, cfg.d_model}, 0.1, seed, "dec.emb"));
  dec.pos_emb = ps.create(
      "dec.pos", {cfg.max_len, cfg.d_model},
      init_uniform({cfg.max_len, cfg.d_model}, 0.1, seed, "dec.pos"));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "dec.l" + std::to_string(l);
    Decoder::Layer lay;
    lay.ln1 = make_layernorm(ps, base + ".ln1", cfg.d_model, cfg.ln_eps);
    lay.wq = make_linear(ps, base + ".sa.q", cfg.d_model, cfg.d_model, false, seed);
    lay.wk = make_linear(ps, base + ".sa.k", cfg.d_model, cfg.d_model, false, seed);
    lay.wv = make_linear(ps, base + ".sa.v", cfg.d_model, cfg.d_model, false, seed);
    lay.wo = make_linear(ps, base + ".sa.o", cfg.d_model, cfg.d_model, false, seed);
    lay.ln2 = make_layernorm(ps, base + ".ln2", cfg.d_model, cfg.ln_eps);
    lay.mlp_in = make_linear(ps, base + ".mlp.in", cfg.ff_dim, cfg.d_model, true, seed);
    lay.mlp_out = make_linear(ps, base + ".mlp.out", cfg.d_model, cfg.ff_dim, true, seed);
    if (cfg.adapter_mode != AdapterMode::none) {
      AdapterBlock ad;
      ad.d_attn = cfg.d_attn;
      ad.ln_in = make_layernorm(ps, base + ".ad.ln_in", cfg.d_model, cfg.ln_eps);
      ad.ln_out = make_layernorm(ps, base + ".ad.ln_out", cfg.d_model, cfg.ln_eps);
      ad.wq = make_linear(ps, base + ".ad.q", cfg.d_attn, cfg.d_model, false, seed);
      ad.wk = make_linear(ps, base + ".ad.k", cfg.d_attn, cfg.d_model, false, seed);
      ad.wv = make_linear(ps, base + ".ad.v", cfg.d_attn, cfg.d_model, false, seed);
      ad.wo = make_linear(ps, base + ".ad.o", cfg.d_model, cfg.d_attn, false, seed);
      if (cfg.adapter_mode == AdapterMode::gated) {
        // Gate logit starts at exactly -2, so the gate opens at sigma(-2).
        ad.gamma = ps.create(base + ".ad.gamma", {1}, init_const({1}, -2.0));
      }
      lay.adapter = ad;
    }
    dec.layers.push_back(std::move(lay));
  }
  dec.ln_f = make_layernorm(ps, "dec.lnf", cfg.d_model, cfg.ln_eps);
  dec.lm_head = make_linear(ps, "dec.head", cfg.vocab_size, cfg.d_model, false, seed);
  return dec;
}

TokenSeq generate(const Decoder& dec, const Mat& prefix, const Mat* memory,
                  const MemoryMask* mask, int max_new, int stop_id) {
  if (prefix.rows < 1) throw std::runtime_error("generate: empty prefix");
  TokenSeq out;
  Mat seq = prefix;
  const auto& table = dec.tok_emb->value;
  const int dim = dec.cfg.d_model;
  for (int step = 0; step < max_new; ++step) {
    if (seq.rows >= dec.cfg.max_len) break;
    Graph g;
    Ctx ctx(g);
    Tensor x = g.constant({seq.rows, seq.cols}, seq.data);
    Tensor mem_t, bias_t;
    const Tensor* mem_p = nullptr;
    const Tensor* bias_p = nullptr;
    if (memory) {
      mem_t = g.constant({memory->rows, memory->cols}, memory->data);
      mem_p = &mem_t;
      if (mask && !mask->all_valid()) {
        bias_t = memory_bias(g, seq.rows, *mask);
        bias_p = &bias_t;
      }
    }
    Tensor logits = dec.logits(ctx, x, mem_p, bias_p);
    const auto& lv = logits.value();
    const int vocab = logits.cols();
    const double* last = lv.data() + static_cast<size_t>(seq.rows - 1) * vocab;
    int best = 0;
    for (int j = 1; j < vocab; ++j) {
      if (last[j] > last[best]) best = j;
    }
    if (best == stop_id) break;
    out.push_back(best);
    Mat grown(seq.rows + 1, seq.cols);
    std::memcpy(grown.data.data(), seq.data.data(),
                sizeof(double) * seq.data.size());
    std::memcpy(grown.data.data() + seq.data.size(),
                table.data() + static_cast<size_t>(best) * dim,
                sizeof(double) * dim);
    seq = std::move(grown);
  }
  return out;
}

}  // namespace mtasr
