#pragma once

#include <optional>
#include <vector>

#include "mtasr/module.hpp"
#include "mtasr/vocab.hpp"

namespace mtasr {

enum class AdapterMode { none, stacked, gated };

AdapterMode adapter_mode_from(const std::string& s);
std::string adapter_mode_name(AdapterMode m);

struct DecoderConfig {
  int vocab_size = 0;
  int d_model = 64;
  int layers = 4;
  int n_heads = 4;
  int d_attn = 32;  // adapter attention dim
  int ff_dim = 128;
  int max_len = 160;
  AdapterMode adapter_mode = AdapterMode::none;
  double ln_eps = 1e-5;
};

// Validity flags over memory positions; invalid positions receive an
// additive -inf bias and therefore exactly zero attention weight.
struct MemoryMask {
  std::vector<uint8_t> valid;

  bool all_valid() const {
    for (uint8_t v : valid)
      if (!v) return false;
    return true;
  }
};

// Builds the [query_rows x memory_rows] additive bias matrix for a mask.
Tensor memory_bias(Graph& g, int query_rows, const MemoryMask& mask);

// Fused multi-head causal attention: q, k, v are [L x D] with D split across
// n_heads; position i attends to positions <= i.
Tensor causal_mha(const Tensor& q, const Tensor& k, const Tensor& v,
                  int n_heads);

// Cross-attention adapter weights; gamma is absent in stacked mode.
struct AdapterBlock {
  LayerNormP ln_in;
  LayerNormP ln_out;
  Linear wq, wk, wv, wo;
  Param* gamma = nullptr;
  int d_attn = 0;
};

// h + sigmoid(gamma) * (LN_out(h + attn(h, memory)) - h)
Tensor adapter_forward(Ctx& ctx, const AdapterBlock& ad, const Tensor& h,
                       const Tensor& memory, const Tensor* mask_bias);
// The no-gate ablation: returns LN_out(h + attn(h, memory)) directly.
Tensor stacked_xattn_forward(Ctx& ctx, const AdapterBlock& ad, const Tensor& h,
                             const Tensor& memory, const Tensor* mask_bias);

struct Decoder {
  DecoderConfig cfg;
  Param* tok_emb = nullptr;  // [V x D]
  Param* pos_emb = nullptr;  // [max_len x D]
  struct Layer {
    LayerNormP ln1;
    Linear wq, wk, wv, wo;
    LayerNormP ln2;
    Linear mlp_in, mlp_out;
    std::optional<AdapterBlock> adapter;
  };
  std::vector<Layer> layers;
  LayerNormP ln_f;
  Linear lm_head;

  // x: [L x D] input embeddings (positions are added here). memory may be
  // null when no adapters are present.
  Tensor hidden(Ctx& ctx, const Tensor& x, const Tensor* memory,
                const Tensor* mask_bias) const;
  Tensor logits(Ctx& ctx, const Tensor& x, const Tensor* memory,
                const Tensor* mask_bias) const;
  Tensor embed(Ctx& ctx, const TokenSeq& ids) const;
};

Decoder make_decoder(ParamStore& ps, const DecoderConfig& cfg, uint64_t seed);

// Greedy autoregressive decoding. prefix holds the already-embedded context
// rows (ending with the response-start token); new tokens are embedded from
// the decoder's table. Stops at stop_id or after max_new tokens.
TokenSeq generate(const Decoder& dec, const Mat& prefix, const Mat* memory,
                  const MemoryMask* mask, int max_new, int stop_id);

}  // namespace mtasr
