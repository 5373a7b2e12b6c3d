#pragma once

#include <utility>

#include "mtasr/module.hpp"

namespace mtasr {

struct FrontendConfig {
  int frame_dim = 16;
  int enc_dim = 32;
  int enc_layers = 2;
  int conv_kernel = 3;
  int d_model = 64;
};

// Single fused graph op: h_t = tanh(wx x_t + wh h_{t-1} + b), h_{-1} = 0.
// Backward runs truncated-free BPTT over the whole sequence.
Tensor rnn_tanh_seq(const Tensor& x, const Tensor& wx, const Tensor& wh,
                    const Tensor& b);

// Stride-2 temporal convolution, kernel width kw, zero padding so that
// T_out = ceil(T_in / 2). w is [c_out x (c_in * kw)], window centered.
Tensor conv1d_stride2(const Tensor& x, const Tensor& w, const Tensor& b,
                      int kw);

// Two stacked tanh recurrences over frames; length-preserving.
struct RnnEncoder {
  struct Layer {
    Param* wx;
    Param* wh;
    Param* b;
  };
  std::vector<Layer> layers;

  Tensor forward(Ctx& ctx, const Tensor& frames) const;
};

// Three stride-2 reduction convolutions with a tap after the second layer.
struct ReduceStack {
  struct ConvLayer {
    Param* w;
    Param* b;
  };
  ConvLayer conv[3];
  int kernel = 3;

  // Returns {h2 (ceil(T/4) rows), hd (ceil(T/8) rows)}.
  std::pair<Tensor, Tensor> forward(Ctx& ctx, const Tensor& h) const;
};

RnnEncoder make_encoder(ParamStore& ps, const FrontendConfig& cfg,
                        uint64_t seed);
ReduceStack make_reduce(ParamStore& ps, const FrontendConfig& cfg,
                        uint64_t seed);

// Exact output length of one stride-2 layer under the ceil/zero-pad rule.
inline int reduced_len(int t) { return (t + 1) / 2; }

}  // namespace mtasr
