#pragma once

#include <vector>

#include "mtasr/module.hpp"
#include "mtasr/vocab.hpp"

namespace mtasr {

struct SeparatorConfig {
  int in_dim = 32;
  int hidden = 64;
  int layers = 2;
  int out_dim = 32;
  int num_talkers = 2;
};

// Fused LSTM over a sequence: single graph node, analytic BPTT backward.
// wx: [4H x D_in], wh: [4H x H], b: [4H], gate order (input, forget, cell,
// output). Initial state is zero.
Tensor lstm_seq(const Tensor& x, const Tensor& wx, const Tensor& wh,
                const Tensor& b);

// Shared recurrence + layernorm, then one ReLU-activated linear head per
// talker stream.
struct Separator {
  struct LstmLayer {
    Param* wx;
    Param* wh;
    Param* b;
  };
  std::vector<LstmLayer> lstm;
  LayerNormP ln;
  std::vector<Linear> heads;

  std::vector<Tensor> forward(Ctx& ctx, const Tensor& h) const;
};

Separator make_separator(ParamStore& ps, const SeparatorConfig& cfg,
                         uint64_t seed);

// Negative log probability of all CTC alignments of target under logits,
// via the log-space forward recursion over the blank-extended sequence.
// The DP is built from differentiable ops, so the gradient comes from the
// graph. Throws "target unalignable" when T is too short, and rejects
// blank inside the target.
Tensor ctc_loss(const Tensor& logits, const TokenSeq& target, int blank_id);

// Smallest number of frames that can align the target (repeats need a blank).
int ctc_min_frames(const TokenSeq& target);

struct SerCtcLossParts {
  std::vector<Tensor> branch;
  Tensor total;
};

// Branch k is paired with the k-th onset-ordered talker; total is the sum in
// ascending branch order. Branch errors are rethrown with the branch index.
SerCtcLossParts serialized_ctc_loss(Ctx& ctx,
                                    const std::vector<Tensor>& streams,
                                    const Linear& ctc_head,
                                    const TalkerRefs& refs, int blank_id);

// alpha * l_serctc + (1 - alpha) * l_sot; alpha must be in [0, 1].
Tensor joint_loss(const Tensor& l_serctc, const Tensor& l_sot, double alpha);

// Per-frame argmax (ties to the lowest id), collapse adjacent repeats, drop
// blanks.
TokenSeq greedy_decode(const Mat& logits, int blank_id);

}  // namespace mtasr
