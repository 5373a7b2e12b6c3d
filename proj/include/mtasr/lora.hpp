#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtasr/module.hpp"

namespace mtasr {

struct LoraSpec {
  int rank = 16;
  double alpha = 32.0;
  double dropout = 0.1;
};

// Attaches a slot to the named linear: A ~ uniform(+-1/sqrt(d_in)), B = 0,
// base weight flagged frozen. Rejects rank > min(d_in, d_out) and double
// attachment. The slot registry owns slot state; params live in the store as
// "<name>.lora_a" / "<name>.lora_b".
LoraSlot* attach_lora(ParamStore& ps, std::map<std::string, LoraSlot>& slots,
                      Linear& target, const LoraSpec& spec, uint64_t seed);

// Folds (alpha/r) B A into the base weight, removes the A/B buffers and
// disables the slot. A second merge of the same slot is an error.
void merge_lora(ParamStore& ps, std::map<std::string, LoraSlot>& slots,
                Linear& target);

enum class LoraStage { stage0_self_attention, stage2_refine };

// Names of the linear maps a stage adapts: Stage 0 targets every
// self-attention projection; Stage 2 the union of self- and cross-attention
// projections (or cross-attention only when ca_only is set).
std::vector<std::string> stage_targets(LoraStage stage, int decoder_layers,
                                       bool has_adapters, bool ca_only);

}  // namespace mtasr
