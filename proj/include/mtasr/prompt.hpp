#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mtasr/tensor.hpp"
#include "mtasr/vocab.hpp"

namespace mtasr {

enum class PromptVariant { sot_baseline, token, hybrid, acoustic };

PromptVariant prompt_variant_from(const std::string& s);
std::string prompt_variant_name(PromptVariant v);

// Realized segment lengths of one assembled prefix.
struct PromptPlan {
  PromptVariant variant = PromptVariant::sot_baseline;
  bool use_instruct = false;
  int t_inst = 0;  // instruction tokens incl. prompt boundary tokens
  int t_sop = 0;   // embedded CTC transcription tokens
  int t_ac = 0;    // acoustic rows (projected mixture or separated streams)
  int t_wrap = 0;  // speech boundary tokens
  int t_tgt = 0;   // teacher-forced target segment

  int total() const { return t_inst + t_sop + t_ac + t_wrap + t_tgt; }
};

// Graph tensors feeding the prefix. tok is absent when the CTC decode came
// back empty (allowed, logged); hp/aco are required by their variants.
struct PrefixParts {
  std::optional<Tensor> tok;
  std::optional<Tensor> hp;
  std::optional<Tensor> aco;
  Tensor tgt;
};

using EmbedFn = std::function<Tensor(const TokenSeq&)>;

struct BuiltPrefix {
  Tensor prefix;
  PromptPlan plan;
};

// Concatenates [instruction?, prompt segment, target] along the token/time
// axis. The prompt segment is H_p for the serialized baseline, embedded CTC
// tokens for token, [tokens, H_p] for hybrid, and the projected separated
// streams for acoustic. In instruct mode the instruction is wrapped in
// prompt-boundary tokens and the prompt segment in speech-boundary tokens.
BuiltPrefix build_prefix(PromptVariant variant, bool use_instruct,
                         const PrefixParts& parts, const Vocab& vocab,
                         const EmbedFn& embed);

// Concatenated greedy decodes of the CTC branches, onset order, no separator.
TokenSeq build_sop_tokens(const std::vector<TokenSeq>& branch_decodes);

}  // namespace mtasr
