#include "mtasr/prompt.hpp"

#include <iostream>
#include <stdexcept>

namespace mtasr {

PromptVariant prompt_variant_from(const std::string& s) {
  if (s == "sot_baseline") return PromptVariant::sot_baseline;
  if (s == "token") return PromptVariant::token;
  if (s == "hybrid") return PromptVariant::hybrid;
  if (s == "acoustic") return PromptVariant::acoustic;
  throw std::runtime_error("unknown prompt variant: " + s);
}

std::string prompt_variant_name(PromptVariant v) {
  switch (v) {
    case PromptVariant::sot_baseline: return "sot_baseline";
    case PromptVariant::token: return "token";
    case PromptVariant::hybrid: return "hybrid";
    case PromptVariant::acoustic: return "acoustic";
  }
  return "?";
}

namespace {

void require_part(const std::optional<Tensor>& part, PromptVariant v,
                  const char* name) {
  if (!part) {
    throw std::runtime_error("build_prefix: variant " +
                             prompt_variant_name(v) + " requires part " +
                             name);
  }
}

}  // namespace

BuiltPrefix build_prefix(PromptVariant variant, bool use_instruct,
                         const PrefixParts& parts, const Vocab& vocab,
                         const EmbedFn& embed) {
  PromptPlan plan;
  plan.variant = variant;
  plan.use_instruct = use_instruct;

  std::vector<Tensor> segs;
  if (use_instruct) {
    TokenSeq inst;
    inst.push_back(vocab.instruct_ids.at("bos_prompt"));
    inst.insert(inst.end(), vocab.instruction_tokens.begin(),
                vocab.instruction_tokens.end());
    inst.push_back(vocab.instruct_ids.at("eos_prompt"));
    segs.push_back(embed(inst));
    plan.t_inst = static_cast<int>(inst.size());
  }

  std::vector<Tensor> prompt_seg;
  switch (variant) {
    case PromptVariant::sot_baseline:
      require_part(parts.hp, variant, "H_p");
      prompt_seg.push_back(*parts.hp);
      plan.t_ac = parts.hp->rows();
      break;
    case PromptVariant::token:
      if (parts.tok) {
        prompt_seg.push_back(*parts.tok);
        plan.t_sop = parts.tok->rows();
      } else {
        std::cerr << "[prompt] warning: empty CTC decode, token prompt "
                     "dropped\n";
      }
      break;
    case PromptVariant::hybrid:
      require_part(parts.hp, variant, "H_p");
      if (parts.tok) {
        prompt_seg.push_back(*parts.tok);
        plan.t_sop = parts.tok->rows();
      } else {
        std::cerr << "[prompt] warning: empty CTC decode, hybrid prompt "
                     "falls back to acoustics only\n";
      }
      prompt_seg.push_back(*parts.hp);
      plan.t_ac = parts.hp->rows();
      break;
    case PromptVariant::acoustic:
      require_part(parts.aco, variant, "E_aco");
      prompt_seg.push_back(*parts.aco);
      plan.t_ac = parts.aco->rows();
      break;
  }

  if (!prompt_seg.empty()) {
    if (use_instruct) {
      segs.push_back(embed({vocab.instruct_ids.at("bos_speech")}));
      plan.t_wrap += 1;
    }
    for (auto& s : prompt_seg) segs.push_back(s);
    if (use_instruct) {
      segs.push_back(embed({vocab.instruct_ids.at("eos_speech")}));
      plan.t_wrap += 1;
    }
  }

  segs.push_back(parts.tgt);
  plan.t_tgt = parts.tgt.rows();

  return {concat_rows(segs), plan};
}

TokenSeq build_sop_tokens(const std::vector<TokenSeq>& branch_decodes) {
  TokenSeq out;
  for (const auto& branch : branch_decodes) {
    out.insert(out.end(), branch.begin(), branch.end());
  }
  return out;
}

}  // namespace mtasr
