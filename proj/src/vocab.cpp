#include "mtasr/vocab.hpp"

#include <algorithm>
#include <stdexcept>

namespace mtasr {

Vocab Vocab::make(int content_size) {
  if (content_size < 1) throw std::runtime_error("vocab: need content tokens");
  Vocab v;
  v.blank_id = 0;
  v.sc_id = 1;
  v.pad_id = 2;
  v.bos_id = 3;
  v.eos_id = 4;
  v.instruct_ids = {
      {"sc", v.sc_id},      {"pad", v.pad_id},      {"bos_prompt", 5},
      {"eos_prompt", 6},    {"bos_speech", 7},      {"eos_speech", 8},
      {"bos_response", 9},  {"eos_response", 10},
  };
  v.content_start = 11;
  v.size = v.content_start + content_size;
  // Stand-in instruction: a fixed short sequence of content tokens.
  const int n_inst = std::min(4, content_size);
  for (int i = 0; i < n_inst; ++i)
    v.instruction_tokens.push_back(v.content_start + i);
  return v;
}

TokenSeq build_sot_target(const TalkerRefs& refs, const Vocab& vocab) {
  if (refs.talkers.empty()) {
    throw std::runtime_error("build_sot_target: no talkers");
  }
  std::vector<const TalkerRef*> order;
  order.reserve(refs.talkers.size());
  for (const auto& t : refs.talkers) {
    if (t.tokens.empty()) {
      throw std::runtime_error("build_sot_target: empty reference");
    }
    for (int id : t.tokens) {
      if (id == vocab.sc_id || id == vocab.blank_id || id == vocab.pad_id) {
        throw std::runtime_error(
            "build_sot_target: reserved token id " + std::to_string(id) +
            " inside a reference transcription");
      }
    }
    order.push_back(&t);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const TalkerRef* a, const TalkerRef* b) {
                     return a->onset < b->onset;
                   });
  for (size_t i = 1; i < order.size(); ++i) {
    if (order[i]->onset == order[i - 1]->onset) {
      throw std::runtime_error(
          "build_sot_target: ambiguous serialization order (duplicate onset " +
          std::to_string(order[i]->onset) + ")");
    }
  }
  TokenSeq out;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i) out.push_back(vocab.sc_id);
    out.insert(out.end(), order[i]->tokens.begin(), order[i]->tokens.end());
  }
  return out;
}

std::vector<TokenSeq> split_sot(const TokenSeq& seq, const Vocab& vocab) {
  std::vector<TokenSeq> out(1);
  for (int id : seq) {
    if (id == vocab.sc_id) {
      out.emplace_back();
    } else {
      out.back().push_back(id);
    }
  }
  return out;
}

}  // namespace mtasr
