#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtasr/tensor.hpp"

namespace mtasr {

// Token inventory with reserved specials. Layout is fixed so checkpoints stay
// compatible across instruct/base runs: the instruct boundary set is always
// allocated. Content ids occupy [content_start, size).
struct Vocab {
  int size = 0;
  int blank_id = 0;
  int sc_id = 1;
  int pad_id = 2;
  int bos_id = 3;
  int eos_id = 4;
  // The eight instruct-style boundary tokens (sc and pad reuse their ids).
  std::map<std::string, int> instruct_ids;
  int content_start = 0;
  // Fixed stand-in for the system instruction text.
  TokenSeq instruction_tokens;

  static Vocab make(int content_size);

  int content_size() const { return size - content_start; }
  bool is_content(int id) const { return id >= content_start && id < size; }
  bool is_special(int id) const { return id >= 0 && id < content_start; }
};

// Per-talker reference transcriptions with onset frame indices, kept in
// onset order after validation.
struct TalkerRef {
  TokenSeq tokens;
  int onset = 0;
};

struct TalkerRefs {
  std::vector<TalkerRef> talkers;

  int num_talkers() const { return static_cast<int>(talkers.size()); }
};

// Serialized target: talker sequences in ascending onset order joined by the
// speaker-change token. Throws on duplicate onsets and on reserved tokens
// appearing inside a reference.
TokenSeq build_sot_target(const TalkerRefs& refs, const Vocab& vocab);

// Inverse of build_sot_target: splits on sc_id. Empty segments are preserved.
std::vector<TokenSeq> split_sot(const TokenSeq& seq, const Vocab& vocab);

}  // namespace mtasr
