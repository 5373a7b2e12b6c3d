#pragma once

#include <string>
#include <vector>

#include "mtasr/vocab.hpp"

namespace mtasr {

struct EditCounts {
  long long sub = 0;
  long long del = 0;
  long long ins = 0;

  long long total() const { return sub + del + ins; }
};

// Minimal Levenshtein counts; ties broken by preferring substitution over a
// deletion+insertion pair (diagonal-first backtrace, then deletion).
EditCounts edit_distance(const TokenSeq& ref, const TokenSeq& hyp);

struct WerAccum {
  long long sub = 0, del = 0, ins = 0, nref = 0;

  void add(const EditCounts& c, long long ref_len) {
    sub += c.sub;
    del += c.del;
    ins += c.ins;
    nref += ref_len;
  }
  void add(const WerAccum& o) {
    sub += o.sub;
    del += o.del;
    ins += o.ins;
    nref += o.nref;
  }
  long long total() const { return sub + del + ins; }
  double wer_percent() const {
    return nref > 0 ? 100.0 * static_cast<double>(total()) /
                          static_cast<double>(nref)
                    : 0.0;
  }
};

enum class ScoreMode { concatenated, per_talker };

ScoreMode score_mode_from(const std::string& s);

// Concatenated mode scores the serialized sequences with the speaker-change
// token stripped from both sides (keep_sc overrides). Per-talker mode splits
// the hypothesis on sc and pairs segments with onset-ordered references in
// order: missing segments count as deletions, surplus segments as insertions.
WerAccum score_sot(const TalkerRefs& refs, const TokenSeq& hyp,
                   const Vocab& vocab, ScoreMode mode, bool keep_sc = false);

// Markdown table over runs_dir/<condition>/<seed>/<system>/metrics.csv:
// one row per system, Dev/Test columns per condition, WER means over seeds.
std::string make_report(const std::string& runs_dir);

}  // namespace mtasr
