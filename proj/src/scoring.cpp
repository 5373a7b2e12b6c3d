#include "mtasr/scoring.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtasr {

EditCounts edit_distance(const TokenSeq& ref, const TokenSeq& hyp) {
  const int n = static_cast<int>(ref.size());
  const int m = static_cast<int>(hyp.size());
  // Minimal cost, and among minimal alignments the maximal substitution
  // count. A substitution always beats a deletion+insertion pair, and with
  // S fixed the remaining counts follow from D - I = |ref| - |hyp|, so the
  // canonical triple is unique and swap-covariant.
  std::vector<int> d(static_cast<size_t>(n + 1) * (m + 1));
  std::vector<int> s(static_cast<size_t>(n + 1) * (m + 1));
  auto dd = [&](int i, int j) -> int& {
    return d[static_cast<size_t>(i) * (m + 1) + j];
  };
  auto ss = [&](int i, int j) -> int& {
    return s[static_cast<size_t>(i) * (m + 1) + j];
  };
  for (int i = 0; i <= n; ++i) dd(i, 0) = i;
  for (int j = 0; j <= m; ++j) dd(0, j) = j;
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      const bool differ = ref[i - 1] != hyp[j - 1];
      const int via_diag = dd(i - 1, j - 1) + (differ ? 1 : 0);
      const int via_del = dd(i - 1, j) + 1;
      const int via_ins = dd(i, j - 1) + 1;
      const int best = std::min({via_diag, via_del, via_ins});
      int subs = -1;
      if (via_diag == best) {
        subs = std::max(subs, ss(i - 1, j - 1) + (differ ? 1 : 0));
      }
      if (via_del == best) subs = std::max(subs, ss(i - 1, j));
      if (via_ins == best) subs = std::max(subs, ss(i, j - 1));
      dd(i, j) = best;
      ss(i, j) = subs;
    }
  }
  EditCounts c;
  const int total = dd(n, m);
  c.sub = ss(n, m);
  c.del = (total - c.sub + (n - m)) / 2;
  c.ins = (total - c.sub - (n - m)) / 2;
  return c;
}

ScoreMode score_mode_from(const std::string& s) {
  if (s == "concatenated") return ScoreMode::concatenated;
  if (s == "per_talker") return ScoreMode::per_talker;
  throw std::runtime_error("unknown scoring mode: " + s);
}

WerAccum score_sot(const TalkerRefs& refs, const TokenSeq& hyp,
                   const Vocab& vocab, ScoreMode mode, bool keep_sc) {
  WerAccum acc;
  if (mode == ScoreMode::concatenated) {
    TokenSeq ref_cat, hyp_cat;
    for (const auto& t : refs.talkers) {
      ref_cat.insert(ref_cat.end(), t.tokens.begin(), t.tokens.end());
    }
    for (int id : hyp) {
      if (!keep_sc && id == vocab.sc_id) continue;
      hyp_cat.push_back(id);
    }
    if (keep_sc) {
      TokenSeq ref_sc = build_sot_target(refs, vocab);
      acc.add(edit_distance(ref_sc, hyp_cat),
              static_cast<long long>(ref_sc.size()));
    } else {
      acc.add(edit_distance(ref_cat, hyp_cat),
              static_cast<long long>(ref_cat.size()));
    }
    return acc;
  }
  // Per-talker: i-th hypothesis segment against i-th onset-ordered reference.
  std::vector<TokenSeq> segs = split_sot(hyp, vocab);
  const size_t k = refs.talkers.size();
  for (size_t i = 0; i < k; ++i) {
    const TokenSeq& ref = refs.talkers[i].tokens;
    if (i < segs.size()) {
      acc.add(edit_distance(ref, segs[i]), static_cast<long long>(ref.size()));
    } else {
      EditCounts miss;
      miss.del = static_cast<long long>(ref.size());
      acc.add(miss, static_cast<long long>(ref.size()));
    }
  }
  for (size_t i = k; i < segs.size(); ++i) {
    EditCounts surplus;
    surplus.ins = static_cast<long long>(segs[i].size());
    acc.add(surplus, 0);
  }
  return acc;
}

namespace {

struct SplitWer {
  double dev = -1.0;
  double test = -1.0;
};

// Final dev/test token WER rows of one metrics CSV.
SplitWer read_metrics_final(const std::string& path) {
  std::ifstream is(path);
  if (!is) return {};
  SplitWer out;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string epoch, split, loss, wer;
    std::getline(ss, epoch, ',');
    std::getline(ss, split, ',');
    std::getline(ss, loss, ',');
    std::getline(ss, wer, ',');
    if (wer.empty() || wer == "-") continue;
    const double w = std::stod(wer);
    if (split == "dev") out.dev = w;
    if (split == "test") out.test = w;
  }
  return out;
}

std::string pretty_system(const std::string& s) {
  if (s == "sot") return "SOT baseline";
  if (s == "stack") return "Stacked cross-attention";
  if (s == "gated") return "Gated adaptation";
  if (s == "refine") return "LoRA refinement";
  if (s == "serctc") return "Serialized CTC (no decoder)";
  if (s == "prompt_token") return "TokenPrompt";
  if (s == "prompt_hybrid") return "HybridPrompt";
  if (s == "prompt_acoustic") return "AcousticPrompt";
  return s;
}

}  // namespace

std::string make_report(const std::string& runs_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(runs_dir)) {
    throw std::runtime_error("runs directory not found: " + runs_dir);
  }
  std::set<std::string> conditions;
  std::set<std::string> systems;
  // cond -> system -> list over seeds
  std::map<std::string, std::map<std::string, std::vector<SplitWer>>> table;
  for (const auto& cond_dir : fs::directory_iterator(runs_dir)) {
    if (!cond_dir.is_directory()) continue;
    const std::string cond = cond_dir.path().filename().string();
    if (cond == "data") continue;
    for (const auto& seed_dir : fs::directory_iterator(cond_dir.path())) {
      if (!seed_dir.is_directory()) continue;
      for (const auto& sys_dir : fs::directory_iterator(seed_dir.path())) {
        if (!sys_dir.is_directory()) continue;
        const fs::path csv = sys_dir.path() / "metrics.csv";
        if (!fs::exists(csv)) continue;
        const std::string system = sys_dir.path().filename().string();
        conditions.insert(cond);
        systems.insert(system);
        table[cond][system].push_back(read_metrics_final(csv.string()));
      }
    }
  }
  static const char* kOrder[] = {"sot",    "stack",        "gated",
                                 "refine", "serctc",       "prompt_token",
                                 "prompt_hybrid", "prompt_acoustic"};
  std::vector<std::string> ordered;
  for (const char* s : kOrder) {
    if (systems.count(s)) ordered.push_back(s);
  }
  for (const auto& s : systems) {
    if (std::find(ordered.begin(), ordered.end(), s) == ordered.end()) {
      ordered.push_back(s);
    }
  }

  std::ostringstream os;
  os << "# Token WER (%) by system\n\n";
  os << "| System |";
  for (const auto& c : conditions) os << " " << c << " dev | " << c << " test |";
  os << "\n|---|";
  for (size_t i = 0; i < conditions.size(); ++i) os << "---|---|";
  os << "\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& sys : ordered) {
    os << "| " << pretty_system(sys) << " |";
    for (const auto& cond : conditions) {
      auto cit = table.find(cond);
      const std::vector<SplitWer>* seeds = nullptr;
      if (cit != table.end()) {
        auto sit = cit->second.find(sys);
        if (sit != cit->second.end()) seeds = &sit->second;
      }
      double dev_sum = 0, test_sum = 0;
      int dev_n = 0, test_n = 0;
      if (seeds) {
        for (const auto& sw : *seeds) {
          if (sw.dev >= 0) {
            dev_sum += sw.dev;
            ++dev_n;
          }
          if (sw.test >= 0) {
            test_sum += sw.test;
            ++test_n;
          }
        }
      }
      if (dev_n) os << " " << dev_sum / dev_n << " |";
      else os << " - |";
      if (test_n) os << " " << test_sum / test_n << " |";
      else os << " - |";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace mtasr
