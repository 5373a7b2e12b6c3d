#include <random>
#include <set>

#include "doctest.h"
#include "mtasr/vocab.hpp"

using namespace mtasr;

TEST_SUITE("vocab") {

TEST_CASE("vocab layout reserves distinct specials") {
  Vocab v = Vocab::make(32);
  CHECK(v.size == 43);
  CHECK(v.content_size() == 32);
  std::set<int> ids{v.blank_id, v.sc_id, v.pad_id, v.bos_id, v.eos_id};
  for (const auto& [name, id] : v.instruct_ids) ids.insert(id);
  CHECK(ids.size() == 11);  // eight instruct tokens share sc and pad
  for (int id : ids) CHECK(id < v.size);
  CHECK(v.instruct_ids.size() == 8);
  CHECK(v.instruct_ids.at("sc") == v.sc_id);
  CHECK(v.instruct_ids.at("pad") == v.pad_id);
}

TEST_CASE("sot target follows onset order with sc separators") {
  Vocab v = Vocab::make(32);
  const int sc = v.sc_id;
  const int c = v.content_start;

  TalkerRefs refs;
  refs.talkers.push_back({{c + 5, c + 6}, 0});
  refs.talkers.push_back({{c + 7}, 4});
  CHECK(build_sot_target(refs, v) ==
        TokenSeq{c + 5, c + 6, sc, c + 7});

  TalkerRefs one;
  one.talkers.push_back({{c + 9}, 0});
  CHECK(build_sot_target(one, v) == TokenSeq{c + 9});

  TalkerRefs swapped;
  swapped.talkers.push_back({{c + 1}, 7});
  swapped.talkers.push_back({{c + 2}, 2});
  CHECK(build_sot_target(swapped, v) == TokenSeq{c + 2, sc, c + 1});
}

TEST_CASE("duplicate onsets are an ambiguous serialization order") {
  Vocab v = Vocab::make(8);
  TalkerRefs refs;
  refs.talkers.push_back({{v.content_start}, 3});
  refs.talkers.push_back({{v.content_start + 1}, 3});
  CHECK_THROWS_WITH_AS(build_sot_target(refs, v),
                       "build_sot_target: ambiguous serialization order "
                       "(duplicate onset 3)",
                       std::runtime_error);
}

TEST_CASE("reserved tokens are rejected inside references") {
  Vocab v = Vocab::make(8);
  TalkerRefs refs;
  refs.talkers.push_back({{v.sc_id}, 0});
  CHECK_THROWS_AS(build_sot_target(refs, v), std::runtime_error);
}

TEST_CASE("split examples") {
  Vocab v = Vocab::make(32);
  const int sc = v.sc_id;
  CHECK(split_sot({15, 16, sc, 17}, v) ==
        std::vector<TokenSeq>{{15, 16}, {17}});
  CHECK(split_sot({sc}, v) == std::vector<TokenSeq>{{}, {}});
  CHECK(split_sot({}, v) == std::vector<TokenSeq>{{}});
}

TEST_CASE("build then split is the identity over random references") {
  Vocab v = Vocab::make(24);
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> kd(1, 3), ld(1, 9),
      td(v.content_start, v.size - 1);
  for (int trial = 0; trial < 1000; ++trial) {
    TalkerRefs refs;
    const int k = kd(rng);
    std::set<int> onsets;
    while (static_cast<int>(onsets.size()) < k) {
      onsets.insert(static_cast<int>(rng() % 50));
    }
    auto it = onsets.begin();
    for (int i = 0; i < k; ++i, ++it) {
      TalkerRef t;
      t.onset = *it;
      const int len = ld(rng);
      for (int j = 0; j < len; ++j) t.tokens.push_back(td(rng));
      refs.talkers.push_back(std::move(t));
    }
    TokenSeq sot = build_sot_target(refs, v);
    CHECK(static_cast<int>(sot.size()) ==
          [&] {
            int total = k - 1;
            for (const auto& t : refs.talkers)
              total += static_cast<int>(t.tokens.size());
            return total;
          }());
    auto segs = split_sot(sot, v);
    REQUIRE(segs.size() == static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) CHECK(segs[i] == refs.talkers[i].tokens);
  }
}

}  // TEST_SUITE
