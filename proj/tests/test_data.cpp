#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mtasr/data.hpp"

using namespace mtasr;

namespace {

std::filesystem::path tmp_file(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mtasr_test_" + name);
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("single talker, single token renders as repeated codebook rows") {
  GenSpec spec;
  spec.num_talkers = 1;
  spec.len_min = spec.len_max = 1;
  spec.onset_base = 0;
  spec.onset_jitter = 0;
  spec.noise_std = 0.0;
  spec.seed = 3;
  Vocab v = Vocab::make(spec.content_vocab);
  Mat cb = make_codebook(spec);
  MixtureSample s = render_sample(spec, v, cb, 0);
  REQUIRE(s.frames.rows == spec.frames_per_token);
  const int row = s.refs.talkers[0].tokens[0] - v.content_start;
  for (int f = 0; f < s.frames.rows; ++f)
    for (int d = 0; d < s.frames.cols; ++d)
      CHECK(s.frames.at(f, d) == cb.at(row, d));
}

TEST_CASE("rendering is deterministic in (spec, index)") {
  GenSpec spec;
  spec.num_talkers = 2;
  spec.noise_std = 0.5;
  spec.seed = 11;
  Vocab v = Vocab::make(spec.content_vocab);
  Mat cb = make_codebook(spec);
  MixtureSample a = render_sample(spec, v, cb, 7);
  MixtureSample b = render_sample(spec, v, cb, 7);
  CHECK(a.frames == b.frames);
  CHECK(a.sot_target == b.sot_target);
  MixtureSample c = render_sample(spec, v, cb, 8);
  CHECK(a.frames.data != c.frames.data);
}

TEST_CASE("non-overlapping talkers superpose exactly") {
  // Construct a two-talker sample whose onsets make the spans disjoint, then
  // compare each span against the talker rendered alone.
  GenSpec spec;
  spec.num_talkers = 2;
  spec.len_min = spec.len_max = 2;
  spec.frames_per_token = 4;
  spec.onset_base = 9;
  spec.onset_jitter = 4;
  spec.noise_std = 0.0;
  Vocab v = Vocab::make(spec.content_vocab);
  Mat cb = make_codebook(spec);
  // Search for an index whose onsets produce disjoint spans.
  for (int idx = 0; idx < 400; ++idx) {
    MixtureSample s = render_sample(spec, v, cb, idx);
    const auto& t0 = s.refs.talkers[0];
    const auto& t1 = s.refs.talkers[1];
    const int span = 2 * spec.frames_per_token;
    if (t0.onset + span > t1.onset) continue;
    // Disjoint: frames within t0's span must equal t0's solo render.
    for (size_t i = 0; i < t0.tokens.size(); ++i) {
      const int row = t0.tokens[i] - v.content_start;
      for (int f = 0; f < spec.frames_per_token; ++f)
        for (int d = 0; d < spec.frame_dim; ++d)
          CHECK(s.frames.at(t0.onset + static_cast<int>(i) *
                                           spec.frames_per_token + f,
                            d) == cb.at(row, d));
    }
    return;
  }
  FAIL("no disjoint-onset sample found");
}

TEST_CASE("dataset write/read round trip is the identity") {
  GenSpec spec;
  spec.num_talkers = 2;
  spec.noise_std = 0.5;
  spec.seed = 21;
  Dataset ds = generate_dataset(spec, 100);
  auto path = tmp_file("roundtrip.bin");
  write_dataset(ds, path.string());
  Dataset rd = read_dataset(path.string());
  CHECK(rd.spec == ds.spec);
  REQUIRE(rd.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(rd.samples[i].frames == ds.samples[i].frames);
    CHECK(rd.samples[i].sot_target == ds.samples[i].sot_target);
    REQUIRE(rd.samples[i].refs.talkers.size() ==
            ds.samples[i].refs.talkers.size());
    for (size_t k = 0; k < ds.samples[i].refs.talkers.size(); ++k) {
      CHECK(rd.samples[i].refs.talkers[k].tokens ==
            ds.samples[i].refs.talkers[k].tokens);
      CHECK(rd.samples[i].refs.talkers[k].onset ==
            ds.samples[i].refs.talkers[k].onset);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("truncated files fail loudly") {
  GenSpec spec;
  spec.seed = 5;
  Dataset ds = generate_dataset(spec, 10);
  auto path = tmp_file("trunc.bin");
  write_dataset(ds, path.string());
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full / 2);
  CHECK_THROWS_WITH_AS(read_dataset(path.string()), "truncated dataset file",
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("codebook checksum mismatch is reported") {
  GenSpec spec;
  spec.seed = 6;
  Dataset ds = generate_dataset(spec, 3);
  auto path = tmp_file("cksum.bin");
  write_dataset(ds, path.string());
  // Corrupt the checksum field in the header line.
  std::ifstream is(path, std::ios::binary);
  std::string contents((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
  is.close();
  const auto pos = contents.find("codebook_checksum\":\"");
  REQUIRE(pos != std::string::npos);
  const auto vpos = pos + std::string("codebook_checksum\":\"").size();
  contents[vpos] = contents[vpos] == '0' ? '1' : '0';
  std::ofstream os(path, std::ios::binary);
  os << contents;
  os.close();
  CHECK_THROWS_WITH_AS(read_dataset(path.string()),
                       ("codebook mismatch in " + path.string()).c_str(),
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("version mismatch is reported") {
  auto path = tmp_file("magic.bin");
  std::ofstream os(path, std::ios::binary);
  os << "{\"magic\":\"other-format\"}\n";
  os.close();
  CHECK_THROWS_AS(read_dataset(path.string()), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("splits of one corpus share the codebook and differ in samples") {
  GenSpec spec;
  spec.num_talkers = 2;
  spec.seed = 99;
  Dataset train = generate_dataset(spec, 5, 0);
  Dataset dev = generate_dataset(spec, 5, 1 << 20);
  CHECK(codebook_checksum(make_codebook(train.spec)) ==
        codebook_checksum(make_codebook(dev.spec)));
  CHECK(train.samples[0].frames.data != dev.samples[0].frames.data);
  CHECK(train.samples[0].id != dev.samples[0].id);
}

TEST_CASE("genspec validation") {
  GenSpec bad;
  bad.frames_per_token = 1;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  GenSpec neg;
  neg.noise_std = -1;
  CHECK_THROWS_AS(neg.validate(), std::runtime_error);
  GenSpec narrow;
  narrow.num_talkers = 3;
  narrow.onset_base = 0;
  narrow.onset_jitter = 1;
  CHECK_THROWS_AS(narrow.validate(), std::runtime_error);
}

}  // TEST_SUITE
