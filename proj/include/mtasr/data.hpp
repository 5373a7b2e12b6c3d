#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtasr/tensor.hpp"
#include "mtasr/vocab.hpp"

namespace mtasr {

// Recipe for one synthetic overlapping-talker condition. Every token of every
// talker expands to frames_per_token consecutive copies of that token's
// codebook vector; talkers are shifted by distinct onsets and summed, then
// Gaussian frame noise is added.
struct GenSpec {
  int num_talkers = 2;
  int content_vocab = 32;
  int len_min = 3;
  int len_max = 8;
  int frames_per_token = 4;
  int frame_dim = 16;
  // Talker k starts near k * onset_base, jittered by U[0, onset_jitter];
  // mirrors staggered offset schedules for overlapped mixtures.
  int onset_base = 10;
  int onset_jitter = 8;
  double noise_std = 0.0;
  uint64_t seed = 1;

  void validate() const;
  std::string condition() const { return noise_std > 0.0 ? "noisy" : "clean"; }
  bool operator==(const GenSpec&) const = default;
};

void to_json(nlohmann::json& j, const GenSpec& s);
void from_json(const nlohmann::json& j, GenSpec& s);
void to_json(nlohmann::json& j, const Vocab& v);
void from_json(const nlohmann::json& j, Vocab& v);

struct MixtureSample {
  int id = 0;
  TalkerRefs refs;  // ascending onset order
  Mat frames;       // T_e x frame_dim
  TokenSeq sot_target;
  std::string condition;
};

struct Dataset {
  GenSpec spec;
  Vocab vocab;
  std::vector<MixtureSample> samples;
};

// Per-content-token frame vectors, unit-norm then rounded to f32 so stored
// frames round-trip losslessly. Drawn once from the dataset seed.
Mat make_codebook(const GenSpec& spec);
std::string codebook_checksum(const Mat& codebook);

// Deterministic in (spec, sample_index); independent of generation order.
MixtureSample render_sample(const GenSpec& spec, const Vocab& vocab,
                            const Mat& codebook, int sample_index);

// Samples [first_index, first_index + count). Splits of one corpus share the
// spec (hence the codebook) and take disjoint index ranges.
Dataset generate_dataset(const GenSpec& spec, int count, int first_index = 0);

// One JSON header line, then per sample a JSON metadata line followed by a
// length-prefixed little-endian f32 frame block.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace mtasr
