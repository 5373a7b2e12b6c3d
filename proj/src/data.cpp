#include "mtasr/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtasr {

using nlohmann::json;

void GenSpec::validate() const {
  if (num_talkers < 1 || num_talkers > 3) {
    throw std::runtime_error("genspec: num_talkers must be in {1,2,3}");
  }
  if (len_min < 1 || len_max < len_min) {
    throw std::runtime_error("genspec: bad utterance length range");
  }
  if (frames_per_token < 2) {
    throw std::runtime_error("genspec: frames_per_token must be >= 2");
  }
  if (frame_dim < 1) throw std::runtime_error("genspec: frame_dim must be >= 1");
  if (noise_std < 0.0) throw std::runtime_error("genspec: negative noise std");
  if (onset_base < 0 || onset_jitter < 0) {
    throw std::runtime_error("genspec: bad onset schedule");
  }
  if (onset_base == 0 && onset_jitter + 1 < num_talkers) {
    throw std::runtime_error("genspec: onset schedule cannot give distinct onsets");
  }
  if (content_vocab < 2) throw std::runtime_error("genspec: content_vocab too small");
}

void to_json(json& j, const GenSpec& s) {
  j = json{{"num_talkers", s.num_talkers},
           {"content_vocab", s.content_vocab},
           {"len_min", s.len_min},
           {"len_max", s.len_max},
           {"frames_per_token", s.frames_per_token},
           {"frame_dim", s.frame_dim},
           {"onset_base", s.onset_base},
           {"onset_jitter", s.onset_jitter},
           {"noise_std", s.noise_std},
           {"seed", s.seed}};
}

void from_json(const json& j, GenSpec& s) {
  GenSpec d;
  s.num_talkers = j.value("num_talkers", d.num_talkers);
  s.content_vocab = j.value("content_vocab", d.content_vocab);
  s.len_min = j.value("len_min", d.len_min);
  s.len_max = j.value("len_max", d.len_max);
  s.frames_per_token = j.value("frames_per_token", d.frames_per_token);
  s.frame_dim = j.value("frame_dim", d.frame_dim);
  s.onset_base = j.value("onset_base", d.onset_base);
  s.onset_jitter = j.value("onset_jitter", d.onset_jitter);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.seed = j.value("seed", d.seed);
}

void to_json(json& j, const Vocab& v) {
  j = json{{"size", v.size},
           {"blank", v.blank_id},
           {"sc", v.sc_id},
           {"pad", v.pad_id},
           {"bos", v.bos_id},
           {"eos", v.eos_id},
           {"instruct", v.instruct_ids},
           {"content_start", v.content_start},
           {"instruction_tokens", v.instruction_tokens}};
}

void from_json(const json& j, Vocab& v) {
  j.at("size").get_to(v.size);
  j.at("blank").get_to(v.blank_id);
  j.at("sc").get_to(v.sc_id);
  j.at("pad").get_to(v.pad_id);
  j.at("bos").get_to(v.bos_id);
  j.at("eos").get_to(v.eos_id);
  j.at("instruct").get_to(v.instruct_ids);
  j.at("content_start").get_to(v.content_start);
  j.at("instruction_tokens").get_to(v.instruction_tokens);
}

namespace {

inline double quantize_f32(double v) {
  return static_cast<double>(static_cast<float>(v));
}

}  // namespace

Mat make_codebook(const GenSpec& spec) {
  auto rng = seeded_rng(spec.seed, "codebook");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat cb(spec.content_vocab, spec.frame_dim);
  for (int t = 0; t < spec.content_vocab; ++t) {
    double norm2 = 0.0;
    for (int d = 0; d < spec.frame_dim; ++d) {
      cb.at(t, d) = gauss(rng);
      norm2 += cb.at(t, d) * cb.at(t, d);
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int d = 0; d < spec.frame_dim; ++d)
      cb.at(t, d) = quantize_f32(cb.at(t, d) * inv);
  }
  return cb;
}

std::string codebook_checksum(const Mat& codebook) {
  uint64_t h = 1469598103934665603ull;
  for (double v : codebook.data) {
    const float f = static_cast<float>(v);
    unsigned char bytes[4];
    std::memcpy(bytes, &f, 4);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

MixtureSample render_sample(const GenSpec& spec, const Vocab& vocab,
                            const Mat& codebook, int sample_index) {
  spec.validate();
  auto rng = seeded_rng(spec.seed, "sample/" + std::to_string(sample_index));
  std::uniform_int_distribution<int> len_dist(spec.len_min, spec.len_max);
  std::uniform_int_distribution<int> tok_dist(0, spec.content_vocab - 1);
  std::uniform_int_distribution<int> jitter_dist(0, spec.onset_jitter);

  // Staggered schedule with jitter; redraw the whole set on a collision.
  std::vector<int> onsets(spec.num_talkers);
  for (;;) {
    std::set<int> seen;
    for (int k = 0; k < spec.num_talkers; ++k) {
      onsets[static_cast<size_t>(k)] = k * spec.onset_base + jitter_dist(rng);
      seen.insert(onsets[static_cast<size_t>(k)]);
    }
    if (static_cast<int>(seen.size()) == spec.num_talkers) break;
  }
  std::sort(onsets.begin(), onsets.end());

  MixtureSample s;
  s.id = sample_index;
  s.condition = spec.condition();
  int total_frames = 0;
  for (int k = 0; k < spec.num_talkers; ++k) {
    TalkerRef t;
    t.onset = onsets[k];
    const int len = len_dist(rng);
    for (int i = 0; i < len; ++i)
      t.tokens.push_back(vocab.content_start + tok_dist(rng));
    total_frames = std::max(
        total_frames, t.onset + len * spec.frames_per_token);
    s.refs.talkers.push_back(std::move(t));
  }

  Mat mix(total_frames, spec.frame_dim);
  for (const auto& t : s.refs.talkers) {
    for (size_t i = 0; i < t.tokens.size(); ++i) {
      const int row = t.tokens[i] - vocab.content_start;
      for (int f = 0; f < spec.frames_per_token; ++f) {
        const int fr = t.onset + static_cast<int>(i) * spec.frames_per_token + f;
        for (int d = 0; d < spec.frame_dim; ++d)
          mix.at(fr, d) += codebook.at(row, d);
      }
    }
  }
  if (spec.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (double& v : mix.data) v += noise(rng);
  }
  // Final values are rounded to f32 so disk round-trips are exact.
  for (double& v : mix.data) v = quantize_f32(v);

  s.frames = std::move(mix);
  s.sot_target = build_sot_target(s.refs, vocab);
  return s;
}

Dataset generate_dataset(const GenSpec& spec, int count, int first_index) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.vocab = Vocab::make(spec.content_vocab);
  const Mat cb = make_codebook(spec);
  ds.samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    ds.samples.push_back(render_sample(spec, ds.vocab, cb, first_index + i));
  }
  return ds;
}

namespace {

constexpr const char* kDatasetMagic = "mtasr-dataset-v1";

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated dataset file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  const Mat cb = make_codebook(ds.spec);
  json header{{"magic", kDatasetMagic},
              {"genspec", ds.spec},
              {"vocab", ds.vocab},
              {"codebook_checksum", codebook_checksum(cb)},
              {"num_samples", ds.samples.size()}};
  os << header.dump() << "\n";
  for (const auto& s : ds.samples) {
    json refs = json::array();
    json onsets = json::array();
    for (const auto& t : s.refs.talkers) {
      refs.push_back(t.tokens);
      onsets.push_back(t.onset);
    }
    json meta{{"id", s.id},
              {"condition", s.condition},
              {"onsets", onsets},
              {"refs", refs},
              {"sot", s.sot_target}};
    os << meta.dump() << "\n";
    write_u32(os, static_cast<uint32_t>(s.frames.rows));
    write_u32(os, static_cast<uint32_t>(s.frames.cols));
    for (double v : s.frames.data) {
      const float f = static_cast<float>(v);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
    os << "\n";
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("truncated dataset file");
  json header = json::parse(line);
  if (header.value("magic", "") != kDatasetMagic) {
    throw std::runtime_error("dataset version mismatch in " + path);
  }
  Dataset ds;
  header.at("genspec").get_to(ds.spec);
  header.at("vocab").get_to(ds.vocab);
  const Mat cb = make_codebook(ds.spec);
  if (header.value("codebook_checksum", "") != codebook_checksum(cb)) {
    throw std::runtime_error("codebook mismatch in " + path);
  }
  const size_t n = header.at("num_samples").get<size_t>();
  ds.samples.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line)) {
      throw std::runtime_error("truncated dataset file");
    }
    json meta = json::parse(line);
    MixtureSample s;
    s.id = meta.at("id").get<int>();
    s.condition = meta.at("condition").get<std::string>();
    const auto onsets = meta.at("onsets").get<std::vector<int>>();
    const auto refs = meta.at("refs").get<std::vector<TokenSeq>>();
    if (onsets.size() != refs.size()) {
      throw std::runtime_error("corrupt sample record in " + path);
    }
    for (size_t k = 0; k < refs.size(); ++k) {
      s.refs.talkers.push_back({refs[k], onsets[k]});
    }
    s.sot_target = meta.at("sot").get<TokenSeq>();
    const uint32_t rows = read_u32(is);
    const uint32_t cols = read_u32(is);
    Mat frames(static_cast<int>(rows), static_cast<int>(cols));
    for (double& v : frames.data) {
      float f;
      is.read(reinterpret_cast<char*>(&f), 4);
      if (!is) throw std::runtime_error("truncated dataset file");
      v = static_cast<double>(f);
    }
    s.frames = std::move(frames);
    char nl;
    is.read(&nl, 1);
    if (!is || nl != '\n') throw std::runtime_error("truncated dataset file");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mtasr
