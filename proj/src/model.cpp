#include "mtasr/model.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mtasr {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"frame_dim", c.frame_dim},
           {"enc_dim", c.enc_dim},
           {"enc_layers", c.enc_layers},
           {"conv_kernel", c.conv_kernel},
           {"d_model", c.d_model},
           {"dec_layers", c.dec_layers},
           {"n_heads", c.n_heads},
           {"d_attn", c.d_attn},
           {"ff_dim", c.ff_dim},
           {"max_len", c.max_len},
           {"sep_hidden", c.sep_hidden},
           {"sep_layers", c.sep_layers},
           {"num_talkers", c.num_talkers},
           {"content_vocab", c.content_vocab},
           {"adapter_mode", c.adapter_mode},
           {"tap_point", c.tap_point},
           {"memory_source", c.memory_source},
           {"prompt_variant", c.prompt_variant},
           {"use_instruct", c.use_instruct},
           {"ln_eps", c.ln_eps}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.frame_dim = j.value("frame_dim", d.frame_dim);
  c.enc_dim = j.value("enc_dim", d.enc_dim);
  c.enc_layers = j.value("enc_layers", d.enc_layers);
  c.conv_kernel = j.value("conv_kernel", d.conv_kernel);
  c.d_model = j.value("d_model", d.d_model);
  c.dec_layers = j.value("dec_layers", d.dec_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_attn = j.value("d_attn", d.d_attn);
  c.ff_dim = j.value("ff_dim", d.ff_dim);
  c.max_len = j.value("max_len", d.max_len);
  c.sep_hidden = j.value("sep_hidden", d.sep_hidden);
  c.sep_layers = j.value("sep_layers", d.sep_layers);
  c.num_talkers = j.value("num_talkers", d.num_talkers);
  c.content_vocab = j.value("content_vocab", d.content_vocab);
  c.adapter_mode = j.value("adapter_mode", d.adapter_mode);
  c.tap_point = j.value("tap_point", d.tap_point);
  c.memory_source = j.value("memory_source", d.memory_source);
  c.prompt_variant = j.value("prompt_variant", d.prompt_variant);
  c.use_instruct = j.value("use_instruct", d.use_instruct);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

Linear& Model::linear(const std::string& name) {
  auto it = named_linears.find(name);
  if (it == named_linears.end()) {
    throw std::runtime_error("unknown linear: " + name);
  }
  return *it->second;
}

Tensor Model::tap(Ctx& ctx, const Tensor& he) const {
  if (cfg.tap_point == "encoder_out") return he;
  if (cfg.tap_point == "after_conv2") {
    auto [h2, hd] = reduce.forward(ctx, he);
    return h2;
  }
  throw std::runtime_error("unknown tap point: " + cfg.tap_point);
}

Tensor Model::memory_features(Ctx& ctx, const std::vector<Tensor>& streams,
                              const Tensor& he) const {
  if (cfg.memory_source == "separated") {
    return concat_rows(streams);
  }
  if (cfg.memory_source == "encoder") return he;
  throw std::runtime_error("unknown memory source: " + cfg.memory_source);
}

std::unique_ptr<Model> build_model(const ModelConfig& cfg, uint64_t seed) {
  auto m = std::make_unique<Model>();
  m->cfg = cfg;
  m->init_seed = seed;
  m->vocab = Vocab::make(cfg.content_vocab);

  FrontendConfig fc;
  fc.frame_dim = cfg.frame_dim;
  fc.enc_dim = cfg.enc_dim;
  fc.enc_layers = cfg.enc_layers;
  fc.conv_kernel = cfg.conv_kernel;
  fc.d_model = cfg.d_model;
  m->encoder = make_encoder(m->params, fc, seed);
  m->reduce = make_reduce(m->params, fc, seed);
  m->proj = make_linear(m->params, "proj", cfg.d_model, cfg.enc_dim, true, seed);
  m->projm =
      make_linear(m->params, "projm", cfg.d_model, cfg.enc_dim, true, seed);

  SeparatorConfig sc;
  sc.in_dim = cfg.enc_dim;
  sc.hidden = cfg.sep_hidden;
  sc.layers = cfg.sep_layers;
  sc.out_dim = cfg.enc_dim;
  sc.num_talkers = cfg.num_talkers;
  m->separator = make_separator(m->params, sc, seed);
  m->ctc_head = make_linear(m->params, "ctc", m->vocab.size, cfg.enc_dim, true,
                            seed);

  DecoderConfig dc;
  dc.vocab_size = m->vocab.size;
  dc.d_model = cfg.d_model;
  dc.layers = cfg.dec_layers;
  dc.n_heads = cfg.n_heads;
  dc.d_attn = cfg.d_attn;
  dc.ff_dim = cfg.ff_dim;
  dc.max_len = cfg.max_len;
  dc.adapter_mode = adapter_mode_from(cfg.adapter_mode);
  dc.ln_eps = cfg.ln_eps;
  m->decoder = make_decoder(m->params, dc, seed);

  for (int l = 0; l < cfg.dec_layers; ++l) {
    auto& lay = m->decoder.layers[static_cast<size_t>(l)];
    const std::string base = "dec.l" + std::to_string(l);
    m->named_linears[base + ".sa.q"] = &lay.wq;
    m->named_linears[base + ".sa.k"] = &lay.wk;
    m->named_linears[base + ".sa.v"] = &lay.wv;
    m->named_linears[base + ".sa.o"] = &lay.wo;
    if (lay.adapter) {
      m->named_linears[base + ".ad.q"] = &lay.adapter->wq;
      m->named_linears[base + ".ad.k"] = &lay.adapter->wk;
      m->named_linears[base + ".ad.v"] = &lay.adapter->wv;
      m->named_linears[base + ".ad.o"] = &lay.adapter->wo;
    }
  }
  return m;
}

void attach_lora_set(Model& m, const std::vector<std::string>& targets,
                     const LoraSpec& spec, uint64_t seed) {
  for (const auto& name : targets) {
    attach_lora(m.params, m.lora_slots, m.linear(name), spec, seed);
  }
}

void merge_all_lora(Model& m) {
  std::vector<std::string> names;
  for (const auto& [name, slot] : m.lora_slots) names.push_back(name);
  for (const auto& name : names) {
    merge_lora(m.params, m.lora_slots, m.linear(name));
  }
}

namespace {

constexpr const char* kCkptMagic = "mtasr-ckpt-v1";

json manifest_for(const Model& m, const json& provenance) {
  json buffers = json::array();
  m.params.for_each([&](const Param& p) {
    buffers.push_back(json{{"name", p.name}, {"shape", p.shape}});
  });
  json lora = json::array();
  for (const auto& [name, slot] : m.lora_slots) {
    lora.push_back(json{{"target", name},
                        {"rank", slot.rank},
                        {"alpha", slot.alpha},
                        {"dropout", slot.dropout}});
  }
  return json{{"magic", kCkptMagic},    {"model_config", m.cfg},
              {"vocab", m.vocab},       {"init_seed", m.init_seed},
              {"lora", lora},           {"provenance", provenance},
              {"buffers", buffers}};
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path,
                     const json& provenance) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << manifest_for(m, provenance).dump() << "\n";
  m.params.for_each([&](const Param& p) {
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  });
  if (!os) throw std::runtime_error("write failed for " + path);
}

namespace {

struct RawCheckpoint {
  json manifest;
  std::map<std::string, std::pair<Shape, std::vector<double>>> buffers;
};

RawCheckpoint read_raw_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(is, line)) {
    throw std::runtime_error("truncated checkpoint " + path);
  }
  RawCheckpoint raw;
  raw.manifest = json::parse(line);
  if (raw.manifest.value("magic", "") != kCkptMagic) {
    throw std::runtime_error("checkpoint version mismatch in " + path);
  }
  for (const auto& entry : raw.manifest.at("buffers")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(sizeof(double) * data.size()));
    if (!is) throw std::runtime_error("truncated checkpoint " + path);
    raw.buffers.emplace(name, std::make_pair(shape, std::move(data)));
  }
  return raw;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw_checkpoint(path);
  const ModelConfig cfg = raw.manifest.at("model_config").get<ModelConfig>();
  const uint64_t seed = raw.manifest.value("init_seed", uint64_t{0});
  auto model = build_model(cfg, seed);
  for (const auto& entry : raw.manifest.at("lora")) {
    LoraSpec spec;
    spec.rank = entry.at("rank").get<int>();
    spec.alpha = entry.at("alpha").get<double>();
    spec.dropout = entry.at("dropout").get<double>();
    attach_lora(model->params, model->lora_slots,
                model->linear(entry.at("target").get<std::string>()), spec,
                seed);
  }
  std::vector<std::string> missing, mismatched, extra;
  model->params.for_each([&](Param& p) {
    auto it = raw.buffers.find(p.name);
    if (it == raw.buffers.end()) {
      missing.push_back(p.name);
      return;
    }
    if (it->second.first != p.shape) {
      mismatched.push_back(p.name);
      return;
    }
    p.value = it->second.second;
  });
  for (const auto& [name, sv] : raw.buffers) {
    if (!model->params.find(name)) extra.push_back(name);
  }
  if (!missing.empty() || !mismatched.empty() || !extra.empty()) {
    std::ostringstream os;
    os << "incompatible checkpoint " << path << ":";
    for (const auto& n : missing) os << " missing=" << n;
    for (const auto& n : mismatched) os << " shape-mismatch=" << n;
    for (const auto& n : extra) os << " unexpected=" << n;
    throw std::runtime_error(os.str());
  }
  LoadedCheckpoint out;
  out.model = std::move(model);
  out.provenance = raw.manifest.value("provenance", json::array());
  return out;
}

std::vector<std::string> load_params_into(Model& dst,
                                          const std::string& ckpt_path,
                                          json* provenance_out) {
  RawCheckpoint raw = read_raw_checkpoint(ckpt_path);
  if (!raw.manifest.at("lora").empty()) {
    throw std::runtime_error(
        "cannot initialize a stage from a checkpoint with unmerged LoRA "
        "slots; run merge-lora first: " +
        ckpt_path);
  }
  std::vector<std::string> mismatched;
  for (const auto& [name, sv] : raw.buffers) {
    const Param* existing = dst.params.find(name);
    if (!existing || existing->shape != sv.first) {
      mismatched.push_back(name);
    }
  }
  if (!mismatched.empty()) {
    std::ostringstream os;
    os << "incompatible init checkpoint " << ckpt_path
       << "; mismatched buffers:";
    for (const auto& n : mismatched) os << " " << n;
    throw std::runtime_error(os.str());
  }
  std::vector<std::string> fresh;
  dst.params.for_each([&](Param& p) {
    auto it = raw.buffers.find(p.name);
    if (it == raw.buffers.end()) {
      fresh.push_back(p.name);
    } else {
      p.value = it->second.second;
    }
  });
  if (provenance_out) {
    *provenance_out = raw.manifest.value("provenance", json::array());
  }
  return fresh;
}

}  // namespace mtasr
