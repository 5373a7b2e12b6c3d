#pragma once

#include <map>
#include <memory>
#include <string>

#include "json.hpp"
#include "mtasr/data.hpp"
#include "mtasr/decoder.hpp"
#include "mtasr/frontend.hpp"
#include "mtasr/lora.hpp"
#include "mtasr/prompt.hpp"
#include "mtasr/separator.hpp"

namespace mtasr {

struct ModelConfig {
  int frame_dim = 16;
  int enc_dim = 32;
  int enc_layers = 2;
  int conv_kernel = 3;
  int d_model = 64;
  int dec_layers = 4;
  int n_heads = 4;
  int d_attn = 32;
  int ff_dim = 128;
  int max_len = 160;
  int sep_hidden = 64;
  int sep_layers = 2;
  int num_talkers = 2;
  int content_vocab = 32;
  std::string adapter_mode = "none";       // none | stacked | gated
  std::string tap_point = "encoder_out";   // encoder_out | after_conv2
  std::string memory_source = "separated"; // separated | encoder
  std::string prompt_variant = "sot_baseline";
  bool use_instruct = false;
  double ln_eps = 1e-5;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Full bundle: frontend, separator + CTC head, projectors, decoder with
// adapter slots, LoRA registry. Non-movable; parameter pointers are handed
// out across submodules.
struct Model {
  ModelConfig cfg;
  Vocab vocab;
  ParamStore params;
  RnnEncoder encoder;
  ReduceStack reduce;
  Linear proj;   // reduced mixture -> d_model (H_p)
  Linear projm;  // memory features -> d_model (Proj_m)
  Separator separator;
  Linear ctc_head;
  Decoder decoder;
  std::map<std::string, LoraSlot> lora_slots;
  std::map<std::string, Linear*> named_linears;
  uint64_t init_seed = 0;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Linear& linear(const std::string& name);

  // Frame-level encoder states, the two-tap reduction, and the projections.
  Tensor encode(Ctx& ctx, const Tensor& frames) const {
    return encoder.forward(ctx, frames);
  }
  // Input to the separator under cfg.tap_point.
  Tensor tap(Ctx& ctx, const Tensor& he) const;
  Tensor project_mixture(Ctx& ctx, const Tensor& hd) const {
    return proj.forward(ctx, hd);
  }
  Tensor project_memory(Ctx& ctx, const Tensor& features) const {
    return projm.forward(ctx, features);
  }
  // Concatenates talker streams along time (onset-paired branch order).
  Tensor memory_features(Ctx& ctx, const std::vector<Tensor>& streams,
                         const Tensor& he) const;
};

std::unique_ptr<Model> build_model(const ModelConfig& cfg, uint64_t seed);

// Attach fresh LoRA slots to the named linear maps.
void attach_lora_set(Model& m, const std::vector<std::string>& targets,
                     const LoraSpec& spec, uint64_t seed);
// Merge and drop every active slot.
void merge_all_lora(Model& m);

// One JSON manifest line (config, vocab, slot specs, provenance, buffer
// table) followed by raw little-endian f64 buffers in name order.
void save_checkpoint(const Model& m, const std::string& path,
                     const nlohmann::json& provenance);
struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  nlohmann::json provenance;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies buffers from a checkpoint into an already-built model (stage
// initialization). Buffers present in the checkpoint must match by name and
// shape; model buffers absent from the checkpoint keep their fresh init and
// are returned. Rejects checkpoints with unmerged LoRA slots.
std::vector<std::string> load_params_into(Model& dst,
                                          const std::string& ckpt_path,
                                          nlohmann::json* provenance_out);

}  // namespace mtasr
