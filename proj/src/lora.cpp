#include "mtasr/lora.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mtasr {

LoraSlot* attach_lora(ParamStore& ps, std::map<std::string, LoraSlot>& slots,
                      Linear& target, const LoraSpec& spec, uint64_t seed) {
  const int d_out = target.d_out();
  const int d_in = target.d_in();
  if (spec.rank < 1 || spec.rank > std::min(d_in, d_out)) {
    throw std::runtime_error("lora: rank " + std::to_string(spec.rank) +
                             " exceeds min(d_in,d_out)=" +
                             std::to_string(std::min(d_in, d_out)) + " on " +
                             target.name);
  }
  if (slots.count(target.name)) {
    throw std::runtime_error("lora: slot already attached to " + target.name);
  }
  LoraSlot slot;
  slot.rank = spec.rank;
  slot.alpha = spec.alpha;
  slot.dropout = spec.dropout;
  slot.enabled = true;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  slot.a = ps.create(target.name + ".lora_a", {spec.rank, d_in},
                     init_uniform({spec.rank, d_in}, bound, seed,
                                  target.name + ".lora_a"));
  slot.b = ps.create(target.name + ".lora_b", {d_out, spec.rank},
                     init_zeros({d_out, spec.rank}));
  target.w->trainable = false;
  if (target.b) target.b->trainable = false;
  auto [it, ok] = slots.emplace(target.name, slot);
  (void)ok;
  target.lora = &it->second;
  return &it->second;
}

void merge_lora(ParamStore& ps, std::map<std::string, LoraSlot>& slots,
                Linear& target) {
  auto it = slots.find(target.name);
  if (it == slots.end()) {
    throw std::runtime_error("lora: no active slot on " + target.name +
                             " (already merged or never attached)");
  }
  LoraSlot& slot = it->second;
  const int d_out = target.d_out();
  const int d_in = target.d_in();
  const double s = slot.alpha / slot.rank;
  const auto& av = slot.a->value;  // [r x d_in]
  const auto& bv = slot.b->value;  // [d_out x r]
  auto& wv = target.w->value;      // [d_out x d_in]
  for (int o = 0; o < d_out; ++o) {
    for (int r = 0; r < slot.rank; ++r) {
      const double brs = s * bv[static_cast<size_t>(o) * slot.rank + r];
      if (brs == 0.0) continue;
      const double* arow = av.data() + static_cast<size_t>(r) * d_in;
      double* wrow = wv.data() + static_cast<size_t>(o) * d_in;
      for (int i = 0; i < d_in; ++i) wrow[i] += brs * arow[i];
    }
  }
  slot.merged = true;
  slot.enabled = false;
  ps.erase(target.name + ".lora_a");
  ps.erase(target.name + ".lora_b");
  slot.a = nullptr;
  slot.b = nullptr;
  target.lora = nullptr;
  slots.erase(it);
}

std::vector<std::string> stage_targets(LoraStage stage, int decoder_layers,
                                       bool has_adapters, bool ca_only) {
  static const char* kProj[] = {"q", "k", "v", "o"};
  std::vector<std::string> out;
  for (int l = 0; l < decoder_layers; ++l) {
    const std::string base = "dec.l" + std::to_string(l);
    const bool want_sa =
        stage == LoraStage::stage0_self_attention ||
        (stage == LoraStage::stage2_refine && !ca_only);
    if (want_sa) {
      for (const char* p : kProj) out.push_back(base + ".sa." + p);
    }
    if (stage == LoraStage::stage2_refine) {
      if (!has_adapters) {
        throw std::runtime_error(
            "stage_targets: stage 2 requires cross-attention adapters");
      }
      for (const char* p : kProj) out.push_back(base + ".ad." + p);
    }
  }
  return out;
}

}  // namespace mtasr
