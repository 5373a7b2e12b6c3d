#include "mtasr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtasr {

using nlohmann::json;

Stage stage_from(const std::string& s) {
  if (s == "sot_baseline") return Stage::sot_baseline;
  if (s == "serctc") return Stage::serctc;
  if (s == "stage1_adapter" || s == "stage1") return Stage::stage1_adapter;
  if (s == "stage2_refine" || s == "stage2") return Stage::stage2_refine;
  throw std::runtime_error("unknown stage: " + s);
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::sot_baseline: return "sot_baseline";
    case Stage::serctc: return "serctc";
    case Stage::stage1_adapter: return "stage1_adapter";
    case Stage::stage2_refine: return "stage2_refine";
  }
  return "?";
}

void to_json(json& j, const StagePlan& p) {
  j = json{{"stage", stage_name(p.stage)},
           {"epochs", p.epochs},
           {"lr", p.lr},
           {"weight_decay", p.weight_decay},
           {"batch", p.batch},
           {"seed", p.seed},
           {"prompt_variant", p.prompt_variant},
           {"use_instruct", p.use_instruct},
           {"adapter_mode", p.adapter_mode},
           {"memory_source", p.memory_source},
           {"joint_alpha", p.joint_alpha},
           {"stage0_lora", p.stage0_lora},
           {"stage0_rank", p.stage0_spec.rank},
           {"stage0_alpha", p.stage0_spec.alpha},
           {"stage0_dropout", p.stage0_spec.dropout},
           {"stage2_rank", p.stage2_spec.rank},
           {"stage2_alpha", p.stage2_spec.alpha},
           {"stage2_dropout", p.stage2_spec.dropout},
           {"stage2_ca_only", p.stage2_ca_only},
           {"dev_every", p.dev_every},
           {"max_new", p.max_new}};
}

void from_json(const json& j, StagePlan& p) {
  StagePlan d;
  p.stage = stage_from(j.value("stage", stage_name(d.stage)));
  p.epochs = j.value("epochs", d.epochs);
  p.lr = j.value("lr", d.lr);
  p.weight_decay = j.value("weight_decay", d.weight_decay);
  p.batch = j.value("batch", d.batch);
  p.seed = j.value("seed", d.seed);
  p.prompt_variant = j.value("prompt_variant", d.prompt_variant);
  p.use_instruct = j.value("use_instruct", d.use_instruct);
  p.adapter_mode = j.value("adapter_mode", d.adapter_mode);
  p.memory_source = j.value("memory_source", d.memory_source);
  p.joint_alpha = j.value("joint_alpha", d.joint_alpha);
  p.stage0_lora = j.value("stage0_lora", d.stage0_lora);
  p.stage0_spec.rank = j.value("stage0_rank", d.stage0_spec.rank);
  p.stage0_spec.alpha = j.value("stage0_alpha", d.stage0_spec.alpha);
  p.stage0_spec.dropout = j.value("stage0_dropout", d.stage0_spec.dropout);
  p.stage2_spec.rank = j.value("stage2_rank", d.stage2_spec.rank);
  p.stage2_spec.alpha = j.value("stage2_alpha", d.stage2_spec.alpha);
  p.stage2_spec.dropout = j.value("stage2_dropout", d.stage2_spec.dropout);
  p.stage2_ca_only = j.value("stage2_ca_only", d.stage2_ca_only);
  p.dev_every = j.value("dev_every", d.dev_every);
  p.max_new = j.value("max_new", d.max_new);
}

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write metrics to " + path);
  os << "epoch,split,loss,token_wer\n";
  char buf[80];
  for (const auto& r : rows) {
    os << r.epoch << "," << r.split << ",";
    std::snprintf(buf, sizeof buf, "%.6f", r.loss);
    os << buf << ",";
    if (r.token_wer >= 0) {
      std::snprintf(buf, sizeof buf, "%.4f", r.token_wer);
      os << buf;
    } else {
      os << "-";
    }
    os << "\n";
  }
}

// ---- trainable sets -----------------------------------------------------------

namespace {

bool is_sa_base(const std::string& name) {
  return name.find(".sa.") != std::string::npos &&
         name.find(".lora_") == std::string::npos;
}

bool is_lora_buf(const std::string& name) {
  return name.ends_with(".lora_a") || name.ends_with(".lora_b");
}

void add_decoder_side(const Model& m, const StagePlan& plan,
                      std::set<std::string>& out) {
  m.params.for_each([&](const Param& p) {
    const std::string& n = p.name;
    if (!n.starts_with("dec.")) return;
    if (n.find(".ad.") != std::string::npos) return;  // adapters have stages
    if (is_sa_base(n)) {
      if (!plan.stage0_lora) out.insert(n);
      return;
    }
    if (is_lora_buf(n)) {
      if (plan.stage0_lora) out.insert(n);
      return;
    }
    out.insert(n);
  });
}

void add_prefix(const Model& m, const std::string& prefix,
                std::set<std::string>& out) {
  m.params.for_each([&](const Param& p) {
    if (p.name.starts_with(prefix)) out.insert(p.name);
  });
}

}  // namespace

std::set<std::string> stage_trainable_set(const Model& m,
                                          const StagePlan& plan) {
  std::set<std::string> out;
  const PromptVariant variant = prompt_variant_from(plan.prompt_variant);
  switch (plan.stage) {
    case Stage::sot_baseline:
      add_decoder_side(m, plan, out);
      switch (variant) {
        case PromptVariant::sot_baseline:
          add_prefix(m, "enc.", out);
          add_prefix(m, "red.", out);
          add_prefix(m, "proj.", out);
          break;
        case PromptVariant::hybrid:
          add_prefix(m, "red.", out);
          add_prefix(m, "proj.", out);
          break;
        case PromptVariant::token:
          break;
        case PromptVariant::acoustic:
          add_prefix(m, "projm.", out);
          break;
      }
      break;
    case Stage::serctc:
      add_prefix(m, "sep.", out);
      add_prefix(m, "ctc.", out);
      if (plan.joint_alpha >= 0.0 && plan.joint_alpha <= 1.0) {
        add_decoder_side(m, plan, out);
        add_prefix(m, "red.", out);
        add_prefix(m, "proj.", out);
      }
      break;
    case Stage::stage1_adapter:
      m.params.for_each([&](const Param& p) {
        if (p.name.find(".ad.") != std::string::npos && !is_lora_buf(p.name)) {
          out.insert(p.name);
        }
      });
      add_prefix(m, "projm.", out);
      break;
    case Stage::stage2_refine:
      m.params.for_each([&](const Param& p) {
        if (is_lora_buf(p.name)) out.insert(p.name);
      });
      break;
  }
  return out;
}

void apply_trainability(Model& m, const std::set<std::string>& trainset) {
  m.params.for_each([&](Param& p) { p.trainable = trainset.count(p.name) > 0; });
}

// ---- per-sample forward --------------------------------------------------------

namespace {

Mat to_mat(const Tensor& t) {
  Mat out(t.rows(), t.cols());
  out.data = t.value();
  return out;
}

struct FeatNeeds {
  bool he = false, tap = false, hp = false, mem = false, sop = false;
  bool any() const { return he || tap || hp || mem || sop; }
};

FeatNeeds stage_needs(const StagePlan& plan) {
  FeatNeeds n;
  const PromptVariant variant = prompt_variant_from(plan.prompt_variant);
  switch (plan.stage) {
    case Stage::sot_baseline:
      switch (variant) {
        case PromptVariant::sot_baseline:
          break;  // everything trains live
        case PromptVariant::token:
          n.sop = true;
          break;
        case PromptVariant::hybrid:
          n.he = true;  // reduce/proj keep training
          n.sop = true;
          break;
        case PromptVariant::acoustic:
          n.mem = true;
          break;
      }
      break;
    case Stage::serctc:
      n.tap = true;
      if (plan.joint_alpha >= 0.0) n.he = true;
      break;
    case Stage::stage1_adapter:
    case Stage::stage2_refine:
      n.mem = true;
      if (variant == PromptVariant::sot_baseline ||
          variant == PromptVariant::hybrid) {
        n.hp = true;
      }
      if (variant == PromptVariant::token || variant == PromptVariant::hybrid) {
        n.sop = true;
      }
      break;
  }
  return n;
}

SampleFeat compute_feat(Model& m, const MixtureSample& s,
                        const FeatNeeds& needs) {
  SampleFeat feat;
  Graph g;
  Ctx ctx(g);
  Tensor frames = ctx.rows_of(s.frames);
  Tensor he = m.encode(ctx, frames);
  if (needs.he) feat.he = to_mat(he);
  Tensor tap_t;
  const bool want_streams = needs.mem || needs.sop;
  if (needs.tap || want_streams) {
    tap_t = m.tap(ctx, he);
    if (needs.tap) feat.tap = to_mat(tap_t);
  }
  if (needs.hp) {
    auto [h2, hd] = m.reduce.forward(ctx, he);
    feat.hp = to_mat(m.project_mixture(ctx, hd));
  }
  if (want_streams) {
    std::vector<Tensor> streams = m.separator.forward(ctx, tap_t);
    if (needs.mem) {
      feat.sep_cat = to_mat(m.memory_features(ctx, streams, he));
    }
    if (needs.sop) {
      for (const auto& st : streams) {
        Mat logits = to_mat(m.ctc_head.forward(ctx, st));
        feat.branch_decodes.push_back(greedy_decode(logits, m.vocab.blank_id));
      }
      feat.sop = build_sop_tokens(feat.branch_decodes);
    }
  }
  return feat;
}

Tensor memory_tensor(Ctx& ctx, Model& m, const MixtureSample& s,
                     const SampleFeat* feat, Tensor* he_cache) {
  Tensor mf;
  if (feat && feat->sep_cat.rows > 0) {
    mf = ctx.rows_of(feat->sep_cat);
  } else {
    Tensor he = he_cache && he_cache->valid()
                    ? *he_cache
                    : m.encode(ctx, ctx.rows_of(s.frames));
    if (he_cache) *he_cache = he;
    std::vector<Tensor> streams = m.separator.forward(ctx, m.tap(ctx, he));
    mf = m.memory_features(ctx, streams, he);
  }
  return m.project_memory(ctx, mf);
}

}  // namespace

CeForward decoder_ce_forward(Ctx& ctx, Model& m, const MixtureSample& sample,
                             const SampleFeat* feat) {
  const Vocab& v = m.vocab;
  const PromptVariant variant = prompt_variant_from(m.cfg.prompt_variant);
  PrefixParts parts;
  Tensor he_cache;

  auto live_he = [&]() -> Tensor {
    if (!he_cache.valid()) {
      if (feat && feat->he.rows > 0) {
        he_cache = ctx.rows_of(feat->he);
      } else {
        he_cache = m.encode(ctx, ctx.rows_of(sample.frames));
      }
    }
    return he_cache;
  };

  if (variant == PromptVariant::sot_baseline ||
      variant == PromptVariant::hybrid) {
    if (feat && feat->hp.rows > 0) {
      parts.hp = ctx.rows_of(feat->hp);
    } else {
      auto [h2, hd] = m.reduce.forward(ctx, live_he());
      parts.hp = m.project_mixture(ctx, hd);
    }
  }
  if (variant == PromptVariant::token || variant == PromptVariant::hybrid) {
    TokenSeq sop;
    if (feat) {
      sop = feat->sop;
    } else {
      std::vector<Tensor> streams =
          m.separator.forward(ctx, m.tap(ctx, live_he()));
      std::vector<TokenSeq> decodes;
      for (const auto& st : streams) {
        decodes.push_back(
            greedy_decode(to_mat(m.ctc_head.forward(ctx, st)), v.blank_id));
      }
      sop = build_sop_tokens(decodes);
    }
    if (!sop.empty()) parts.tok = m.decoder.embed(ctx, sop);
  }
  if (variant == PromptVariant::acoustic) {
    Tensor mf;
    if (feat && feat->sep_cat.rows > 0) {
      mf = ctx.rows_of(feat->sep_cat);
    } else {
      std::vector<Tensor> streams =
          m.separator.forward(ctx, m.tap(ctx, live_he()));
      mf = m.memory_features(ctx, streams, live_he());
    }
    parts.aco = m.project_memory(ctx, mf);
  }

  Tensor memory;
  const Tensor* memp = nullptr;
  if (m.cfg.adapter_mode != "none") {
    memory = memory_tensor(ctx, m, sample, feat, &he_cache);
    memp = &memory;
  }

  const int start =
      m.cfg.use_instruct ? v.instruct_ids.at("bos_response") : v.bos_id;
  const int stop =
      m.cfg.use_instruct ? v.instruct_ids.at("eos_response") : v.eos_id;
  TokenSeq tgt_in;
  tgt_in.push_back(start);
  tgt_in.insert(tgt_in.end(), sample.sot_target.begin(),
                sample.sot_target.end());
  parts.tgt = m.decoder.embed(ctx, tgt_in);

  BuiltPrefix built = build_prefix(
      variant, m.cfg.use_instruct, parts, v,
      [&](const TokenSeq& ids) { return m.decoder.embed(ctx, ids); });
  Tensor logits = m.decoder.logits(ctx, built.prefix, memp, nullptr);

  const int total = built.prefix.rows();
  const int t_tgt = static_cast<int>(tgt_in.size());
  std::vector<int> targets(static_cast<size_t>(total), -1);
  const auto& sot = sample.sot_target;
  for (size_t j = 0; j < sot.size(); ++j) {
    targets[static_cast<size_t>(total - t_tgt) + j] = sot[j];
  }
  targets[static_cast<size_t>(total) - 1] = stop;

  CeForward out;
  out.loss = cross_entropy(logits, targets, -1);
  out.logits = logits;
  out.plan = built.plan;
  out.t_l = t_tgt;
  return out;
}

Tensor sample_loss(Ctx& ctx, Model& m, const MixtureSample& sample,
                   const StagePlan& plan, const SampleFeat* feat) {
  if (plan.stage == Stage::serctc) {
    Tensor tap_t;
    if (feat && feat->tap.rows > 0) {
      tap_t = ctx.rows_of(feat->tap);
    } else {
      tap_t = m.tap(ctx, m.encode(ctx, ctx.rows_of(sample.frames)));
    }
    std::vector<Tensor> streams = m.separator.forward(ctx, tap_t);
    SerCtcLossParts parts = serialized_ctc_loss(ctx, streams, m.ctc_head,
                                                sample.refs, m.vocab.blank_id);
    if (plan.joint_alpha >= 0.0) {
      Tensor ce = decoder_ce_forward(ctx, m, sample, feat).loss;
      return joint_loss(parts.total, ce, plan.joint_alpha);
    }
    return parts.total;
  }
  return decoder_ce_forward(ctx, m, sample, feat).loss;
}

TokenSeq decode_sample(Model& m, const MixtureSample& sample, int max_new,
                       bool serctc_system) {
  Graph g;
  Ctx ctx(g);
  const Vocab& v = m.vocab;
  if (serctc_system) {
    Tensor he = m.encode(ctx, ctx.rows_of(sample.frames));
    std::vector<Tensor> streams = m.separator.forward(ctx, m.tap(ctx, he));
    TokenSeq hyp;
    for (size_t k = 0; k < streams.size(); ++k) {
      if (k) hyp.push_back(v.sc_id);
      TokenSeq d =
          greedy_decode(to_mat(m.ctc_head.forward(ctx, streams[k])), v.blank_id);
      hyp.insert(hyp.end(), d.begin(), d.end());
    }
    return hyp;
  }

  const PromptVariant variant = prompt_variant_from(m.cfg.prompt_variant);
  PrefixParts parts;
  Tensor he_cache;
  auto live_he = [&]() -> Tensor {
    if (!he_cache.valid()) he_cache = m.encode(ctx, ctx.rows_of(sample.frames));
    return he_cache;
  };
  if (variant == PromptVariant::sot_baseline ||
      variant == PromptVariant::hybrid) {
    auto [h2, hd] = m.reduce.forward(ctx, live_he());
    parts.hp = m.project_mixture(ctx, hd);
  }
  if (variant == PromptVariant::token || variant == PromptVariant::hybrid) {
    std::vector<Tensor> streams =
        m.separator.forward(ctx, m.tap(ctx, live_he()));
    std::vector<TokenSeq> decodes;
    for (const auto& st : streams) {
      decodes.push_back(
          greedy_decode(to_mat(m.ctc_head.forward(ctx, st)), v.blank_id));
    }
    TokenSeq sop = build_sop_tokens(decodes);
    if (!sop.empty()) parts.tok = m.decoder.embed(ctx, sop);
  }
  if (variant == PromptVariant::acoustic) {
    std::vector<Tensor> streams =
        m.separator.forward(ctx, m.tap(ctx, live_he()));
    parts.aco = m.project_memory(ctx, m.memory_features(ctx, streams, live_he()));
  }

  Mat memory_mat;
  const Mat* memp = nullptr;
  if (m.cfg.adapter_mode != "none") {
    memory_mat = to_mat(memory_tensor(ctx, m, sample, nullptr, &he_cache));
    memp = &memory_mat;
  }

  const int start =
      m.cfg.use_instruct ? v.instruct_ids.at("bos_response") : v.bos_id;
  const int stop =
      m.cfg.use_instruct ? v.instruct_ids.at("eos_response") : v.eos_id;
  parts.tgt = m.decoder.embed(ctx, {start});
  BuiltPrefix built = build_prefix(
      variant, m.cfg.use_instruct, parts, v,
      [&](const TokenSeq& ids) { return m.decoder.embed(ctx, ids); });
  const Mat prefix = to_mat(built.prefix);
  return generate(m.decoder, prefix, memp, nullptr, max_new, stop);
}

EvalOutcome evaluate_model(Model& m, const Dataset& ds, const StagePlan& plan,
                           bool serctc_system) {
  const int n = static_cast<int>(ds.samples.size());
  std::vector<WerAccum> concat(static_cast<size_t>(n));
  std::vector<WerAccum> pertalker(static_cast<size_t>(n));
  std::vector<double> losses(static_cast<size_t>(n), 0.0);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const auto& s = ds.samples[static_cast<size_t>(i)];
    TokenSeq hyp = decode_sample(m, s, plan.max_new, serctc_system);
    concat[static_cast<size_t>(i)] =
        score_sot(s.refs, hyp, m.vocab, ScoreMode::concatenated);
    pertalker[static_cast<size_t>(i)] =
        score_sot(s.refs, hyp, m.vocab, ScoreMode::per_talker);
    Graph g;
    Ctx ctx(g);
    losses[static_cast<size_t>(i)] =
        sample_loss(ctx, m, s, plan, nullptr).scalar();
  }
  EvalOutcome out;
  out.n = n;
  for (int i = 0; i < n; ++i) {
    out.concat.add(concat[static_cast<size_t>(i)]);
    out.per_talker.add(pertalker[static_cast<size_t>(i)]);
    out.mean_loss += losses[static_cast<size_t>(i)];
  }
  if (n > 0) out.mean_loss /= n;
  return out;
}

std::vector<HypRecord> decode_dataset(Model& m, const Dataset& ds, int max_new,
                                      bool serctc_system) {
  const int n = static_cast<int>(ds.samples.size());
  std::vector<HypRecord> out(static_cast<size_t>(n));
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const auto& s = ds.samples[static_cast<size_t>(i)];
    HypRecord r;
    r.id = s.id;
    r.hyp = decode_sample(m, s, max_new, serctc_system);
    r.ref = s.sot_target;
    r.k = s.refs.num_talkers();
    r.condition = s.condition;
    out[static_cast<size_t>(i)] = std::move(r);
  }
  return out;
}

void write_hyps_jsonl(const std::string& path,
                      const std::vector<HypRecord>& hyps) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write hypotheses to " + path);
  for (const auto& h : hyps) {
    json j{{"sample_id", h.id},
           {"hyp_ids", h.hyp},
           {"ref_ids", h.ref},
           {"K", h.k},
           {"condition", h.condition}};
    os << j.dump() << "\n";
  }
}

// ---- trainer -------------------------------------------------------------------

StageTrainer::StageTrainer(Model& m, const StagePlan& plan,
                           const Dataset& train, const Dataset* dev)
    : m_(m), plan_(plan), train_(train), dev_(dev) {}

void StageTrainer::prepare() {
  if (train_.vocab.size != m_.vocab.size) {
    throw std::runtime_error("dataset vocabulary does not match the model");
  }
  trainset_ = stage_trainable_set(m_, plan_);
  apply_trainability(m_, trainset_);
  opt_params_.clear();
  m_.params.for_each([&](Param& p) {
    if (p.trainable) opt_params_.push_back(&p);
  });
  AdamConfig ac;
  ac.lr = plan_.lr;
  ac.weight_decay = plan_.weight_decay;
  opt_ = std::make_unique<Adam>(ac);

  const FeatNeeds needs = stage_needs(plan_);
  use_cache_ = needs.any();
  if (use_cache_) {
    const int n = static_cast<int>(train_.samples.size());
    cache_.assign(static_cast<size_t>(n), SampleFeat{});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      cache_[static_cast<size_t>(i)] =
          compute_feat(m_, train_.samples[static_cast<size_t>(i)], needs);
    }
  }
}

double StageTrainer::batch_step(const std::vector<int>& indices,
                                const std::string& tag) {
  using Sink = std::unordered_map<Param*, std::vector<double>>;
  int nthreads = 1;
#ifdef _OPENMP
  nthreads = omp_get_max_threads();
#endif
  const int nb = static_cast<int>(indices.size());
  std::vector<Sink> sinks(static_cast<size_t>(nthreads));
  std::vector<double> partial(static_cast<size_t>(nthreads), 0.0);
#pragma omp parallel num_threads(nthreads)
  {
    int tid = 0;
#ifdef _OPENMP
    tid = omp_get_thread_num();
#endif
    const int chunk = (nb + nthreads - 1) / nthreads;
    const int lo = tid * chunk;
    const int hi = std::min(nb, lo + chunk);
    for (int i = lo; i < hi; ++i) {
      const int idx = indices[static_cast<size_t>(i)];
      const auto& s = train_.samples[static_cast<size_t>(idx)];
      Graph g;
      Ctx ctx(g);
      ctx.want_grad = true;
      ctx.train = true;
      auto rng = seeded_rng(plan_.seed, "drop/" + tag + "/" +
                                            std::to_string(s.id));
      ctx.rng = &rng;
      Tensor loss = sample_loss(ctx, m_, s, plan_,
                                use_cache_ ? &cache_[static_cast<size_t>(idx)]
                                           : nullptr);
      const double lv = loss.scalar();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("non-finite loss at sample " +
                                 std::to_string(s.id) + " (" + tag + ")");
      }
      g.backward(loss);
      ctx.collect_grads_into(sinks[static_cast<size_t>(tid)]);
      partial[static_cast<size_t>(tid)] += lv;
    }
  }
  double loss_sum = 0.0;
  for (int t = 0; t < nthreads; ++t) {
    loss_sum += partial[static_cast<size_t>(t)];
    for (auto& [p, buf] : sinks[static_cast<size_t>(t)]) {
      for (size_t i = 0; i < buf.size(); ++i) p->acc[i] += buf[i];
    }
  }
  opt_->step(opt_params_, 1.0 / nb);
  return loss_sum / nb;
}

double StageTrainer::run_epoch(int epoch) {
  const int n = static_cast<int>(train_.samples.size());
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded_rng(plan_.seed, "shuffle/" + std::to_string(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  double loss_sum = 0.0;
  int batches = 0;
  for (int lo = 0; lo < n; lo += plan_.batch) {
    const int hi = std::min(n, lo + plan_.batch);
    std::vector<int> idx(order.begin() + lo, order.begin() + hi);
    loss_sum += batch_step(idx, "e" + std::to_string(epoch));
    ++batches;
  }
  return batches ? loss_sum / batches : 0.0;
}

std::pair<double, double> StageTrainer::eval_dev() {
  if (!dev_) return {-1.0, -1.0};
  EvalOutcome out = evaluate_model(m_, *dev_, plan_,
                                   plan_.stage == Stage::serctc);
  return {out.mean_loss, out.concat.wer_percent()};
}

void StageTrainer::one_step(const std::vector<int>& indices,
                            const std::string& tag) {
  batch_step(indices, tag);
}

// ---- run_stage -----------------------------------------------------------------

namespace {

ModelConfig stage_model_config(ModelConfig cfg, const StagePlan& plan) {
  switch (plan.stage) {
    case Stage::sot_baseline:
      cfg.adapter_mode = "none";
      cfg.prompt_variant = plan.prompt_variant;
      cfg.use_instruct = plan.use_instruct;
      break;
    case Stage::serctc:
      cfg.adapter_mode = "none";
      cfg.prompt_variant = plan.prompt_variant;
      cfg.use_instruct = plan.use_instruct;
      break;
    case Stage::stage1_adapter:
      cfg.adapter_mode = plan.adapter_mode;
      cfg.memory_source = plan.memory_source;
      cfg.prompt_variant = plan.prompt_variant;
      cfg.use_instruct = plan.use_instruct;
      break;
    case Stage::stage2_refine:
      // Architecture and prompt wiring come from the stage-1 checkpoint.
      break;
  }
  return cfg;
}

ModelConfig read_ckpt_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(is, line)) {
    throw std::runtime_error("truncated checkpoint " + path);
  }
  return json::parse(line).at("model_config").get<ModelConfig>();
}

}  // namespace

StageResult run_stage(const ModelConfig& base_cfg, const StagePlan& plan,
                      const Dataset& train, const Dataset* dev,
                      const StagePaths& paths,
                      std::unique_ptr<Model>* model_out) {
  ModelConfig cfg = base_cfg;
  if (!paths.init_ckpt.empty()) cfg = read_ckpt_config(paths.init_ckpt);
  cfg = stage_model_config(cfg, plan);

  auto model = build_model(cfg, plan.seed);
  json provenance = json::array();
  if (!paths.init_ckpt.empty()) {
    load_params_into(*model, paths.init_ckpt, &provenance);
  }

  if (plan.stage == Stage::sot_baseline && plan.stage0_lora) {
    attach_lora_set(*model,
                    stage_targets(LoraStage::stage0_self_attention,
                                  cfg.dec_layers, false, false),
                    plan.stage0_spec, plan.seed);
  }
  if (plan.stage == Stage::stage2_refine) {
    attach_lora_set(*model,
                    stage_targets(LoraStage::stage2_refine, cfg.dec_layers,
                                  cfg.adapter_mode != "none",
                                  plan.stage2_ca_only),
                    plan.stage2_spec, plan.seed);
  }

  StageResult result;
  StageTrainer trainer(*model, plan, train, dev);
  trainer.prepare();
  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    const double loss = trainer.run_epoch(epoch);
    result.metrics.push_back({epoch, "train", loss, -1.0});
    result.final_train_loss = loss;
    if (dev && (epoch % plan.dev_every == 0 || epoch == plan.epochs)) {
      auto [dev_loss, dev_wer] = trainer.eval_dev();
      result.metrics.push_back({epoch, "dev", dev_loss, dev_wer});
      result.final_dev_wer = dev_wer;
    }
  }

  // Stage-0 self-attention updates fold into the base weights before the
  // checkpoint is written; stage-2 slots are saved unmerged.
  if (plan.stage == Stage::sot_baseline && !model->lora_slots.empty()) {
    merge_all_lora(*model);
  }

  json entry;
  to_json(entry, plan);
  entry["train_samples"] = train.samples.size();
  entry["condition"] = train.spec.condition();
  provenance.push_back(entry);
  if (!paths.out_ckpt.empty()) {
    save_checkpoint(*model, paths.out_ckpt, provenance);
  }
  if (!paths.metrics_csv.empty()) {
    write_metrics_csv(paths.metrics_csv, result.metrics);
  }
  if (model_out) *model_out = std::move(model);
  return result;
}

// ---- grid ----------------------------------------------------------------------

void to_json(json& j, const GridConfig& c) {
  json conds = json::array();
  for (const auto& gc : c.conditions) {
    conds.push_back(json{{"talkers", gc.talkers}, {"noise", gc.noise}});
  }
  j = json{{"out_dir", c.out_dir},
           {"seeds", c.seeds},
           {"conditions", conds},
           {"train_count", c.train_count},
           {"dev_count", c.dev_count},
           {"test_count", c.test_count},
           {"epochs_sot", c.epochs_sot},
           {"epochs_serctc", c.epochs_serctc},
           {"epochs_stage1", c.epochs_stage1},
           {"epochs_stage2", c.epochs_stage2},
           {"epochs_prompt", c.epochs_prompt},
           {"lr_sot", c.lr_sot},
           {"lr_serctc", c.lr_serctc},
           {"lr_stage1", c.lr_stage1},
           {"lr_stage2", c.lr_stage2},
           {"weight_decay", c.weight_decay},
           {"batch", c.batch},
           {"dev_every", c.dev_every},
           {"max_new", c.max_new},
           {"systems", c.systems},
           {"prompt_variants", c.prompt_variants},
           {"model", c.model},
           {"data", c.data},
           {"data_seed", c.data_seed},
           {"use_instruct", c.use_instruct}};
}

void from_json(const json& j, GridConfig& c) {
  GridConfig d;
  c.out_dir = j.value("out_dir", d.out_dir);
  c.seeds = j.value("seeds", d.seeds);
  if (j.contains("conditions")) {
    c.conditions.clear();
    for (const auto& e : j.at("conditions")) {
      c.conditions.push_back(
          {e.at("talkers").get<int>(), e.at("noise").get<double>()});
    }
  }
  c.train_count = j.value("train_count", d.train_count);
  c.dev_count = j.value("dev_count", d.dev_count);
  c.test_count = j.value("test_count", d.test_count);
  c.epochs_sot = j.value("epochs_sot", d.epochs_sot);
  c.epochs_serctc = j.value("epochs_serctc", d.epochs_serctc);
  c.epochs_stage1 = j.value("epochs_stage1", d.epochs_stage1);
  c.epochs_stage2 = j.value("epochs_stage2", d.epochs_stage2);
  c.epochs_prompt = j.value("epochs_prompt", d.epochs_prompt);
  c.lr_sot = j.value("lr_sot", d.lr_sot);
  c.lr_serctc = j.value("lr_serctc", d.lr_serctc);
  c.lr_stage1 = j.value("lr_stage1", d.lr_stage1);
  c.lr_stage2 = j.value("lr_stage2", d.lr_stage2);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch = j.value("batch", d.batch);
  c.dev_every = j.value("dev_every", d.dev_every);
  c.max_new = j.value("max_new", d.max_new);
  c.systems = j.value("systems", d.systems);
  c.prompt_variants = j.value("prompt_variants", d.prompt_variants);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("data")) c.data = j.at("data").get<GenSpec>();
  c.data_seed = j.value("data_seed", d.data_seed);
  c.use_instruct = j.value("use_instruct", d.use_instruct);
}

std::string condition_name(const GridCondition& c) {
  return "k" + std::to_string(c.talkers) +
         (c.noise > 0.0 ? "_noisy" : "_clean");
}

namespace {

namespace fs = std::filesystem;

Dataset load_or_generate(const GridConfig& cfg, const GridCondition& cond,
                         const std::string& split, int count) {
  const std::string cname = condition_name(cond);
  const fs::path dir = fs::path(cfg.out_dir) / "data";
  fs::create_directories(dir);
  const fs::path file = dir / (cname + "." + split + ".bin");
  if (fs::exists(file)) return read_dataset(file.string());
  GenSpec spec = cfg.data;
  spec.num_talkers = cond.talkers;
  spec.noise_std = cond.noise;
  // One seed per condition: every split shares the codebook and draws a
  // disjoint sample-index range of the same corpus.
  spec.seed = mix_seed(cfg.data_seed, cname);
  int first = 0;
  if (split == "dev") first = 1 << 20;
  if (split == "test") first = 2 << 20;
  Dataset ds = generate_dataset(spec, count, first);
  write_dataset(ds, file.string());
  return ds;
}

void append_test_row(const fs::path& run_dir, int epoch, const EvalOutcome& ev) {
  std::ofstream os(run_dir / "metrics.csv", std::ios::app);
  char buf[80];
  std::snprintf(buf, sizeof buf, "%.6f,%.4f", ev.mean_loss,
                ev.concat.wer_percent());
  os << epoch << ",test," << buf << "\n";
}

struct RunContext {
  const GridConfig& cfg;
  GridCondition cond;
  uint64_t seed;
  Dataset train, dev, test;
  fs::path seed_dir;
};

fs::path system_dir(const RunContext& rc, const std::string& system) {
  fs::path p = rc.seed_dir / system;
  fs::create_directories(p);
  return p;
}

bool wants(const GridConfig& cfg, const std::string& system) {
  return std::find(cfg.systems.begin(), cfg.systems.end(), system) !=
         cfg.systems.end();
}

}  // namespace

void run_grid(const GridConfig& cfg) {
  for (const auto& cond : cfg.conditions) {
    const std::string cname = condition_name(cond);
    Dataset train = load_or_generate(cfg, cond, "train", cfg.train_count);
    Dataset dev = load_or_generate(cfg, cond, "dev", cfg.dev_count);
    Dataset test = load_or_generate(cfg, cond, "test", cfg.test_count);

    ModelConfig mc = cfg.model;
    mc.num_talkers = cond.talkers;
    mc.content_vocab = cfg.data.content_vocab;

    for (uint64_t seed : cfg.seeds) {
      RunContext rc{cfg, cond, seed, std::move(train), std::move(dev),
                    std::move(test), {}};
      rc.seed_dir =
          fs::path(cfg.out_dir) / cname / ("seed" + std::to_string(seed));
      fs::create_directories(rc.seed_dir);

      auto base_plan = [&](Stage st, int epochs, double lr) {
        StagePlan p;
        p.stage = st;
        p.epochs = epochs;
        p.lr = lr;
        p.weight_decay = cfg.weight_decay;
        p.batch = cfg.batch;
        p.seed = seed;
        p.use_instruct = cfg.use_instruct;
        p.dev_every = cfg.dev_every;
        p.max_new = cfg.max_new;
        return p;
      };

      const bool need_sot = wants(cfg, "sot") || wants(cfg, "stack") ||
                            wants(cfg, "gated") || wants(cfg, "refine") ||
                            wants(cfg, "serctc") || !cfg.prompt_variants.empty();
      fs::path sot_ckpt, serctc_ckpt, gated_ckpt;

      if (need_sot) {
        const fs::path dir = system_dir(rc, "sot");
        sot_ckpt = dir / "ckpt.bin";
        StagePlan p = base_plan(Stage::sot_baseline, cfg.epochs_sot, cfg.lr_sot);
        std::unique_ptr<Model> model;
        StageResult res = run_stage(mc, p, rc.train, &rc.dev,
                                    {"", sot_ckpt.string(),
                                     (dir / "metrics.csv").string()},
                                    &model);
        if (wants(cfg, "sot")) {
          EvalOutcome ev = evaluate_model(*model, rc.test, p, false);
          append_test_row(dir, p.epochs, ev);
        }
        std::cout << "[grid] " << cname << " seed " << seed
                  << " sot done (dev wer " << res.final_dev_wer << ")\n";
      }

      const bool need_serctc = wants(cfg, "stack") || wants(cfg, "gated") ||
                               wants(cfg, "refine") || wants(cfg, "serctc") ||
                               !cfg.prompt_variants.empty();
      if (need_serctc) {
        const fs::path dir = system_dir(rc, "serctc");
        serctc_ckpt = dir / "ckpt.bin";
        StagePlan p =
            base_plan(Stage::serctc, cfg.epochs_serctc, cfg.lr_serctc);
        std::unique_ptr<Model> model;
        run_stage(mc, p, rc.train, &rc.dev,
                  {sot_ckpt.string(), serctc_ckpt.string(),
                   (dir / "metrics.csv").string()},
                  &model);
        if (wants(cfg, "serctc")) {
          EvalOutcome ev = evaluate_model(*model, rc.test, p, true);
          append_test_row(dir, p.epochs, ev);
        }
        std::cout << "[grid] " << cname << " seed " << seed << " serctc done\n";
      }

      auto run_stage1 = [&](const std::string& system,
                            const std::string& mode) -> fs::path {
        const fs::path dir = system_dir(rc, system);
        const fs::path ckpt = dir / "ckpt.bin";
        StagePlan p =
            base_plan(Stage::stage1_adapter, cfg.epochs_stage1, cfg.lr_stage1);
        p.adapter_mode = mode;
        std::unique_ptr<Model> model;
        run_stage(mc, p, rc.train, &rc.dev,
                  {serctc_ckpt.string(), ckpt.string(),
                   (dir / "metrics.csv").string()},
                  &model);
        EvalOutcome ev = evaluate_model(*model, rc.test, p, false);
        append_test_row(dir, p.epochs, ev);
        std::cout << "[grid] " << cname << " seed " << seed << " " << system
                  << " done (test wer " << ev.concat.wer_percent() << ")\n";
        return ckpt;
      };

      if (wants(cfg, "stack")) run_stage1("stack", "stacked");
      if (wants(cfg, "gated") || wants(cfg, "refine")) {
        gated_ckpt = run_stage1("gated", "gated");
      }

      if (wants(cfg, "refine")) {
        const fs::path dir = system_dir(rc, "refine");
        const fs::path ckpt = dir / "ckpt.bin";
        StagePlan p =
            base_plan(Stage::stage2_refine, cfg.epochs_stage2, cfg.lr_stage2);
        std::unique_ptr<Model> model;
        run_stage(mc, p, rc.train, &rc.dev,
                  {gated_ckpt.string(), ckpt.string(),
                   (dir / "metrics.csv").string()},
                  &model);
        // Inference uses the merged weights.
        merge_all_lora(*model);
        save_checkpoint(*model, (dir / "merged.bin").string(), json::array());
        EvalOutcome ev = evaluate_model(*model, rc.test, p, false);
        append_test_row(dir, p.epochs, ev);
        std::cout << "[grid] " << cname << " seed " << seed
                  << " refine done (test wer " << ev.concat.wer_percent()
                  << ")\n";
      }

      for (const auto& variant : cfg.prompt_variants) {
        const std::string system = "prompt_" + variant;
        const fs::path dir = system_dir(rc, system);
        StagePlan p = base_plan(Stage::sot_baseline, cfg.epochs_prompt,
                                cfg.lr_sot);
        p.prompt_variant = variant;
        std::unique_ptr<Model> model;
        run_stage(mc, p, rc.train, &rc.dev,
                  {serctc_ckpt.string(), (dir / "ckpt.bin").string(),
                   (dir / "metrics.csv").string()},
                  &model);
        EvalOutcome ev = evaluate_model(*model, rc.test, p, false);
        append_test_row(dir, p.epochs, ev);
        std::cout << "[grid] " << cname << " seed " << seed << " " << system
                  << " done (test wer " << ev.concat.wer_percent() << ")\n";
      }

      // Hand the datasets back for the next seed.
      train = std::move(rc.train);
      dev = std::move(rc.dev);
      test = std::move(rc.test);
    }
  }
}

}  // namespace mtasr
