#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "mtasr/model.hpp"
#include "mtasr/scoring.hpp"

namespace mtasr {

enum class Stage { sot_baseline, serctc, stage1_adapter, stage2_refine };

Stage stage_from(const std::string& s);
std::string stage_name(Stage s);

struct StagePlan {
  Stage stage = Stage::sot_baseline;
  int epochs = 30;
  double lr = 3e-3;
  double weight_decay = 0.0;
  int batch = 16;
  uint64_t seed = 1;
  std::string prompt_variant = "sot_baseline";
  bool use_instruct = false;
  std::string adapter_mode = "gated";       // stage 1
  std::string memory_source = "separated";  // stage 1
  double joint_alpha = -1.0;  // serctc: in [0,1] trains the joint objective
  bool stage0_lora = true;
  LoraSpec stage0_spec{16, 32.0, 0.1};
  LoraSpec stage2_spec{8, 4.0, 0.0};
  bool stage2_ca_only = false;
  int dev_every = 1;
  int max_new = 48;
};

void to_json(nlohmann::json& j, const StagePlan& p);
void from_json(const nlohmann::json& j, StagePlan& p);

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = -1.0;
  double token_wer = -1.0;  // negative: not measured
};

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricRow>& rows);

// Declared trainable buffer names for a stage; the freezing contract.
std::set<std::string> stage_trainable_set(const Model& m,
                                          const StagePlan& plan);
void apply_trainability(Model& m, const std::set<std::string>& trainset);

// Frozen activations precomputed once per sample for the stages that do not
// backprop into the frontend/separator.
struct SampleFeat {
  Mat he;
  Mat tap;
  Mat sep_cat;  // memory features before Proj_m
  Mat hp;
  std::vector<TokenSeq> branch_decodes;
  TokenSeq sop;
};

// Teacher-forced decoder loss for one sample (CE over target positions only,
// prefix masked out). Exposed for tests; training uses it through
// StageTrainer.
struct CeForward {
  Tensor loss;
  Tensor logits;
  PromptPlan plan;
  int t_l = 0;  // supervised positions: |sot| + 1 (stop token)
};
CeForward decoder_ce_forward(Ctx& ctx, Model& m, const MixtureSample& sample,
                             const SampleFeat* feat);

Tensor sample_loss(Ctx& ctx, Model& m, const MixtureSample& sample,
                   const StagePlan& plan, const SampleFeat* feat);

// Greedy transcription of one sample (decoder generation, or CTC branch
// decodes joined by <sc> when serctc_system is set).
TokenSeq decode_sample(Model& m, const MixtureSample& sample, int max_new,
                       bool serctc_system);

struct EvalOutcome {
  WerAccum concat;
  WerAccum per_talker;
  double mean_loss = 0.0;
  int n = 0;
};
EvalOutcome evaluate_model(Model& m, const Dataset& ds, const StagePlan& plan,
                           bool serctc_system);

struct HypRecord {
  int id = 0;
  TokenSeq hyp;
  TokenSeq ref;
  int k = 0;
  std::string condition;
};
std::vector<HypRecord> decode_dataset(Model& m, const Dataset& ds, int max_new,
                                      bool serctc_system);
void write_hyps_jsonl(const std::string& path,
                      const std::vector<HypRecord>& hyps);

// Epoch loop with feature caching and batch-parallel gradient accumulation.
// one_step() is the unit the freezing audit inspects.
class StageTrainer {
 public:
  StageTrainer(Model& m, const StagePlan& plan, const Dataset& train,
               const Dataset* dev);
  void prepare();
  double run_epoch(int epoch);
  // dev teacher-forced loss and token WER (concatenated scoring).
  std::pair<double, double> eval_dev();
  void one_step(const std::vector<int>& indices, const std::string& tag);
  const std::set<std::string>& trainable() const { return trainset_; }

 private:
  double batch_step(const std::vector<int>& indices, const std::string& tag);

  Model& m_;
  StagePlan plan_;
  const Dataset& train_;
  const Dataset* dev_;
  std::set<std::string> trainset_;
  std::vector<Param*> opt_params_;
  std::vector<SampleFeat> cache_;
  bool use_cache_ = false;
  std::unique_ptr<Adam> opt_;
};

struct StagePaths {
  std::string init_ckpt;  // empty: fresh model
  std::string out_ckpt;
  std::string metrics_csv;  // empty: skip
};

struct StageResult {
  std::vector<MetricRow> metrics;
  double final_train_loss = -1.0;
  double final_dev_wer = -1.0;
};

// Builds (or restores) the stage model, attaches the stage's LoRA slots,
// trains, merges stage-0 slots into the base weights, and saves the
// checkpoint (stage-2 slots are saved unmerged).
StageResult run_stage(const ModelConfig& base_cfg, const StagePlan& plan,
                      const Dataset& train, const Dataset* dev,
                      const StagePaths& paths,
                      std::unique_ptr<Model>* model_out = nullptr);

// ---- experiment grid ---------------------------------------------------------

struct GridCondition {
  int talkers = 2;
  double noise = 0.0;
};

struct GridConfig {
  std::string out_dir = "runs";
  std::vector<uint64_t> seeds{1, 2, 3};
  std::vector<GridCondition> conditions{{2, 0.0}, {2, 0.5}, {3, 0.0}, {3, 0.5}};
  int train_count = 2000;
  int dev_count = 24;
  int test_count = 300;
  int epochs_sot = 30, epochs_serctc = 30, epochs_stage1 = 20,
      epochs_stage2 = 10, epochs_prompt = 20;
  double lr_sot = 3e-3, lr_serctc = 3e-3, lr_stage1 = 1e-3, lr_stage2 = 5e-4;
  double weight_decay = 0.01;
  int batch = 16;
  int dev_every = 1;
  int max_new = 48;
  std::vector<std::string> systems{"sot", "stack", "gated", "refine", "serctc"};
  std::vector<std::string> prompt_variants;  // token / hybrid / acoustic
  ModelConfig model;
  GenSpec data;  // template; talkers and noise set per condition
  uint64_t data_seed = 77;
  bool use_instruct = false;
};

void to_json(nlohmann::json& j, const GridConfig& c);
void from_json(const nlohmann::json& j, GridConfig& c);

std::string condition_name(const GridCondition& c);

// Materializes the systems-by-condition comparison with shared datasets and
// shared sot/serctc checkpoints per (condition, seed).
void run_grid(const GridConfig& cfg);

}  // namespace mtasr
