#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtasr/pipeline.hpp"

using namespace mtasr;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  json j;
  is >> j;
  return j;
}

int cmd_gen(const GenSpec& spec, int count, int first_index,
            const std::string& out) {
  Dataset ds = generate_dataset(spec, count, first_index);
  write_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples (" << spec.condition()
            << ", K=" << spec.num_talkers << ") to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& stage, const std::string& config_path,
              const std::string& init_ckpt) {
  json cfg = read_json_file(config_path);
  ModelConfig mc = cfg.value("model", json::object()).get<ModelConfig>();
  StagePlan plan = cfg.value("stage", json::object()).get<StagePlan>();
  plan.stage = stage_from(stage);

  const std::string train_path = cfg.at("train_data").get<std::string>();
  Dataset train = read_dataset(train_path);
  Dataset dev;
  const Dataset* dev_p = nullptr;
  if (cfg.contains("dev_data")) {
    dev = read_dataset(cfg.at("dev_data").get<std::string>());
    dev_p = &dev;
  }
  mc.num_talkers = train.spec.num_talkers;
  mc.content_vocab = train.spec.content_vocab;
  mc.frame_dim = train.spec.frame_dim;

  StagePaths paths;
  paths.init_ckpt = init_ckpt;
  paths.out_ckpt = cfg.value("out_ckpt", std::string("out.ckpt"));
  paths.metrics_csv = cfg.value("metrics_csv", std::string("metrics.csv"));
  StageResult res = run_stage(mc, plan, train, dev_p, paths);
  std::printf("stage %s finished: train loss %.4f", stage.c_str(),
              res.final_train_loss);
  if (res.final_dev_wer >= 0) std::printf(", dev wer %.2f%%", res.final_dev_wer);
  std::printf("; checkpoint %s\n", paths.out_ckpt.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& mode, bool ctc_only, int max_new) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  Dataset ds = read_dataset(data);
  StagePlan plan;
  plan.stage = ctc_only ? Stage::serctc : Stage::sot_baseline;
  plan.prompt_variant = lc.model->cfg.prompt_variant;
  plan.use_instruct = lc.model->cfg.use_instruct;
  plan.max_new = max_new;
  EvalOutcome ev = evaluate_model(*lc.model, ds, plan, ctc_only);
  const WerAccum& a =
      mode == "per_talker" ? ev.per_talker : ev.concat;
  std::printf("samples: %d\n", ev.n);
  std::printf("mode: %s\n", mode.c_str());
  std::printf("token WER: %.4f%%  (S=%lld D=%lld I=%lld N=%lld)\n",
              a.wer_percent(), a.sub, a.del, a.ins, a.nref);
  std::printf("teacher-forced loss: %.6f\n", ev.mean_loss);
  return 0;
}

int cmd_decode(const std::string& ckpt, const std::string& data,
               const std::string& out, bool ctc_only, int max_new) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  Dataset ds = read_dataset(data);
  auto hyps = decode_dataset(*lc.model, ds, max_new, ctc_only);
  write_hyps_jsonl(out, hyps);
  std::cout << "wrote " << hyps.size() << " hypotheses to " << out << "\n";
  return 0;
}

int cmd_merge(const std::string& ckpt, const std::string& out) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  if (lc.model->lora_slots.empty()) {
    throw std::runtime_error("checkpoint has no LoRA slots to merge");
  }
  const size_t n = lc.model->lora_slots.size();
  merge_all_lora(*lc.model);
  save_checkpoint(*lc.model, out, lc.provenance);
  std::cout << "merged " << n << " LoRA slots into " << out << "\n";
  return 0;
}

int cmd_grid(const std::string& config_path) {
  GridConfig cfg = read_json_file(config_path).get<GridConfig>();
  run_grid(cfg);
  std::cout << "grid complete under " << cfg.out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& runs, const std::string& out) {
  const std::string md = make_report(runs);
  if (out.empty()) {
    std::cout << md;
  } else {
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write report to " + out);
    os << md;
    std::cout << "report written to " << out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale multi-talker ASR workbench"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic mixture dataset");
  GenSpec spec;
  int gen_count = 200;
  int gen_first = 0;
  std::string gen_out = "data.bin";
  gen->add_option("--talkers", spec.num_talkers, "talkers per mixture (1-3)");
  gen->add_option("--noise", spec.noise_std, "frame noise std (0 = clean)");
  gen->add_option("--seed", spec.seed, "dataset seed");
  gen->add_option("--count", gen_count, "number of samples");
  gen->add_option("--first-index", gen_first,
                  "first sample index (splits of one corpus use disjoint "
                  "ranges)");
  gen->add_option("--content-vocab", spec.content_vocab, "content token count");
  gen->add_option("--frame-dim", spec.frame_dim, "frame vector width");
  gen->add_option("--len-min", spec.len_min, "min tokens per talker");
  gen->add_option("--len-max", spec.len_max, "max tokens per talker");
  gen->add_option("--frames-per-token", spec.frames_per_token,
                  "frames per token");
  gen->add_option("--onset-base", spec.onset_base,
                  "stagger between consecutive talker onsets (frames)");
  gen->add_option("--onset-jitter", spec.onset_jitter,
                  "uniform onset jitter range (frames)");
  gen->add_option("--out", gen_out, "output file")->required();

  // train
  auto* train = app.add_subcommand("train", "Run one training stage");
  std::string train_stage, train_cfg, train_init;
  train->add_option("--stage", train_stage,
                    "sot_baseline | serctc | stage1_adapter | stage2_refine")
      ->required();
  train->add_option("--config", train_cfg, "run config JSON")->required();
  train->add_option("--init", train_init, "initial checkpoint");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_mode = "concatenated";
  bool eval_ctc = false;
  int eval_max_new = 48;
  eval->add_option("--ckpt", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--mode", eval_mode, "concatenated | per_talker");
  eval->add_flag("--ctc-only", eval_ctc,
                 "score greedy CTC branch decodes (no decoder)");
  eval->add_option("--max-new", eval_max_new);

  // decode
  auto* decode = app.add_subcommand("decode", "Emit hypotheses as JSONL");
  std::string dec_ckpt, dec_data, dec_out = "hyps.jsonl";
  bool dec_ctc = false;
  int dec_max_new = 48;
  decode->add_option("--ckpt", dec_ckpt)->required();
  decode->add_option("--data", dec_data)->required();
  decode->add_option("--out", dec_out)->required();
  decode->add_flag("--ctc-only", dec_ctc);
  decode->add_option("--max-new", dec_max_new);

  // merge-lora
  auto* merge = app.add_subcommand("merge-lora",
                                   "Fold LoRA slots into base weights");
  std::string merge_ckpt, merge_out;
  merge->add_option("--ckpt", merge_ckpt)->required();
  merge->add_option("--out", merge_out)->required();

  // grid
  auto* grid = app.add_subcommand("grid", "Run the ablation grid");
  std::string grid_cfg;
  grid->add_option("--config", grid_cfg, "grid config JSON")->required();

  // report
  auto* report = app.add_subcommand("report",
                                    "Aggregate run metrics into Markdown");
  std::string report_runs, report_out;
  report->add_option("--runs", report_runs)->required();
  report->add_option("--out", report_out, "output file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      spec.validate();
      return cmd_gen(spec, gen_count, gen_first, gen_out);
    }
    if (train->parsed()) return cmd_train(train_stage, train_cfg, train_init);
    if (eval->parsed()) {
      score_mode_from(eval_mode);
      return cmd_eval(eval_ckpt, eval_data, eval_mode, eval_ctc, eval_max_new);
    }
    if (decode->parsed())
      return cmd_decode(dec_ckpt, dec_data, dec_out, dec_ctc, dec_max_new);
    if (merge->parsed()) return cmd_merge(merge_ckpt, merge_out);
    if (grid->parsed()) return cmd_grid(grid_cfg);
    if (report->parsed()) return cmd_report(report_runs, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
