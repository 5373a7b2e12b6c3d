// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Later criteria train real models; budget accordingly.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <vector>

#include "mtasr/pipeline.hpp"

using namespace mtasr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", number,
              name.c_str(), detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

void run_criterion(int number, const std::string& name,
                   const std::function<std::pair<bool, std::string>()>& fn) {
  try {
    auto [pass, detail] = fn();
    report(number, name, pass, detail);
  } catch (const std::exception& e) {
    report(number, name, false, std::string("exception: ") + e.what());
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Mat random_mat(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(rows, cols);
  for (double& v : m.data) v = d(rng);
  return m;
}

// ---- finite differences over leaf inputs --------------------------------------

using BuildFn = std::function<Tensor(Graph&, const std::vector<Tensor>&)>;

double max_rel_err(const BuildFn& build, const std::vector<Mat>& inputs,
                   double h = 1e-5) {
  auto eval = [&](const std::vector<Mat>& vals, bool with_grad,
                  std::vector<std::vector<double>>* grads) {
    Graph g;
    std::vector<Tensor> leaves;
    for (const auto& m : vals)
      leaves.push_back(g.leaf({m.rows, m.cols}, m.data, with_grad));
    Tensor loss = build(g, leaves);
    const double lv = loss.scalar();
    if (with_grad) {
      g.backward(loss);
      grads->clear();
      for (const auto& t : leaves) grads->push_back(t.grad());
    }
    return lv;
  };
  std::vector<std::vector<double>> analytic;
  eval(inputs, true, &analytic);
  double worst = 0.0;
  std::vector<Mat> work = inputs;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t j = 0; j < inputs[i].data.size(); ++j) {
      const double keep = work[i].data[j];
      work[i].data[j] = keep + h;
      const double fp = eval(work, false, nullptr);
      work[i].data[j] = keep - h;
      const double fm = eval(work, false, nullptr);
      work[i].data[j] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[i][j];
      worst = std::max(worst,
                       std::fabs(fd - an) /
                           std::max({std::fabs(fd), std::fabs(an), 1e-2}));
    }
  }
  return worst;
}

// Finite differences on a sampled subset of model parameter coordinates; the
// loss builder is rerun from scratch for each probe.
double param_fd_err(Model& m, const std::set<std::string>& trainset,
                    const std::function<double(bool)>& loss_and_grads,
                    int probes, std::mt19937_64& rng, double h = 1e-5) {
  apply_trainability(m, trainset);
  m.params.for_each([&](Param& p) { p.zero_acc(); });
  loss_and_grads(true);
  std::vector<Param*> trainable;
  m.params.for_each([&](Param& p) {
    if (p.trainable) trainable.push_back(&p);
  });
  double worst = 0.0;
  for (int probe = 0; probe < probes; ++probe) {
    Param* p = trainable[rng() % trainable.size()];
    const size_t j = rng() % p->value.size();
    const double analytic = p->acc[j];
    const double keep = p->value[j];
    p->value[j] = keep + h;
    const double fp = loss_and_grads(false);
    p->value[j] = keep - h;
    const double fm = loss_and_grads(false);
    p->value[j] = keep;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst,
                     std::fabs(fd - analytic) /
                         std::max({std::fabs(fd), std::fabs(analytic), 1e-2}));
  }
  return worst;
}

// ---- shared small-model setup ---------------------------------------------------

ModelConfig small_model(int talkers) {
  ModelConfig mc;
  mc.frame_dim = 8;
  mc.enc_dim = 12;
  mc.d_model = 16;
  mc.dec_layers = 2;
  mc.n_heads = 2;
  mc.d_attn = 8;
  mc.ff_dim = 24;
  mc.max_len = 96;
  mc.sep_hidden = 12;
  mc.content_vocab = 12;
  mc.num_talkers = talkers;
  return mc;
}

GenSpec small_spec(int talkers, double noise, uint64_t seed) {
  GenSpec spec;
  spec.num_talkers = talkers;
  spec.content_vocab = 12;
  spec.frame_dim = 8;
  spec.len_min = 2;
  spec.len_max = 4;
  spec.onset_base = 6;
  spec.onset_jitter = 4;
  spec.noise_std = noise;
  spec.seed = seed;
  return spec;
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// ---- criterion 1 -----------------------------------------------------------------

std::pair<bool, std::string> criterion_gradients() {
  const auto t0 = Clock::now();
  double worst_linear = 0.0, worst = 0.0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    worst_linear = std::max(
        worst_linear,
        max_rel_err(
            [](Graph& g, const std::vector<Tensor>& in) {
              Tensor y = matmul(in[0], in[1]);
              Tensor z = add(matmul_nt(y, in[2]), in[3]);
              return sum_all(mul(z, in[4]));
            },
            {random_mat(3, 4, rng), random_mat(4, 3, rng),
             random_mat(5, 3, rng), random_mat(3, 5, rng),
             random_mat(3, 5, rng)}));
    worst = std::max(
        worst,
        max_rel_err(
            [](Graph& g, const std::vector<Tensor>& in) {
              Tensor a = tanh_t(in[0]);
              Tensor b = silu(in[1]);
              Tensor c = softmax_lastdim(mul(a, b));
              Tensor d = layernorm(c, in[2], in[3], 1e-5);
              return cross_entropy(matmul_nt(d, in[4]), {1, 0, 2}, -1);
            },
            {random_mat(3, 6, rng), random_mat(3, 6, rng),
             random_mat(1, 6, rng), random_mat(1, 6, rng),
             random_mat(5, 6, rng)}));
    worst = std::max(worst,
                     max_rel_err(
                         [](Graph& g, const std::vector<Tensor>& in) {
                           Tensor y = causal_mha(in[0], in[1], in[2], 2);
                           return sum_all(mul(y, in[3]));
                         },
                         {random_mat(4, 6, rng), random_mat(4, 6, rng),
                          random_mat(4, 6, rng), random_mat(4, 6, rng)}));
    worst = std::max(worst, max_rel_err(
                                [](Graph& g, const std::vector<Tensor>& in) {
                                  return ctc_loss(in[0], {1, 2}, 0);
                                },
                                {random_mat(5, 4, rng)}));
    worst = std::max(
        worst,
        max_rel_err(
            [](Graph& g, const std::vector<Tensor>& in) {
              Tensor h = rnn_tanh_seq(in[0], in[1], in[2], in[3]);
              Tensor l = lstm_seq(h, in[4], in[5], in[6]);
              Tensor c = conv1d_stride2(l, in[7], in[8], 3);
              return sum_all(mul(c, in[9]));
            },
            {random_mat(5, 3, rng), random_mat(4, 3, rng, 0.4),
             random_mat(4, 4, rng, 0.4), random_mat(1, 4, rng, 0.2),
             random_mat(8, 4, rng, 0.4), random_mat(8, 2, rng, 0.4),
             random_mat(1, 8, rng, 0.2), random_mat(2, 6, rng, 0.4),
             random_mat(1, 2, rng, 0.2), random_mat(3, 2, rng)}));

    // The composed model graphs, probing parameter coordinates.
    ModelConfig mc = small_model(2);
    mc.adapter_mode = "gated";
    auto model = build_model(mc, 300 + seed);
    Dataset ds = generate_dataset(small_spec(2, 0.5, 400 + seed), 1);
    const MixtureSample& s = ds.samples[0];

    std::set<std::string> enc_sep;
    model->params.for_each([&](const Param& p) {
      if (p.name.starts_with("enc.") || p.name.starts_with("sep.") ||
          p.name.starts_with("ctc.")) {
        enc_sep.insert(p.name);
      }
    });
    auto serctc_loss = [&](bool with_grads) {
      Graph g;
      Ctx ctx(g);
      ctx.want_grad = with_grads;
      Tensor tap = model->tap(ctx, model->encode(ctx, ctx.rows_of(s.frames)));
      auto streams = model->separator.forward(ctx, tap);
      Tensor loss = serialized_ctc_loss(ctx, streams, model->ctc_head, s.refs,
                                        model->vocab.blank_id)
                        .total;
      const double lv = loss.scalar();
      if (with_grads) {
        g.backward(loss);
        model->params.for_each([&](Param& p) { p.zero_acc(); });
        ctx.collect_grads();
      }
      return lv;
    };
    worst =
        std::max(worst, param_fd_err(*model, enc_sep, serctc_loss, 12, rng));

    StagePlan ce_plan;
    ce_plan.stage = Stage::stage1_adapter;
    std::set<std::string> adapter_set = stage_trainable_set(*model, ce_plan);
    auto ce_loss = [&](bool with_grads) {
      Graph g;
      Ctx ctx(g);
      ctx.want_grad = with_grads;
      Tensor loss = decoder_ce_forward(ctx, *model, s, nullptr).loss;
      const double lv = loss.scalar();
      if (with_grads) {
        g.backward(loss);
        model->params.for_each([&](Param& p) { p.zero_acc(); });
        ctx.collect_grads();
      }
      return lv;
    };
    worst =
        std::max(worst, param_fd_err(*model, adapter_set, ce_loss, 12, rng));
  }
  const double elapsed = seconds_since(t0);
  const bool pass = worst_linear <= 1e-6 && worst <= 1e-4 && elapsed <= 120.0;
  return {pass, "linear " + fmt(worst_linear) + ", general " + fmt(worst) +
                    ", " + fmt(elapsed) + " s"};
}

// ---- criterion 2 -----------------------------------------------------------------

double ctc_brute_force(const Mat& logits, const TokenSeq& target, int blank) {
  const int t_len = logits.rows, vocab = logits.cols;
  Mat p(t_len, vocab);
  for (int t = 0; t < t_len; ++t) {
    double mx = logits.at(t, 0);
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, logits.at(t, j));
    double sum = 0;
    for (int j = 0; j < vocab; ++j) {
      p.at(t, j) = std::exp(logits.at(t, j) - mx);
      sum += p.at(t, j);
    }
    for (int j = 0; j < vocab; ++j) p.at(t, j) /= sum;
  }
  double total = 0.0;
  std::vector<int> path(static_cast<size_t>(t_len), 0);
  for (;;) {
    TokenSeq collapsed;
    int prev = -1;
    double prob = 1.0;
    for (int t = 0; t < t_len; ++t) {
      const int sidx = path[static_cast<size_t>(t)];
      prob *= p.at(t, sidx);
      if (sidx != prev && sidx != blank) collapsed.push_back(sidx);
      prev = sidx;
    }
    if (collapsed == target) total += prob;
    int pos = t_len - 1;
    while (pos >= 0 && path[static_cast<size_t>(pos)] == vocab - 1) {
      path[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++path[static_cast<size_t>(pos)];
  }
  return -std::log(total);
}

std::pair<bool, std::string> criterion_ctc_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int cases = 0;
  for (int t_len = 1; t_len <= 6; ++t_len) {
    for (int vocab = 2; vocab <= 4; ++vocab) {
      for (int tgt_len = 0; tgt_len <= 3; ++tgt_len) {
        for (int rep = 0; rep < 3; ++rep) {
          TokenSeq target;
          std::uniform_int_distribution<int> td(1, vocab - 1);
          for (int i = 0; i < tgt_len; ++i) target.push_back(td(rng));
          if (t_len < ctc_min_frames(target)) continue;
          Mat logits = random_mat(t_len, vocab, rng, 1.5);
          Graph g;
          const double got =
              ctc_loss(g.constant({t_len, vocab}, logits.data), target, 0)
                  .scalar();
          worst = std::max(
              worst, std::fabs(got - ctc_brute_force(logits, target, 0)));
          ++cases;
        }
      }
    }
  }
  Graph g;
  Mat uniform(2, 2);
  const double got =
      ctc_loss(g.constant({2, 2}, uniform.data), {1}, 0).scalar();
  worst = std::max(worst, std::fabs(got - (-std::log(0.75))));
  const double elapsed = seconds_since(t0);
  const bool pass = worst <= 1e-6 && elapsed <= 60.0;
  return {pass, std::to_string(cases) + " cases, max log-err " + fmt(worst) +
                    ", " + fmt(elapsed) + " s"};
}

// ---- criterion 3 -----------------------------------------------------------------

std::pair<bool, std::string> criterion_serialized_degeneracy() {
  std::mt19937_64 rng(31);
  ParamStore ps;
  Linear head = make_linear(ps, "ctc", 6, 4, true, 7);
  bool pass = true;
  for (int trial = 0; trial < 20; ++trial) {
    Mat s0 = random_mat(8, 4, rng);
    Mat s1 = random_mat(8, 4, rng);
    {
      Graph g;
      Ctx ctx(g);
      TalkerRefs one;
      one.talkers.push_back({{1, 2}, 0});
      Tensor st = ctx.rows_of(s0);
      auto parts = serialized_ctc_loss(ctx, {st}, head, one, 0);
      Tensor direct = ctc_loss(head.forward(ctx, st), {1, 2}, 0);
      pass = pass && parts.total.scalar() == direct.scalar();
    }
    {
      Graph g;
      Ctx ctx(g);
      TalkerRefs two;
      two.talkers.push_back({{1, 2}, 0});
      two.talkers.push_back({{3}, 5});
      auto parts = serialized_ctc_loss(ctx, {ctx.rows_of(s0), ctx.rows_of(s1)},
                                       head, two, 0);
      pass = pass && parts.total.scalar() ==
                         parts.branch[0].scalar() + parts.branch[1].scalar();
    }
  }
  return {pass, "K=1 bit equality and branch additivity over 20 trials"};
}

// ---- criterion 4 -----------------------------------------------------------------

std::pair<bool, std::string> criterion_gate_algebra() {
  std::mt19937_64 rng(41);
  double worst_algebra = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ParamStore ps;
    AdapterBlock ad;
    const int dm = 8 + 4 * (trial % 3);
    const int da = 4 + 2 * (trial % 2);
    ad.d_attn = da;
    ad.ln_in = make_layernorm(ps, "ln_in", dm);
    ad.ln_out = make_layernorm(ps, "ln_out", dm);
    ad.wq = make_linear(ps, "q", da, dm, false, 900 + trial);
    ad.wk = make_linear(ps, "k", da, dm, false, 901 + trial);
    ad.wv = make_linear(ps, "v", da, dm, false, 902 + trial);
    ad.wo = make_linear(ps, "o", dm, da, false, 903 + trial);
    ad.gamma = ps.create("gamma", {1}, init_const({1}, -2.0));
    std::uniform_real_distribution<double> gd(-5.0, 5.0);
    ad.gamma->value[0] = gd(rng);
    Mat h = random_mat(4, dm, rng), mem = random_mat(6, dm, rng);
    Graph g;
    Ctx ctx(g);
    Tensor ht = ctx.rows_of(h), mt = ctx.rows_of(mem);
    const auto out = adapter_forward(ctx, ad, ht, mt, nullptr).value();
    const auto base = stacked_xattn_forward(ctx, ad, ht, mt, nullptr).value();
    const double gate = 1.0 / (1.0 + std::exp(-ad.gamma->value[0]));
    for (size_t i = 0; i < out.size(); ++i) {
      const double want = h.data[i] + gate * (base[i] - h.data[i]);
      worst_algebra = std::max(worst_algebra, std::fabs(out[i] - want));
    }
  }

  const double fresh_gate = 1.0 / (1.0 + std::exp(2.0));
  const bool gate_ok = std::fabs(fresh_gate - 0.1192) <= 1e-4;

  ParamStore ps;
  AdapterBlock ad;
  ad.d_attn = 6;
  ad.ln_in = make_layernorm(ps, "ln_in", 12);
  ad.ln_out = make_layernorm(ps, "ln_out", 12);
  ad.wq = make_linear(ps, "q", 6, 12, false, 99);
  ad.wk = make_linear(ps, "k", 6, 12, false, 98);
  ad.wv = make_linear(ps, "v", 6, 12, false, 97);
  ad.wo = make_linear(ps, "o", 12, 6, false, 96);
  ad.gamma = ps.create("gamma", {1}, init_const({1}, -40.0));
  Mat h = random_mat(5, 12, rng), mem = random_mat(7, 12, rng);
  Graph g;
  Ctx ctx(g);
  Tensor ht = ctx.rows_of(h), mt = ctx.rows_of(mem);
  const auto out = adapter_forward(ctx, ad, ht, mt, nullptr).value();
  const auto base = stacked_xattn_forward(ctx, ad, ht, mt, nullptr).value();
  double dmax = 0.0, omax = 0.0;
  for (size_t i = 0; i < out.size(); ++i) {
    dmax = std::max(dmax, std::fabs(base[i] - h.data[i]));
    omax = std::max(omax, std::fabs(out[i] - h.data[i]));
  }
  const bool closed_ok = omax <= 1e-8 * (1.0 + dmax);
  const bool pass = worst_algebra <= 1e-6 && gate_ok && closed_ok;
  return {pass, "algebra err " + fmt(worst_algebra) + ", sigma(-2) = " +
                    fmt(fresh_gate) + ", closed-gate linf " + fmt(omax)};
}

// ---- criterion 5 -----------------------------------------------------------------

std::pair<bool, std::string> criterion_lora_merge(const fs::path& work) {
  std::mt19937_64 rng(51);
  double worst_merge = 0.0;
  for (int trial = 0; trial < 8; ++trial) {
    ParamStore ps;
    std::map<std::string, LoraSlot> slots;
    Linear lin = make_linear(ps, "lin", 12, 9, trial % 2 == 0, 70 + trial);
    LoraSlot* slot = attach_lora(ps, slots, lin, {3, 5.0, 0.1}, 80 + trial);
    std::normal_distribution<double> d(0.0, 0.3);
    for (double& v : slot->a->value) v = d(rng);
    for (double& v : slot->b->value) v = d(rng);
    std::vector<Mat> xs;
    for (int i = 0; i < 100; ++i) xs.push_back(random_mat(1, 9, rng));
    std::vector<std::vector<double>> before;
    for (const auto& x : xs) {
      Graph g;
      Ctx ctx(g);
      before.push_back(lin.forward(ctx, ctx.rows_of(x)).value());
    }
    merge_lora(ps, slots, lin);
    for (size_t i = 0; i < xs.size(); ++i) {
      Graph g;
      Ctx ctx(g);
      auto after = lin.forward(ctx, ctx.rows_of(xs[i])).value();
      for (size_t j = 0; j < after.size(); ++j)
        worst_merge =
            std::max(worst_merge, std::fabs(after[j] - before[i][j]));
    }
  }

  // Zero-init neutrality on the full model loss.
  ModelConfig mc = small_model(2);
  mc.adapter_mode = "gated";
  Dataset ds = generate_dataset(small_spec(2, 0.0, 52), 4);
  auto model = build_model(mc, 53);
  StagePlan plan;
  plan.stage = Stage::stage1_adapter;
  double pre = 0.0, post = 0.0;
  for (const auto& s : ds.samples) {
    Graph g;
    Ctx ctx(g);
    pre += sample_loss(ctx, *model, s, plan, nullptr).scalar();
  }
  attach_lora_set(
      *model,
      stage_targets(LoraStage::stage2_refine, mc.dec_layers, true, false),
      {4, 4.0, 0.1}, 54);
  for (const auto& s : ds.samples) {
    Graph g;
    Ctx ctx(g);
    post += sample_loss(ctx, *model, s, plan, nullptr).scalar();
  }
  const double neutrality = std::fabs(post - pre);

  // A short stage-2 run, then dev loss merged vs unmerged.
  Dataset train = generate_dataset(small_spec(2, 0.0, 55), 32);
  Dataset dev = generate_dataset(small_spec(2, 0.0, 55), 8, 1 << 20);
  StagePlan p1;
  p1.stage = Stage::stage1_adapter;
  p1.epochs = 2;
  p1.batch = 8;
  const fs::path s1 = work / "c5_stage1.ckpt";
  run_stage(mc, p1, train, nullptr, {"", s1.string(), ""});
  StagePlan p2;
  p2.stage = Stage::stage2_refine;
  p2.epochs = 2;
  p2.batch = 8;
  p2.lr = 1e-3;
  const fs::path s2 = work / "c5_stage2.ckpt";
  run_stage(mc, p2, train, nullptr, {s1.string(), s2.string(), ""});
  LoadedCheckpoint unmerged = load_checkpoint(s2.string());
  StagePlan eval_plan;
  eval_plan.stage = Stage::sot_baseline;
  const double dev_unmerged =
      evaluate_model(*unmerged.model, dev, eval_plan, false).mean_loss;
  merge_all_lora(*unmerged.model);
  const double dev_merged =
      evaluate_model(*unmerged.model, dev, eval_plan, false).mean_loss;
  const double rel = std::fabs(dev_merged - dev_unmerged) /
                     std::max(1e-12, std::fabs(dev_unmerged));

  const bool pass = worst_merge <= 1e-5 && neutrality <= 1e-7 && rel <= 1e-4;
  return {pass, "merge err " + fmt(worst_merge) + ", neutrality " +
                    fmt(neutrality) + ", post-merge dev rel " + fmt(rel)};
}

// ---- criterion 6 -----------------------------------------------------------------

std::map<std::string, std::vector<double>> snapshot(const Model& m) {
  std::map<std::string, std::vector<double>> out;
  m.params.for_each([&](const Param& p) { out[p.name] = p.value; });
  return out;
}

std::pair<bool, std::string> criterion_freezing() {
  Dataset ds = generate_dataset(small_spec(2, 0.0, 61), 8);
  ModelConfig base = small_model(2);
  std::ostringstream detail;
  bool pass = true;

  auto audit = [&](const std::string& label, Model& model,
                   const StagePlan& plan) {
    StageTrainer trainer(model, plan, ds, nullptr);
    trainer.prepare();
    std::vector<int> idx{0, 1, 2, 3};
    trainer.one_step(idx, "warmup");  // zero-init LoRA B picks up gradient
    auto before = snapshot(model);
    trainer.one_step(idx, "audit");
    std::set<std::string> changed;
    model.params.for_each([&](const Param& p) {
      if (before.at(p.name) != p.value) changed.insert(p.name);
    });
    const bool ok = changed == trainer.trainable();
    pass = pass && ok;
    detail << label << (ok ? " ok; " : " MISMATCH; ");
  };

  {
    StagePlan plan;
    plan.stage = Stage::sot_baseline;
    plan.lr = 1e-3;
    auto model = build_model(base, 62);
    attach_lora_set(*model,
                    stage_targets(LoraStage::stage0_self_attention,
                                  base.dec_layers, false, false),
                    plan.stage0_spec, 62);
    audit("sot_baseline", *model, plan);
  }
  {
    StagePlan plan;
    plan.stage = Stage::serctc;
    plan.lr = 1e-3;
    auto model = build_model(base, 63);
    audit("serctc", *model, plan);
  }
  {
    StagePlan plan;
    plan.stage = Stage::stage1_adapter;
    plan.lr = 1e-3;
    ModelConfig mc = base;
    mc.adapter_mode = "gated";
    auto model = build_model(mc, 64);
    audit("stage1", *model, plan);
  }
  {
    StagePlan plan;
    plan.stage = Stage::stage2_refine;
    plan.lr = 1e-3;
    ModelConfig mc = base;
    mc.adapter_mode = "gated";
    auto model = build_model(mc, 65);
    attach_lora_set(*model,
                    stage_targets(LoraStage::stage2_refine, base.dec_layers,
                                  true, false),
                    plan.stage2_spec, 65);
    audit("stage2", *model, plan);
  }
  return {pass, detail.str()};
}

// ---- criteria 7-9 ----------------------------------------------------------------

double final_test_wer(const fs::path& csv) {
  std::ifstream is(csv);
  if (!is) return -1.0;
  std::string line;
  double wer = -1.0;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string epoch, split, loss, w;
    std::getline(ss, epoch, ',');
    std::getline(ss, split, ',');
    std::getline(ss, loss, ',');
    std::getline(ss, w, ',');
    if (split == "test" && !w.empty() && w != "-") wer = std::stod(w);
  }
  return wer;
}

std::map<std::string, std::vector<double>> collect_wers(
    const fs::path& out_dir, const std::string& cond,
    const std::vector<uint64_t>& seeds,
    const std::vector<std::string>& systems) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& sys : systems) {
    for (uint64_t seed : seeds) {
      const fs::path csv = out_dir / cond / ("seed" + std::to_string(seed)) /
                           sys / "metrics.csv";
      const double wer = final_test_wer(csv);
      if (wer >= 0) out[sys].push_back(wer);
    }
  }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? -1.0 : s / static_cast<double>(v.size());
}

GridConfig acceptance_grid(const fs::path& out_dir) {
  GridConfig gc;
  gc.out_dir = out_dir.string();
  gc.seeds = {1, 2, 3};
  gc.train_count = 2000;
  gc.dev_count = 24;
  gc.test_count = 300;
  gc.epochs_sot = 12;
  gc.epochs_serctc = 22;
  gc.epochs_stage1 = 10;
  gc.epochs_stage2 = 5;
  gc.epochs_prompt = 10;
  gc.lr_sot = 3e-3;
  gc.lr_serctc = 3e-3;
  gc.lr_stage1 = 1e-3;
  gc.lr_stage2 = 5e-4;
  gc.batch = 8;
  gc.dev_every = 4;
  gc.max_new = 36;
  gc.data_seed = 77;
  return gc;
}

std::pair<bool, std::string> criterion_ablation(const fs::path& out_dir,
                                                double* sot_k3_out,
                                                double* gated_k3_out) {
  const auto t0 = Clock::now();
  GridConfig gc = acceptance_grid(out_dir);
  gc.conditions = {{3, 0.5}};
  gc.systems = {"sot", "stack", "gated", "refine", "serctc"};
  run_grid(gc);
  const double elapsed = seconds_since(t0);

  auto w = collect_wers(out_dir, "k3_noisy", gc.seeds, gc.systems);
  const double sot = mean(w["sot"]);
  const double stack = mean(w["stack"]);
  const double gated = mean(w["gated"]);
  const double refine = mean(w["refine"]);
  if (sot_k3_out) *sot_k3_out = sot;
  if (gated_k3_out) *gated_k3_out = gated;
  const bool order_ok = gated < stack && stack < sot;
  const bool refine_ok = refine <= gated + 0.5;
  const bool time_ok = elapsed <= 1800.0;
  std::ostringstream os;
  os << "mean test WER: sot " << fmt(sot) << ", stack " << fmt(stack)
     << ", gated " << fmt(gated) << ", refine " << fmt(refine) << "; "
     << fmt(elapsed) << " s";
  return {order_ok && refine_ok && time_ok, os.str()};
}

std::pair<bool, std::string> criterion_talker_gap(const fs::path& out_dir,
                                                  double sot_k3,
                                                  double gated_k3) {
  GridConfig gc = acceptance_grid(out_dir);
  gc.conditions = {{2, 0.5}};
  gc.systems = {"sot"};
  run_grid(gc);
  auto w = collect_wers(out_dir, "k2_noisy", gc.seeds, {"sot"});
  const double sot_k2 = mean(w["sot"]);
  const bool gap_ok = sot_k3 - sot_k2 >= 5.0;
  const bool rel_ok = gated_k3 <= 0.8 * sot_k3;
  std::ostringstream os;
  os << "sot K2 " << fmt(sot_k2) << " vs K3 " << fmt(sot_k3) << " (gap "
     << fmt(sot_k3 - sot_k2) << "); gated/sot K3 "
     << fmt(gated_k3 / std::max(1e-9, sot_k3));
  return {gap_ok && rel_ok, os.str()};
}

std::pair<bool, std::string> criterion_prompts(const fs::path& out_dir) {
  GridConfig gc = acceptance_grid(out_dir);
  gc.conditions = {{2, 0.0}};
  gc.systems = {};  // sot/serctc run only as prerequisites
  gc.prompt_variants = {"token", "hybrid", "acoustic"};
  run_grid(gc);
  const std::vector<std::string> systems{"prompt_token", "prompt_hybrid",
                                         "prompt_acoustic"};
  auto w = collect_wers(out_dir, "k2_clean", gc.seeds, systems);
  bool complete = true;
  for (const auto& sys : systems) {
    complete = complete && w[sys].size() == gc.seeds.size();
  }
  const double tok = mean(w["prompt_token"]);
  const double hyb = mean(w["prompt_hybrid"]);
  const double aco = mean(w["prompt_acoustic"]);
  const bool order_ok = hyb <= tok;
  std::ostringstream os;
  os << "token " << fmt(tok) << ", hybrid " << fmt(hyb) << ", acoustic "
     << fmt(aco);
  return {complete && order_ok, os.str()};
}

// ---- criterion 10 ----------------------------------------------------------------

std::pair<bool, std::string> criterion_determinism(const fs::path& work) {
  GenSpec spec = small_spec(2, 0.5, 100);
  Dataset ds = generate_dataset(spec, 60);
  const fs::path file = work / "c10.bin";
  write_dataset(ds, file.string());
  Dataset rd = read_dataset(file.string());
  bool roundtrip = rd.samples.size() == ds.samples.size();
  for (size_t i = 0; roundtrip && i < ds.samples.size(); ++i) {
    roundtrip = rd.samples[i].frames == ds.samples[i].frames &&
                rd.samples[i].sot_target == ds.samples[i].sot_target;
  }

  Dataset train = generate_dataset(small_spec(2, 0.5, 101), 24);
  Dataset dev = generate_dataset(small_spec(2, 0.5, 101), 6, 1 << 20);
  auto run_once = [&](const std::string& tag) {
    StagePlan plan;
    plan.stage = Stage::sot_baseline;
    plan.epochs = 3;
    plan.batch = 8;
    const fs::path csv = work / ("c10_" + tag + ".csv");
    run_stage(small_model(2), plan, train, &dev,
              {"", (work / ("c10_" + tag + ".ckpt")).string(), csv.string()});
    std::ifstream is(csv, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
  };
  const bool metrics_same = run_once("a") == run_once("b");

  Vocab v = Vocab::make(24);
  std::mt19937_64 rng(102);
  bool sot_ok = true;
  for (int trial = 0; trial < 1000 && sot_ok; ++trial) {
    TalkerRefs refs;
    const int k = 1 + static_cast<int>(rng() % 3);
    std::set<int> onsets;
    while (static_cast<int>(onsets.size()) < k)
      onsets.insert(static_cast<int>(rng() % 64));
    for (int onset : onsets) {
      TalkerRef t;
      t.onset = onset;
      const int len = 1 + static_cast<int>(rng() % 8);
      for (int i = 0; i < len; ++i)
        t.tokens.push_back(v.content_start +
                           static_cast<int>(rng() % v.content_size()));
      refs.talkers.push_back(std::move(t));
    }
    auto segs = split_sot(build_sot_target(refs, v), v);
    sot_ok = segs.size() == refs.talkers.size();
    for (size_t i = 0; sot_ok && i < segs.size(); ++i)
      sot_ok = segs[i] == refs.talkers[i].tokens;
  }
  const bool pass = roundtrip && metrics_same && sot_ok;
  std::ostringstream os;
  os << "dataset roundtrip " << (roundtrip ? "ok" : "FAIL") << ", metrics "
     << (metrics_same ? "identical" : "DIFFER") << ", sot roundtrip "
     << (sot_ok ? "ok" : "FAIL");
  return {pass, os.str()};
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "mtasr_acceptance";
  fs::create_directories(work);
  const fs::path runs = fs::current_path() / "acceptance_runs";
  fs::create_directories(runs);

  std::printf("acceptance suite (grid runs under %s)\n", runs.string().c_str());

  run_criterion(1, "gradient suite (f64 finite differences)",
                criterion_gradients);
  run_criterion(2, "CTC enumeration oracle", criterion_ctc_oracle);
  run_criterion(3, "serialized CTC degeneracy and additivity",
                criterion_serialized_degeneracy);
  run_criterion(4, "adapter gate algebra", criterion_gate_algebra);
  run_criterion(5, "LoRA merge equivalence",
                [&] { return criterion_lora_merge(work); });
  run_criterion(6, "freezing audits", criterion_freezing);

  double sot_k3 = -1.0, gated_k3 = -1.0;
  run_criterion(7, "directional ablation (K=3 noisy)",
                [&] { return criterion_ablation(runs, &sot_k3, &gated_k3); });
  run_criterion(8, "two-vs-three talker gap",
                [&] { return criterion_talker_gap(runs, sot_k3, gated_k3); });
  run_criterion(9, "prompt-variant harness (K=2 clean)",
                [&] { return criterion_prompts(runs); });
  run_criterion(10, "determinism and round trips",
                [&] { return criterion_determinism(work); });

  if (g_failures == 0) {
    std::printf("acceptance: all criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criterion(s) failed\n", g_failures);
  return 1;
}
