#include "mtasr/separator.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace mtasr {

namespace {

inline double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Tensor lstm_seq(const Tensor& x, const Tensor& wx, const Tensor& wh,
                const Tensor& b) {
  Graph* g = x.graph();
  const int t_len = x.rows(), din = x.cols();
  const int hid4 = wx.rows();
  if (hid4 % 4 != 0) throw std::runtime_error("lstm_seq: gate dim not 4H");
  const int hid = hid4 / 4;
  if (wx.cols() != din || wh.rows() != hid4 || wh.cols() != hid ||
      b.numel() != hid4) {
    throw std::runtime_error("lstm_seq: inconsistent shapes " +
                             shape_str(x.shape()) + ", " +
                             shape_str(wx.shape()) + ", " +
                             shape_str(wh.shape()));
  }
  const bool rg = x.requires_grad() || wx.requires_grad() ||
                  wh.requires_grad() || b.requires_grad();
  Tensor out = g->alloc({t_len, hid}, rg);
  auto& h = g->node(out.id()).value;

  std::vector<double> xw(static_cast<size_t>(t_len) * hid4);
  kernels::gemm_nt(x.value().data(), wx.value().data(), xw.data(), t_len, din,
                   hid4, false);

  // Saved for backward: per step, the activated gates (i,f,g,o) and the cell.
  auto aux = std::make_shared<std::vector<double>>(
      static_cast<size_t>(t_len) * hid * 5);
  const auto& whv = wh.value();
  const auto& bv = b.value();
  std::vector<double> pre(hid4);
  for (int t = 0; t < t_len; ++t) {
    const double* hprev =
        t > 0 ? h.data() + static_cast<size_t>(t - 1) * hid : nullptr;
    for (int j = 0; j < hid4; ++j) {
      double s = xw[static_cast<size_t>(t) * hid4 + j] + bv[j];
      if (hprev) {
        const double* wrow = whv.data() + static_cast<size_t>(j) * hid;
        for (int i = 0; i < hid; ++i) s += wrow[i] * hprev[i];
      }
      pre[j] = s;
    }
    double* a = aux->data() + static_cast<size_t>(t) * hid * 5;
    const double* cprev =
        t > 0 ? aux->data() + static_cast<size_t>(t - 1) * hid * 5 + 4 * hid
              : nullptr;
    double* ht = h.data() + static_cast<size_t>(t) * hid;
    for (int j = 0; j < hid; ++j) {
      const double iv = sigm(pre[j]);
      const double fv = sigm(pre[hid + j]);
      const double gv = std::tanh(pre[2 * hid + j]);
      const double ov = sigm(pre[3 * hid + j]);
      const double cv = fv * (cprev ? cprev[j] : 0.0) + iv * gv;
      a[j] = iv;
      a[hid + j] = fv;
      a[2 * hid + j] = gv;
      a[3 * hid + j] = ov;
      a[4 * hid + j] = cv;
      ht[j] = ov * std::tanh(cv);
    }
  }

  if (rg) {
    const int xid = x.id(), wxid = wx.id(), whid = wh.id(), bid = b.id(),
              oid = out.id();
    g->set_backward(out, [xid, wxid, whid, bid, oid, aux, t_len, din, hid,
                          hid4](Graph& gr) {
      const auto& hval = gr.node(oid).value;
      const auto& go = gr.node(oid).grad;
      auto& nx = gr.node(xid);
      auto& nwx = gr.node(wxid);
      auto& nwh = gr.node(whid);
      auto& nb = gr.node(bid);
      const auto& whv = nwh.value;
      std::vector<double> dh(hid, 0.0), dc(hid, 0.0), dpre(hid4);
      for (int t = t_len - 1; t >= 0; --t) {
        const double* a = aux->data() + static_cast<size_t>(t) * hid * 5;
        const double* cprev =
            t > 0 ? aux->data() + static_cast<size_t>(t - 1) * hid * 5 + 4 * hid
                  : nullptr;
        for (int j = 0; j < hid; ++j) {
          const double iv = a[j], fv = a[hid + j], gv = a[2 * hid + j],
                       ov = a[3 * hid + j], cv = a[4 * hid + j];
          const double tc = std::tanh(cv);
          const double dhj = go[static_cast<size_t>(t) * hid + j] + dh[j];
          const double dov = dhj * tc;
          double dcj = dc[j] + dhj * ov * (1.0 - tc * tc);
          const double div = dcj * gv;
          const double dgv = dcj * iv;
          const double dfv = dcj * (cprev ? cprev[j] : 0.0);
          dc[j] = dcj * fv;
          dpre[j] = div * iv * (1.0 - iv);
          dpre[hid + j] = dfv * fv * (1.0 - fv);
          dpre[2 * hid + j] = dgv * (1.0 - gv * gv);
          dpre[3 * hid + j] = dov * ov * (1.0 - ov);
        }
        if (nb.requires_grad) {
          for (int j = 0; j < hid4; ++j) nb.grad[j] += dpre[j];
        }
        const double* hprev =
            t > 0 ? hval.data() + static_cast<size_t>(t - 1) * hid : nullptr;
        if (nwx.requires_grad) {
          const double* xt = nx.value.data() + static_cast<size_t>(t) * din;
          for (int j = 0; j < hid4; ++j) {
            double* row = nwx.grad.data() + static_cast<size_t>(j) * din;
            for (int i = 0; i < din; ++i) row[i] += dpre[j] * xt[i];
          }
        }
        if (nwh.requires_grad && hprev) {
          for (int j = 0; j < hid4; ++j) {
            double* row = nwh.grad.data() + static_cast<size_t>(j) * hid;
            for (int i = 0; i < hid; ++i) row[i] += dpre[j] * hprev[i];
          }
        }
        if (nx.requires_grad) {
          double* dxt = nx.grad.data() + static_cast<size_t>(t) * din;
          const auto& wxv = nwx.value;
          for (int j = 0; j < hid4; ++j) {
            const double* row = wxv.data() + static_cast<size_t>(j) * din;
            for (int i = 0; i < din; ++i) dxt[i] += dpre[j] * row[i];
          }
        }
        std::fill(dh.begin(), dh.end(), 0.0);
        if (t > 0) {
          for (int j = 0; j < hid4; ++j) {
            const double* row = whv.data() + static_cast<size_t>(j) * hid;
            for (int i = 0; i < hid; ++i) dh[i] += dpre[j] * row[i];
          }
        }
      }
    });
  }
  return out;
}

std::vector<Tensor> Separator::forward(Ctx& ctx, const Tensor& h) const {
  Tensor u = h;
  for (const auto& l : lstm) {
    u = lstm_seq(u, ctx.use(*l.wx), ctx.use(*l.wh), ctx.use(*l.b));
  }
  Tensor normed = ln.forward(ctx, u);
  std::vector<Tensor> streams;
  streams.reserve(heads.size());
  for (const auto& head : heads) {
    streams.push_back(relu(head.forward(ctx, normed)));
  }
  return streams;
}

Separator make_separator(ParamStore& ps, const SeparatorConfig& cfg,
                         uint64_t seed) {
  Separator sep;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "sep.lstm.l" + std::to_string(l);
    const int din = l == 0 ? cfg.in_dim : cfg.hidden;
    const int h4 = 4 * cfg.hidden;
    const double bx = 1.0 / std::sqrt(static_cast<double>(din));
    const double bh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    Separator::LstmLayer lay;
    lay.wx = ps.create(base + ".wx", {h4, din},
                       init_uniform({h4, din}, bx, seed, base + ".wx"));
    lay.wh = ps.create(base + ".wh", {h4, cfg.hidden},
                       init_uniform({h4, cfg.hidden}, bh, seed, base + ".wh"));
    // Forget gate biased open.
    auto bias = init_zeros({h4});
    for (int j = cfg.hidden; j < 2 * cfg.hidden; ++j) bias[j] = 1.0;
    lay.b = ps.create(base + ".b", {h4}, std::move(bias));
    sep.lstm.push_back(lay);
  }
  sep.ln = make_layernorm(ps, "sep.ln", cfg.hidden);
  for (int k = 0; k < cfg.num_talkers; ++k) {
    sep.heads.push_back(make_linear(ps, "sep.head" + std::to_string(k),
                                    cfg.out_dim, cfg.hidden, true, seed));
  }
  return sep;
}

int ctc_min_frames(const TokenSeq& target) {
  int repeats = 0;
  for (size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++repeats;
  }
  return static_cast<int>(target.size()) + repeats;
}

Tensor ctc_loss(const Tensor& logits, const TokenSeq& target, int blank_id) {
  Graph* g = logits.graph();
  const int t_len = logits.rows();
  const int vocab = logits.cols();
  if (blank_id < 0 || blank_id >= vocab) {
    throw std::runtime_error("ctc_loss: blank id outside vocabulary");
  }
  for (int id : target) {
    if (id == blank_id) {
      throw std::runtime_error("ctc_loss: blank inside target");
    }
    if (id < 0 || id >= vocab) {
      throw std::runtime_error("ctc_loss: target id " + std::to_string(id) +
                               " outside vocabulary");
    }
  }
  if (t_len < ctc_min_frames(target)) {
    throw std::runtime_error(
        "ctc_loss: target unalignable (" + std::to_string(t_len) +
        " frames for a target needing " +
        std::to_string(ctc_min_frames(target)) + ")");
  }
  Tensor logp = log_softmax_lastdim(logits);

  if (target.empty()) {
    // Only the all-blank path remains.
    return scale(sum_all(gather_cols(logp, {blank_id})), -1.0);
  }

  const int len = static_cast<int>(target.size());
  const int ext = 2 * len + 1;
  std::vector<int> labels(ext, blank_id);
  for (int i = 0; i < len; ++i) labels[2 * i + 1] = target[i];

  Tensor emit = gather_cols(logp, labels);  // [T x ext]

  // Allowed-skip mask: s-2 -> s only between distinct non-blank labels.
  std::vector<double> skip_mask(ext, kNegInf);
  for (int s = 2; s < ext; ++s) {
    if (labels[s] != blank_id && labels[s] != labels[s - 2]) skip_mask[s] = 0.0;
  }
  Tensor skip_bias = g->constant({1, ext}, skip_mask);

  std::vector<double> init(ext, kNegInf);
  init[0] = 0.0;
  init[1] = 0.0;
  Tensor alpha = add(slice_rows(emit, 0, 1), g->constant({1, ext}, init));
  for (int t = 1; t < t_len; ++t) {
    Tensor stay = alpha;
    Tensor step1 = shift_down(alpha, 1);
    Tensor step2 = add(shift_down(alpha, 2), skip_bias);
    alpha = add(slice_rows(emit, t, t + 1),
                logaddexp(logaddexp(stay, step1), step2));
  }
  Tensor tail = logaddexp(pick(alpha, ext - 1), pick(alpha, ext - 2));
  return scale(tail, -1.0);
}

SerCtcLossParts serialized_ctc_loss(Ctx& ctx,
                                    const std::vector<Tensor>& streams,
                                    const Linear& ctc_head,
                                    const TalkerRefs& refs, int blank_id) {
  const int k_talkers = refs.num_talkers();
  if (static_cast<int>(streams.size()) < k_talkers) {
    throw std::runtime_error("serialized_ctc_loss: fewer streams than talkers");
  }
  for (int k = 1; k < k_talkers; ++k) {
    if (refs.talkers[k].onset <= refs.talkers[k - 1].onset) {
      throw std::runtime_error(
          "serialized_ctc_loss: talkers not in ascending onset order");
    }
  }
  SerCtcLossParts parts;
  for (int k = 0; k < k_talkers; ++k) {
    Tensor logits = ctc_head.forward(ctx, streams[k]);
    try {
      parts.branch.push_back(
          ctc_loss(logits, refs.talkers[k].tokens, blank_id));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("serialized ctc branch " + std::to_string(k) +
                               ": " + e.what());
    }
    parts.total = k == 0 ? parts.branch[0]
                         : add(parts.total, parts.branch[static_cast<size_t>(k)]);
  }
  return parts;
}

Tensor joint_loss(const Tensor& l_serctc, const Tensor& l_sot, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::runtime_error("joint_loss: alpha must be in [0,1], got " +
                             std::to_string(alpha));
  }
  return add(scale(l_serctc, alpha), scale(l_sot, 1.0 - alpha));
}

TokenSeq greedy_decode(const Mat& logits, int blank_id) {
  TokenSeq out;
  int prev = -1;
  for (int t = 0; t < logits.rows; ++t) {
    int best = 0;
    double bestv = logits.at(t, 0);
    for (int j = 1; j < logits.cols; ++j) {
      if (logits.at(t, j) > bestv) {
        bestv = logits.at(t, j);
        best = j;
      }
    }
    if (best != prev && best != blank_id) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace mtasr
