#include "dtm/train.hpp"

#include <cmath>
#include <sstream>

namespace dtm {

std::string_view optimizer_name(Optimizer o) noexcept {
  return o == Optimizer::Sgd ? "sgd_decoupled_wd" : "adamw";
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) throw ArgumentError("learning rate and weight decay must be >= 0");
  if (batch_size == 0 || seq_len < 2) throw ArgumentError("batch size must be positive and seq_len >= 2");
}

namespace {

// Gradient of y = x * r * g through one RMS-normalized row.
void rms_backward(std::span<const double> x, double inv_rms, std::span<const double> gain, std::span<const double> dy,
                  std::span<double> dx_acc, std::span<double> dgain_acc) {
  const std::size_t d = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dgain_acc[i] += dy[i] * x[i] * inv_rms;
    s += dy[i] * gain[i] * x[i];
  }
  const double c = inv_rms * inv_rms * inv_rms * s / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) dx_acc[i] += inv_rms * dy[i] * gain[i] - c * x[i];
}

// Cross-entropy terms of one sequence; fills dlogits scaled by `weight`.
double sequence_loss(const Matrix& logits, std::span<const Token> tokens, double weight, Matrix* dlogits) {
  double total = 0.0;
  for (std::size_t r = 0; r + 1 < tokens.size(); ++r) {
    const auto lp = log_softmax(logits.row(r));
    total -= lp[tokens[r + 1]];
    if (dlogits) {
      auto drow = dlogits->row(r);
      for (std::size_t j = 0; j < lp.size(); ++j) drow[j] = std::exp(lp[j]) * weight;
      drow[tokens[r + 1]] -= weight;
    }
  }
  return total;
}

std::size_t prediction_count(std::span<const TokenSequence> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) {
    if (s.size() < 2) throw ArgumentError("training sequences need at least two tokens");
    n += s.size() - 1;
  }
  if (n == 0) throw ArgumentError("empty training batch");
  return n;
}

void backward(const FrozenModel& model, std::span<const Token> tokens, const ForwardTrace& tr, const Matrix& dlogits,
              ModelWeights& g) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  matmul_at_acc(tr.u_final, dlogits, g.unembedding);
  const Matrix duf = matmul_bt(dlogits, w.unembedding);
  Matrix dx(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    rms_backward(tr.x_final.row(t), tr.inv_rms_final[t], w.final_norm, duf.row(t), dx.row(t), g.final_norm);
  }

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& lt = tr.layers[l];
    const auto& lw = w.layers[l];
    auto& lg = g.layers[l];

    // MLP: x_next = h + act * Wd, act = silu(u2 Wg) * (u2 Wu)
    Matrix dh_res = dx;
    matmul_at_acc(lt.act, dx, lg[ComponentKind::MlpDown]);
    const Matrix dact = matmul_bt(dx, lw[ComponentKind::MlpDown]);
    Matrix dgate(T, cfg.d_ff), dup(T, cfg.d_ff);
    {
      const auto gp = lt.gate_pre.values();
      const auto up = lt.up.values();
      const auto da = dact.values();
      auto dgv = dgate.values();
      auto duv = dup.values();
      for (std::size_t i = 0; i < gp.size(); ++i) {
        const double sg = sigmoid(gp[i]);
        const double silu = gp[i] * sg;
        duv[i] = da[i] * silu;
        dgv[i] = da[i] * up[i] * sg * (1.0 + gp[i] * (1.0 - sg));
      }
    }
    matmul_at_acc(lt.u_mlp, dgate, lg[ComponentKind::MlpGate]);
    matmul_at_acc(lt.u_mlp, dup, lg[ComponentKind::MlpUp]);
    Matrix du2 = matmul_bt(dgate, lw[ComponentKind::MlpGate]);
    {
      const Matrix du2b = matmul_bt(dup, lw[ComponentKind::MlpUp]);
      auto a = du2.values();
      const auto b = du2b.values();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    }
    for (std::size_t t = 0; t < T; ++t) {
      rms_backward(lt.h.row(t), lt.inv_rms_mlp[t], lw.mlp_norm, du2.row(t), dh_res.row(t), lg.mlp_norm);
    }

    // Attention: h = x_in + attn * Wo
    Matrix dx_in = dh_res;
    matmul_at_acc(lt.attn, dh_res, lg[ComponentKind::AttnDense]);
    const Matrix dattn = matmul_bt(dh_res, lw[ComponentKind::AttnDense]);
    Matrix dq(T, d), dk(T, d), dv(T, d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = h * dh;
      const Matrix& P = lt.probs[h];
      for (std::size_t t = 0; t < T; ++t) {
        const auto dout = dattn.row(t).subspan(off, dh);
        double inner = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          dp[s] = dot(dout, lt.v.row(s).subspan(off, dh));
          inner += dp[s] * P(t, s);
          axpy(P(t, s), dout, dv.row(s).subspan(off, dh));
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = P(t, s) * (dp[s] - inner) * scale;
          if (ds == 0.0) continue;
          axpy(ds, lt.k.row(s).subspan(off, dh), dq.row(t).subspan(off, dh));
          axpy(ds, lt.q.row(t).subspan(off, dh), dk.row(s).subspan(off, dh));
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      apply_rotary_inverse(dq.row(t), model.rope_cos(t), model.rope_sin(t), cfg.n_heads, dh);
      apply_rotary_inverse(dk.row(t), model.rope_cos(t), model.rope_sin(t), cfg.n_heads, dh);
    }
    matmul_at_acc(lt.u_attn, dq, lg[ComponentKind::AttnQuery]);
    matmul_at_acc(lt.u_attn, dk, lg[ComponentKind::AttnKey]);
    matmul_at_acc(lt.u_attn, dv, lg[ComponentKind::AttnValue]);
    Matrix du1 = matmul_bt(dq, lw[ComponentKind::AttnQuery]);
    for (const auto& [grad, kind] : {std::pair{&dk, ComponentKind::AttnKey}, std::pair{&dv, ComponentKind::AttnValue}}) {
      const Matrix part = matmul_bt(*grad, lw[kind]);
      auto a = du1.values();
      const auto b = part.values();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    }
    for (std::size_t t = 0; t < T; ++t) {
      rms_backward(lt.x_in.row(t), lt.inv_rms_attn[t], lw.attn_norm, du1.row(t), dx_in.row(t), lg.attn_norm);
    }
    dx = std::move(dx_in);
  }

  for (std::size_t t = 0; t < T; ++t) axpy(1.0, dx.row(t), g.embedding.row(tokens[t]));
}

}  // namespace

double batch_loss(const FrozenModel& model, std::span<const TokenSequence> batch) {
  const std::size_t count = prediction_count(batch);
  double total = 0.0;
  for (const auto& seq : batch) total += sequence_loss(forward(model, seq), seq, 0.0, nullptr);
  return total / static_cast<double>(count);
}

LossAndGrads loss_and_grads(const ToyModel& model, std::span<const TokenSequence> batch, bool apply_masks) {
  const std::size_t count = prediction_count(batch);
  const double weight = 1.0 / static_cast<double>(count);
  const FrozenModel frozen = model.freeze(apply_masks);
  LossAndGrads out{0.0, ModelWeights::zeros(model.config())};
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& seq = batch[b];
    ForwardTrace trace;
    const Matrix logits = forward(frozen, seq, &trace);
    Matrix dlogits(logits.rows(), logits.cols());
    const double seq_total = sequence_loss(logits, seq, weight, &dlogits);
    if (!std::isfinite(seq_total)) {
      std::ostringstream msg;
      msg << "non-finite loss " << seq_total << " on batch element " << b << " (length " << seq.size() << ")";
      throw NumericalError(msg.str());
    }
    total += seq_total;
    backward(frozen, seq, trace, dlogits, out.grads);
  }
  out.loss = total / static_cast<double>(count);
  if (apply_masks) {
    for (const auto& id : model.components()) model.mask(id).apply(out.grads.component(id));
  }
  return out;
}

// ---- loss traces and data ----

std::size_t LossTrace::count(Phase p) const noexcept {
  std::size_t n = 0;
  for (const auto& r : records) n += (r.phase == p);
  return n;
}

std::string LossTrace::to_csv() const {
  std::ostringstream out;
  out << "step,phase,loss\n";
  out.precision(17);
  for (const auto& r : records) {
    out << r.step << ',' << (r.phase == Phase::Masked ? "masked" : "dense") << ',' << r.loss << '\n';
  }
  return out.str();
}

BatchSampler::BatchSampler(std::span<const Token> stream, std::size_t seq_len, std::uint64_t seed)
    : stream_(stream), seq_len_(seq_len), rng_(seed) {
  if (stream.size() < seq_len) throw ArgumentError("token stream shorter than training window");
}

std::vector<TokenSequence> BatchSampler::next(std::size_t batch_size) {
  std::uniform_int_distribution<std::size_t> offset(0, stream_.size() - seq_len_);
  std::vector<TokenSequence> out(batch_size);
  for (auto& seq : out) {
    const std::size_t o = offset(rng_);
    seq.assign(stream_.begin() + static_cast<std::ptrdiff_t>(o),
               stream_.begin() + static_cast<std::ptrdiff_t>(o + seq_len_));
  }
  return out;
}

// ---- optimization ----

Trainer::Trainer(TrainConfig cfg, std::size_t) : cfg_(cfg) { cfg_.validate(); }

double Trainer::step(ToyModel& model, std::span<const TokenSequence> batch, bool apply_masks) {
  auto [loss, grads] = loss_and_grads(model, batch, apply_masks);
  ++t_;
  const double lr = cfg_.learning_rate;
  const double decay = 1.0 - lr * cfg_.weight_decay;
  auto& w = model.weights();

  if (cfg_.optimizer == Optimizer::Sgd) {
    std::vector<std::span<const double>> gs;
    grads.for_each_tensor([&](const std::string&, std::span<const double> s) { gs.push_back(s); });
    std::size_t i = 0;
    w.for_each_tensor([&](const std::string& name, std::span<double> s) {
      const auto gsp = gs[i++];
      const bool decays = name.find("norm") == std::string::npos;
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = (decays ? s[k] * decay : s[k]) - lr * gsp[k];
    });
  } else {
    constexpr double b1 = 0.9, b2 = 0.99, eps = 1e-8;
    if (m_.layers.empty()) {
      m_ = ModelWeights::zeros(model.config());
      v_ = ModelWeights::zeros(model.config());
    }
    std::vector<std::span<const double>> gs;
    std::vector<std::span<double>> ms, vs;
    grads.for_each_tensor([&](const std::string&, std::span<const double> s) { gs.push_back(s); });
    m_.for_each_tensor([&](const std::string&, std::span<double> s) { ms.push_back(s); });
    v_.for_each_tensor([&](const std::string&, std::span<double> s) { vs.push_back(s); });
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    std::size_t i = 0;
    w.for_each_tensor([&](const std::string& name, std::span<double> s) {
      const auto gsp = gs[i];
      auto m = ms[i];
      auto v = vs[i];
      ++i;
      const bool decays = name.find("norm") == std::string::npos;
      for (std::size_t k = 0; k < s.size(); ++k) {
        m[k] = b1 * m[k] + (1 - b1) * gsp[k];
        v[k] = b2 * v[k] + (1 - b2) * gsp[k] * gsp[k];
        const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        s[k] = (decays ? s[k] * decay : s[k]) - lr * update;
      }
    });
  }
  if (apply_masks) model.apply_masks_to_raw();
  return loss;
}

LossTrace train_masked(ToyModel& model, const TrainConfig& cfg, BatchSampler& data) {
  cfg.validate();
  Trainer trainer(cfg);
  LossTrace trace;
  model.apply_masks_to_raw();
  std::size_t step = 0;
  for (std::size_t i = 0; i < cfg.masked_steps; ++i, ++step) {
    const auto batch = data.next(cfg.batch_size);
    trace.records.push_back({step, Phase::Masked, trainer.step(model, batch, true)});
  }
  for (std::size_t i = 0; i < cfg.dense_steps; ++i, ++step) {
    const auto batch = data.next(cfg.batch_size);
    trace.records.push_back({step, Phase::Dense, trainer.step(model, batch, false)});
  }
  return trace;
}

LossTrace train(ToyModel& model, const TrainConfig& cfg, BatchSampler& data, std::size_t steps) {
  cfg.validate();
  Trainer trainer(cfg);
  LossTrace trace;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = data.next(cfg.batch_size);
    trace.records.push_back({step, Phase::Masked, trainer.step(model, batch, true)});
  }
  return trace;
}

}  // namespace dtm
