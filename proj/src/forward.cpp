#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dtm/model.hpp"

namespace dtm {

double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

double rms_normalize(std::span<const double> x, std::span<const double> gain, std::span<double> out) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return inv;
}

void apply_rotary(std::span<double> row, std::span<const double> cos, std::span<const double> sin,
                  std::size_t n_heads, std::size_t head_dim) {
  const std::size_t half = head_dim / 2;
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* p = row.data() + h * head_dim;
    for (std::size_t i = 0; i < half; ++i) {
      const double a = p[2 * i];
      const double b = p[2 * i + 1];
      p[2 * i] = a * cos[i] - b * sin[i];
      p[2 * i + 1] = a * sin[i] + b * cos[i];
    }
  }
}

void apply_rotary_inverse(std::span<double> row, std::span<const double> cos, std::span<const double> sin,
                          std::size_t n_heads, std::size_t head_dim) {
  const std::size_t half = head_dim / 2;
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* p = row.data() + h * head_dim;
    for (std::size_t i = 0; i < half; ++i) {
      const double a = p[2 * i];
      const double b = p[2 * i + 1];
      p[2 * i] = a * cos[i] + b * sin[i];
      p[2 * i + 1] = -a * sin[i] + b * cos[i];
    }
  }
}

namespace {

// Causal attention of one query row against key/value rows [0, t] for one head.
// `probs` receives t + 1 weights; `out` receives head_dim values.
void attend(std::span<const double> q, const Matrix& keys, const Matrix& values, std::size_t t, std::size_t head,
            std::size_t head_dim, std::span<double> probs, std::span<double> out) {
  const std::size_t off = head * head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const auto qh = q.subspan(off, head_dim);
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s <= t; ++s) {
    probs[s] = dot(qh, keys.row(s).subspan(off, head_dim)) * scale;
    hi = std::max(hi, probs[s]);
  }
  double sum = 0.0;
  for (std::size_t s = 0; s <= t; ++s) {
    probs[s] = std::exp(probs[s] - hi);
    sum += probs[s];
  }
  for (std::size_t s = 0; s <= t; ++s) probs[s] /= sum;
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t s = 0; s <= t; ++s) axpy(probs[s], values.row(s).subspan(off, head_dim), out);
}

void add_into(const Matrix& a, const Matrix& b, Matrix& out) {
  auto o = out.values();
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
}

void swiglu(const Matrix& gate_pre, const Matrix& up, Matrix& act) {
  const auto g = gate_pre.values();
  const auto u = up.values();
  auto a = act.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = g[i] * sigmoid(g[i]) * u[i];
}

Matrix normalize_rows(const Matrix& x, std::span<const double> gain, std::vector<double>& inv_rms) {
  Matrix u(x.rows(), x.cols());
  inv_rms.resize(x.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) inv_rms[t] = rms_normalize(x.row(t), gain, u.row(t));
  return u;
}

void embed(const ModelWeights& w, std::span<const Token> tokens, std::size_t vocab, Matrix& x) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= vocab) throw ArgumentError("token " + std::to_string(tokens[t]) + " outside vocabulary");
    const auto src = w.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
}

}  // namespace

Matrix forward(const FrozenModel& model, std::span<const Token> tokens, ForwardTrace* trace) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t T = tokens.size();
  if (T == 0) throw ArgumentError("forward on empty sequence");
  if (T > cfg.max_seq) {
    throw CapacityError("sequence length " + std::to_string(T) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();

  Matrix x(T, d);
  embed(w, tokens, cfg.vocab_size, x);
  if (trace) trace->layers.assign(cfg.n_layers, {});

  std::vector<double> scratch_probs(T);
  std::vector<double> inv1, inv2;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    Matrix u1 = normalize_rows(x, lw.attn_norm, inv1);
    Matrix q = matmul(u1, lw[ComponentKind::AttnQuery]);
    Matrix k = matmul(u1, lw[ComponentKind::AttnKey]);
    Matrix v = matmul(u1, lw[ComponentKind::AttnValue]);
    for (std::size_t t = 0; t < T; ++t) {
      apply_rotary(q.row(t), model.rope_cos(t), model.rope_sin(t), cfg.n_heads, dh);
      apply_rotary(k.row(t), model.rope_cos(t), model.rope_sin(t), cfg.n_heads, dh);
    }
    Matrix attn(T, d);
    std::vector<Matrix> probs;
    if (trace) probs.assign(cfg.n_heads, Matrix(T, T));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        std::span<double> p = trace ? probs[h].row(t) : std::span<double>(scratch_probs);
        attend(q.row(t), k, v, t, h, dh, p, attn.row(t).subspan(h * dh, dh));
      }
    }
    Matrix o = matmul(attn, lw[ComponentKind::AttnDense]);
    Matrix hres(T, d);
    add_into(x, o, hres);

    Matrix u2 = normalize_rows(hres, lw.mlp_norm, inv2);
    Matrix gate_pre = matmul(u2, lw[ComponentKind::MlpGate]);
    Matrix up = matmul(u2, lw[ComponentKind::MlpUp]);
    Matrix act(T, cfg.d_ff);
    swiglu(gate_pre, up, act);
    Matrix mlp_out = matmul(act, lw[ComponentKind::MlpDown]);
    Matrix x_next(T, d);
    add_into(hres, mlp_out, x_next);

    if (trace) {
      auto& lt = trace->layers[l];
      lt.x_in = std::move(x);
      lt.inv_rms_attn = inv1;
      lt.u_attn = std::move(u1);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.probs = std::move(probs);
      lt.attn = std::move(attn);
      lt.h = std::move(hres);
      lt.inv_rms_mlp = inv2;
      lt.u_mlp = std::move(u2);
      lt.gate_pre = std::move(gate_pre);
      lt.up = std::move(up);
      lt.act = std::move(act);
    }
    x = std::move(x_next);
  }

  std::vector<double> inv_f;
  Matrix uf = normalize_rows(x, w.final_norm, inv_f);
  Matrix logits = matmul(uf, w.unembedding);
  if (trace) {
    trace->x_final = std::move(x);
    trace->inv_rms_final = std::move(inv_f);
    trace->u_final = std::move(uf);
  }
  return logits;
}

Matrix forward(const ToyModel& model, std::span<const Token> tokens) { return forward(model.freeze(), tokens); }

// ---- incremental decoding ----

IncrementalDecoder::IncrementalDecoder(const FrozenModel& model) : model_(&model) {
  const auto& cfg = model.config();
  k_cache_.assign(cfg.n_layers, Matrix(cfg.max_seq, cfg.d_model));
  v_cache_.assign(cfg.n_layers, Matrix(cfg.max_seq, cfg.d_model));
}

std::span<const double> IncrementalDecoder::push(Token token) {
  const auto& cfg = model_->config();
  const auto& w = model_->weights();
  if (length_ >= cfg.max_seq) throw CapacityError("decoder exceeded max_seq " + std::to_string(cfg.max_seq));
  const std::size_t t = length_;
  const std::size_t d = cfg.d_model;
  const std::size_t dh = cfg.head_dim();

  Matrix x(1, d);
  embed(w, std::span<const Token>(&token, 1), cfg.vocab_size, x);
  std::vector<double> inv;
  std::vector<double> probs(t + 1);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    Matrix u1 = normalize_rows(x, lw.attn_norm, inv);
    Matrix q = matmul(u1, lw[ComponentKind::AttnQuery]);
    Matrix k = matmul(u1, lw[ComponentKind::AttnKey]);
    Matrix v = matmul(u1, lw[ComponentKind::AttnValue]);
    apply_rotary(q.row(0), model_->rope_cos(t), model_->rope_sin(t), cfg.n_heads, dh);
    apply_rotary(k.row(0), model_->rope_cos(t), model_->rope_sin(t), cfg.n_heads, dh);
    std::copy(k.row(0).begin(), k.row(0).end(), k_cache_[l].row(t).begin());
    std::copy(v.row(0).begin(), v.row(0).end(), v_cache_[l].row(t).begin());

    Matrix attn(1, d);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      attend(q.row(0), k_cache_[l], v_cache_[l], t, h, dh, probs, attn.row(0).subspan(h * dh, dh));
    }
    Matrix o = matmul(attn, lw[ComponentKind::AttnDense]);
    Matrix hres(1, d);
    add_into(x, o, hres);

    Matrix u2 = normalize_rows(hres, lw.mlp_norm, inv);
    Matrix gate_pre = matmul(u2, lw[ComponentKind::MlpGate]);
    Matrix up = matmul(u2, lw[ComponentKind::MlpUp]);
    Matrix act(1, cfg.d_ff);
    swiglu(gate_pre, up, act);
    Matrix mlp_out = matmul(act, lw[ComponentKind::MlpDown]);
    add_into(hres, mlp_out, x);
  }
  Matrix uf = normalize_rows(x, w.final_norm, inv);
  logits_ = matmul(uf, w.unembedding);
  ++length_;
  return logits_.row(0);
}

TokenSequence greedy_decode(const FrozenModel& model, std::span<const Token> prefix, std::size_t total_len) {
  if (prefix.empty()) throw ArgumentError("greedy decoding needs a nonempty prefix");
  if (prefix.size() > total_len) throw ArgumentError("prefix longer than requested total length");
  if (total_len > model.config().max_seq) throw CapacityError("requested length exceeds max_seq");
  TokenSequence out(prefix.begin(), prefix.end());
  if (out.size() == total_len) return out;
  out.reserve(total_len);
  IncrementalDecoder dec(model);
  std::span<const double> last;
  for (Token tok : prefix) last = dec.push(tok);
  while (out.size() < total_len) {
    const auto next = static_cast<Token>(argmax(last));
    out.push_back(next);
    if (out.size() < total_len) last = dec.push(next);
  }
  return out;
}

TokenSequence greedy_decode(const ToyModel& model, std::span<const Token> prefix, std::size_t total_len) {
  return greedy_decode(model.freeze(), prefix, total_len);
}

}  // namespace dtm
