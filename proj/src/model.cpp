#include "dtm/model.hpp"

#include <charconv>
#include <cmath>
#include <random>

namespace dtm {

namespace {

constexpr std::array<std::string_view, kKindCount> kKindNames = {
    "attn_query", "attn_key", "attn_value", "attn_dense", "mlp_up", "mlp_gate", "mlp_down",
};

}  // namespace

std::string_view kind_name(ComponentKind k) noexcept { return kKindNames[kind_index(k)]; }

std::optional<ComponentKind> parse_kind(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kKindCount; ++i) {
    if (kKindNames[i] == name) return kAllKinds[i];
  }
  return std::nullopt;
}

std::string ComponentId::key() const { return std::to_string(layer) + "." + std::string(kind_name(kind)); }

ComponentId ComponentId::parse(std::string_view key) {
  const auto dot = key.find('.');
  if (dot == std::string_view::npos || dot == 0) throw ArgumentError("bad component key: " + std::string(key));
  std::size_t layer = 0;
  const auto [ptr, ec] = std::from_chars(key.data(), key.data() + dot, layer);
  if (ec != std::errc{} || ptr != key.data() + dot) throw ArgumentError("bad component layer: " + std::string(key));
  const auto kind = parse_kind(key.substr(dot + 1));
  if (!kind) throw ArgumentError("bad component kind: " + std::string(key));
  return {layer, *kind};
}

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 || max_seq == 0) {
    throw ArgumentError("model config fields must be positive");
  }
  if (d_model % n_heads != 0) throw ArgumentError("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ArgumentError("head dimension must be even for rotary mixing");
}

std::pair<std::size_t, std::size_t> component_shape(const ModelConfig& cfg, ComponentKind kind) noexcept {
  switch (kind) {
    case ComponentKind::MlpUp:
    case ComponentKind::MlpGate:
      return {cfg.d_model, cfg.d_ff};
    case ComponentKind::MlpDown:
      return {cfg.d_ff, cfg.d_model};
    default:
      return {cfg.d_model, cfg.d_model};
  }
}

// ---- Mask ----

Mask::Mask(std::size_t rows, std::size_t cols, std::uint8_t fill)
    : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

std::size_t Mask::zeros() const noexcept {
  std::size_t z = 0;
  for (auto b : bits_) z += (b == 0);
  return z;
}

double Mask::sparsity() const noexcept {
  return bits_.empty() ? 0.0 : static_cast<double>(zeros()) / static_cast<double>(bits_.size());
}

void Mask::apply(Matrix& w) const {
  if (!matches(w)) throw ArgumentError("mask shape mismatch");
  auto vals = w.values();
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (!bits_[i]) vals[i] = 0.0;
  }
}

bool Mask::covers(const Mask& other) const noexcept {
  if (other.bits_.size() != bits_.size()) return false;
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (!other.bits_[i] && bits_[i]) return false;
  }
  return true;
}

// ---- ModelWeights ----

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  ModelWeights w;
  w.embedding = Matrix(cfg.vocab_size, cfg.d_model);
  w.layers.resize(cfg.n_layers);
  for (auto& layer : w.layers) {
    for (auto kind : kAllKinds) {
      const auto [in, out] = component_shape(cfg, kind);
      layer[kind] = Matrix(in, out);
    }
    layer.attn_norm.assign(cfg.d_model, 0.0);
    layer.mlp_norm.assign(cfg.d_model, 0.0);
  }
  w.final_norm.assign(cfg.d_model, 0.0);
  w.unembedding = Matrix(cfg.d_model, cfg.vocab_size);
  return w;
}

namespace {

template <typename Weights, typename Fn>
void visit_tensors(Weights& w, Fn&& fn) {
  fn(std::string("embedding"), w.embedding.values());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    const std::string prefix = std::to_string(l) + ".";
    fn(prefix + "attn_norm", std::span(layer.attn_norm));
    for (auto kind : kAllKinds) {
      if (kind == ComponentKind::MlpUp) fn(prefix + "mlp_norm", std::span(layer.mlp_norm));
      fn(prefix + std::string(kind_name(kind)), layer[kind].values());
    }
  }
  fn(std::string("final_norm"), std::span(w.final_norm));
  fn(std::string("unembedding"), w.unembedding.values());
}

}  // namespace

void ModelWeights::for_each_tensor(const std::function<void(const std::string&, std::span<double>)>& fn) {
  visit_tensors(*this, [&](const std::string& name, std::span<double> s) { fn(name, s); });
}

void ModelWeights::for_each_tensor(
    const std::function<void(const std::string&, std::span<const double>)>& fn) const {
  visit_tensors(*this, [&](const std::string& name, std::span<const double> s) { fn(name, s); });
}

// ---- FrozenModel ----

FrozenModel::FrozenModel(ModelConfig cfg, ModelWeights weights)
    : config_(cfg), weights_(std::move(weights)), half_head_(cfg.head_dim() / 2) {
  config_.validate();
  rope_cos_.resize(config_.max_seq * half_head_);
  rope_sin_.resize(config_.max_seq * half_head_);
  const double hd = static_cast<double>(config_.head_dim());
  for (std::size_t pos = 0; pos < config_.max_seq; ++pos) {
    for (std::size_t i = 0; i < half_head_; ++i) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / hd);
      const double angle = static_cast<double>(pos) * theta;
      rope_cos_[pos * half_head_ + i] = std::cos(angle);
      rope_sin_[pos * half_head_ + i] = std::sin(angle);
    }
  }
}

void FrozenModel::set_component(ComponentId id, Matrix m) {
  auto& dst = weights_.component(id);
  if (!dst.same_shape(m)) throw ArgumentError("component shape mismatch for " + id.key());
  dst = std::move(m);
}

// ---- ToyModel ----

ToyModel::ToyModel(ModelConfig cfg) : config_(cfg), weights_(ModelWeights::zeros(cfg)) {
  for (auto& layer : weights_.layers) {
    layer.attn_norm.assign(cfg.d_model, 1.0);
    layer.mlp_norm.assign(cfg.d_model, 1.0);
  }
  weights_.final_norm.assign(cfg.d_model, 1.0);
  masks_.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (auto kind : kAllKinds) masks_[l][kind_index(kind)] = Mask::ones_like(weights_.layers[l][kind]);
  }
}

std::vector<ComponentId> ToyModel::components() const {
  std::vector<ComponentId> ids;
  ids.reserve(config_.n_layers * kKindCount);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (auto kind : kAllKinds) ids.push_back({l, kind});
  }
  return ids;
}

void ToyModel::check(ComponentId id) const {
  if (id.layer >= config_.n_layers) throw ArgumentError("component layer out of range: " + id.key());
  if (kind_index(id.kind) >= kKindCount) throw ArgumentError("invalid component kind");
}

const Matrix& ToyModel::get_component(ComponentId id) const {
  check(id);
  return weights_.component(id);
}

void ToyModel::set_component(ComponentId id, Matrix m) {
  check(id);
  auto& dst = weights_.component(id);
  if (!dst.same_shape(m)) throw ArgumentError("component shape mismatch for " + id.key());
  if (!m.all_finite()) throw DomainError("non-finite component weights for " + id.key());
  dst = std::move(m);
}

const Mask& ToyModel::mask(ComponentId id) const {
  check(id);
  return masks_[id.layer][kind_index(id.kind)];
}

void ToyModel::set_mask(ComponentId id, Mask mask) {
  check(id);
  if (!mask.matches(weights_.component(id))) throw ArgumentError("mask shape mismatch for " + id.key());
  masks_[id.layer][kind_index(id.kind)] = std::move(mask);
}

double ToyModel::model_sparsity() const {
  std::size_t zeros = 0;
  std::size_t total = 0;
  for (const auto& layer : masks_) {
    for (const auto& m : layer) {
      zeros += m.zeros();
      total += m.size();
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

void ToyModel::apply_masks_to_raw() {
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (auto kind : kAllKinds) masks_[l][kind_index(kind)].apply(weights_.layers[l][kind]);
  }
}

FrozenModel ToyModel::freeze(bool apply_masks) const {
  ModelWeights w = weights_;
  if (apply_masks) {
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      for (auto kind : kAllKinds) masks_[l][kind_index(kind)].apply(w.layers[l][kind]);
    }
  }
  return FrozenModel(config_, std::move(w));
}

std::size_t ToyModel::component_parameter_count(ComponentId id) const { return get_component(id).size(); }

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  weights_.for_each_tensor([&](const std::string&, std::span<const double> s) { n += s.size(); });
  return n;
}

ToyModel random_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ToyModel model(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::span<double> values, double scale) {
    for (double& v : values) v = normal(rng) * scale;
  };
  auto& w = model.weights();
  fill(w.embedding.values(), 1.0);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (auto& layer : w.layers) {
    for (auto kind : kAllKinds) {
      const auto [in, out] = component_shape(cfg, kind);
      double scale = 1.0 / std::sqrt(static_cast<double>(in));
      if (kind == ComponentKind::AttnDense || kind == ComponentKind::MlpDown) scale *= residual_scale;
      fill(layer[kind].values(), scale);
    }
  }
  fill(w.unembedding.values(), 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  return model;
}

}  // namespace dtm
