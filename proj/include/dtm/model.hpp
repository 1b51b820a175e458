#pragma once

// Desk-scale decoder-only transformer with a Llama-style component inventory:
// pre-norm RMS blocks, rotary query/key mixing, four attention matrices and a
// gated MLP per layer. Every weight matrix is addressable as a ComponentId and
// carries its own binary mask.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dtm/numerics.hpp"

namespace dtm {

using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

enum class ComponentKind : std::uint8_t {
  AttnQuery,
  AttnKey,
  AttnValue,
  AttnDense,
  MlpUp,
  MlpGate,
  MlpDown,
};

inline constexpr std::size_t kKindCount = 7;
inline constexpr std::array<ComponentKind, kKindCount> kAllKinds = {
    ComponentKind::AttnQuery, ComponentKind::AttnKey, ComponentKind::AttnValue, ComponentKind::AttnDense,
    ComponentKind::MlpUp,     ComponentKind::MlpGate, ComponentKind::MlpDown,
};

constexpr bool is_attention(ComponentKind k) noexcept {
  return k == ComponentKind::AttnQuery || k == ComponentKind::AttnKey || k == ComponentKind::AttnValue ||
         k == ComponentKind::AttnDense;
}
constexpr std::size_t kind_index(ComponentKind k) noexcept { return static_cast<std::size_t>(k); }

std::string_view kind_name(ComponentKind k) noexcept;
std::optional<ComponentKind> parse_kind(std::string_view name) noexcept;

struct ComponentId {
  std::size_t layer = 0;
  ComponentKind kind = ComponentKind::AttnQuery;

  auto operator<=>(const ComponentId&) const = default;

  // "layer.kind", e.g. "3.mlp_gate". Shared by plan files and reports.
  std::string key() const;
  static ComponentId parse(std::string_view key);
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 172;
  std::size_t max_seq = 512;

  void validate() const;
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// Binary keep(1)/drop(0) mask with the shape of one component matrix.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, std::uint8_t fill = 1);

  static Mask ones_like(const Matrix& m) { return Mask(m.rows(), m.cols(), 1); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool keep(std::size_t flat) const noexcept { return bits_[flat] != 0; }
  void drop(std::size_t flat) noexcept { bits_[flat] = 0; }
  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  std::span<std::uint8_t> bits() noexcept { return bits_; }

  std::size_t zeros() const noexcept;
  double sparsity() const noexcept;
  bool matches(const Matrix& m) const noexcept { return m.rows() == rows_ && m.cols() == cols_; }

  // w *= mask, entrywise.
  void apply(Matrix& w) const;
  // Zeros of this mask are a superset of the zeros of `other`.
  bool covers(const Mask& other) const noexcept;

  bool operator==(const Mask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct LayerWeights {
  std::array<Matrix, kKindCount> components;  // indexed by kind_index
  std::vector<double> attn_norm;
  std::vector<double> mlp_norm;

  Matrix& operator[](ComponentKind k) noexcept { return components[kind_index(k)]; }
  const Matrix& operator[](ComponentKind k) const noexcept { return components[kind_index(k)]; }

  bool operator==(const LayerWeights&) const = default;
};

// Every trainable tensor of the model. Also used as the gradient container.
struct ModelWeights {
  Matrix embedding;    // vocab x d_model
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;
  Matrix unembedding;  // d_model x vocab

  static ModelWeights zeros(const ModelConfig& cfg);

  Matrix& component(ComponentId id) { return layers.at(id.layer)[id.kind]; }
  const Matrix& component(ComponentId id) const { return layers.at(id.layer)[id.kind]; }

  // Visits every tensor in checkpoint order with a stable name.
  void for_each_tensor(const std::function<void(const std::string&, std::span<double>)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, std::span<const double>)>& fn) const;

  bool operator==(const ModelWeights&) const = default;
};

// Component shape as (input dim, output dim); activations multiply on the left.
std::pair<std::size_t, std::size_t> component_shape(const ModelConfig& cfg, ComponentKind kind) noexcept;

// Immutable inference snapshot: effective (masked) weights plus rotary tables.
// Safe to share across threads.
class FrozenModel {
 public:
  FrozenModel(ModelConfig cfg, ModelWeights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelWeights& weights() const noexcept { return weights_; }

  // Replaces one effective component; used to probe single-component edits.
  void set_component(ComponentId id, Matrix m);

  std::span<const double> rope_cos(std::size_t pos) const noexcept {
    return {rope_cos_.data() + pos * half_head_, half_head_};
  }
  std::span<const double> rope_sin(std::size_t pos) const noexcept {
    return {rope_sin_.data() + pos * half_head_, half_head_};
  }

 private:
  ModelConfig config_;
  ModelWeights weights_;
  std::size_t half_head_ = 0;
  std::vector<double> rope_cos_;
  std::vector<double> rope_sin_;
};

class ToyModel {
 public:
  explicit ToyModel(ModelConfig cfg);  // zero weights, unit gains, all-ones masks

  const ModelConfig& config() const noexcept { return config_; }
  ModelWeights& weights() noexcept { return weights_; }
  const ModelWeights& weights() const noexcept { return weights_; }

  std::vector<ComponentId> components() const;
  void check(ComponentId id) const;

  const Matrix& get_component(ComponentId id) const;  // raw, unmasked
  void set_component(ComponentId id, Matrix m);

  const Mask& mask(ComponentId id) const;
  void set_mask(ComponentId id, Mask mask);
  double component_sparsity(ComponentId id) const { return mask(id).sparsity(); }
  // Parameter-weighted sparsity over all prunable components.
  double model_sparsity() const;

  // Zeroes raw weights at masked positions.
  void apply_masks_to_raw();

  FrozenModel freeze(bool apply_masks = true) const;

  std::size_t component_parameter_count(ComponentId id) const;
  std::size_t parameter_count() const;

  bool operator==(const ToyModel&) const = default;

 private:
  ModelConfig config_;
  ModelWeights weights_;
  std::vector<std::array<Mask, kKindCount>> masks_;
};

ToyModel random_init(const ModelConfig& cfg, std::uint64_t seed);

// ---- forward pass ----

struct LayerTrace {
  Matrix x_in;
  std::vector<double> inv_rms_attn;
  Matrix u_attn;
  Matrix q, k, v;                  // q, k after rotary mixing
  std::vector<Matrix> probs;       // per head, T x T (upper triangle zero)
  Matrix attn;                     // concatenated head outputs
  Matrix h;                        // residual after attention
  std::vector<double> inv_rms_mlp;
  Matrix u_mlp;
  Matrix gate_pre;
  Matrix up;
  Matrix act;                      // silu(gate_pre) * up
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Matrix x_final;
  std::vector<double> inv_rms_final;
  Matrix u_final;
};

// Logits (T x vocab). Row i depends only on tokens[0..i].
Matrix forward(const FrozenModel& model, std::span<const Token> tokens, ForwardTrace* trace = nullptr);
Matrix forward(const ToyModel& model, std::span<const Token> tokens);

// Single-token-at-a-time evaluation with cached keys/values. Produces the same
// logits, bit for bit, as the corresponding rows of forward().
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const FrozenModel& model);

  // Appends one token and returns the logits row for its position.
  std::span<const double> push(Token token);
  std::size_t length() const noexcept { return length_; }

 private:
  const FrozenModel* model_;
  std::vector<Matrix> k_cache_;
  std::vector<Matrix> v_cache_;
  Matrix logits_;
  std::size_t length_ = 0;
};

// Greedy completion G(F, prefix, total_len): output[:n] = prefix, then each
// next token is the argmax of the last logits row.
TokenSequence greedy_decode(const FrozenModel& model, std::span<const Token> prefix, std::size_t total_len);
TokenSequence greedy_decode(const ToyModel& model, std::span<const Token> prefix, std::size_t total_len);

// ---- shared building blocks (exposed for the trainer and tests) ----

inline constexpr double kRmsEps = 1e-5;

double rms_normalize(std::span<const double> x, std::span<const double> gain, std::span<double> out);
void apply_rotary(std::span<double> row, std::span<const double> cos, std::span<const double> sin,
                  std::size_t n_heads, std::size_t head_dim);
void apply_rotary_inverse(std::span<double> row, std::span<const double> cos, std::span<const double> sin,
                          std::size_t n_heads, std::size_t head_dim);
double sigmoid(double x) noexcept;

// ---- checkpoints ----

void save_checkpoint(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const ToyModel& model);
ToyModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace dtm
