#pragma once

// Unstructured pruning masks, simulated AbsMax integer quantization, and
// activation-outlier accounting at component inputs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>

#include "dtm/model.hpp"
#include "json.hpp"

namespace dtm {

class SparsityLevel {
 public:
  explicit SparsityLevel(double fraction);
  double fraction() const noexcept { return fraction_; }

 private:
  double fraction_;
};

enum class QuantScheme { AbsMax };

struct QuantSpec {
  int bits = 8;
  QuantScheme scheme = QuantScheme::AbsMax;

  void validate() const;
  // Largest representable magnitude, 2^(bits-1) - 1.
  int max_int() const noexcept { return (1 << (bits - 1)) - 1; }
  bool operator==(const QuantSpec&) const = default;
};

inline constexpr double kDefaultOutlierThreshold = 6.0;

struct OutlierCensus {
  double threshold = kDefaultOutlierThreshold;
  std::map<ComponentId, std::size_t> counts;
  std::size_t total = 0;
};

// Number of zeros a mask must carry for `target` on `numel` weights.
std::size_t target_zero_count(SparsityLevel target, std::size_t numel) noexcept;

// Extends `existing` to exactly floor(target * numel) zeros by dropping the
// smallest-magnitude kept weights; ties go to the lower flat index.
Mask magnitude_mask(const Matrix& w, const Mask& existing, SparsityLevel target);

// Same count contract, positions drawn uniformly from the kept weights.
Mask random_mask(const Matrix& w, const Mask& existing, SparsityLevel target, std::uint64_t seed);

// Grid step max|w| / (2^(bits-1) - 1); zero for an all-zero matrix.
double absmax_scale(const Matrix& w, const QuantSpec& spec);

// round(w / scale) * scale with rounding half away from zero.
Matrix absmax_quantize_dequantize(const Matrix& w, const QuantSpec& spec);

// Counts hidden activations with |a| > threshold at the input of every
// component, summed over forward passes on `probes`.
OutlierCensus outlier_census(const FrozenModel& model, std::span<const TokenSequence> probes,
                             double threshold = kDefaultOutlierThreshold);

// Zero counts for every component of `cfg`.
OutlierCensus empty_census(const ModelConfig& cfg, double threshold = kDefaultOutlierThreshold);
// Adds the activations of one traced forward pass to `census`.
void add_outliers(OutlierCensus& census, const ForwardTrace& trace);

struct PlanEntry {
  std::optional<double> sparsity;  // absolute target fraction
  std::optional<int> bits;         // AbsMax bit width

  bool operator==(const PlanEntry&) const = default;
};

struct CompressionPlan {
  std::map<ComponentId, PlanEntry> entries;

  bool empty() const noexcept { return entries.empty(); }
  bool operator==(const CompressionPlan&) const = default;
};

// Copy of `model` with masks extended (magnitude pruning) and then weights
// quantize-dequantized per plan entry. `model` is left untouched.
ToyModel apply_plan(const ToyModel& model, const CompressionPlan& plan);

nlohmann::json plan_to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const nlohmann::json& j);
void save_plan(const CompressionPlan& plan, const std::filesystem::path& path);
CompressionPlan load_plan(const std::filesystem::path& path);

}  // namespace dtm
