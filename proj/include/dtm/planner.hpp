#pragma once

// FDT-balanced per-component sparsity allocation and the multi-round
// prune/train schedule built on it.
//
// Sparsities are fractions in [0, 1]. The x-axis of every anchor curve is
// sparsity ADDED on top of a component's current mask.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtm/compress.hpp"
#include "dtm/metrics.hpp"
#include "dtm/train.hpp"

namespace dtm {

struct Anchor {
  double added = 0.0;  // added sparsity
  double fdt = 0.0;    // probed FDT75 at that added sparsity

  bool operator==(const Anchor&) const = default;
};

using AnchorCurve = std::array<Anchor, 4>;

// How a pruned component is scored while probing. Fdt75 is the planner's
// criterion; Dppl is a research option mapped onto the same axis as
// (N - n) * base_dppl / pruned_dppl so that larger still means closer.
enum class ProbeCriterion { Fdt75, Dppl };

struct FdtSparseMap {
  double max_fdt = 0.0;  // N - n
  double step = 0.0;     // increment the measured anchors were placed around
  std::map<ComponentId, AnchorCurve> curves;
  std::map<ComponentId, double> current;  // sparsity before this round

  // Throws InvariantViolation unless each curve has increasing sparsities,
  // endpoints (0, max_fdt) and (1, 0), and values inside [0, max_fdt].
  void validate() const;
};

// Curve (0, max), (step/2, a), (3 step/2, b), (1, 0); a and b are clamped.
AnchorCurve make_curve(double step, double max_fdt, double at_half, double at_three_halves);

// Largest added sparsity where the piecewise-linear curve is >= f. f above
// every anchor yields 0; f <= 0 yields 1.
double interpolate_max_sparsity(const AnchorCurve& curve, double f);

// Piecewise-linear curve value at an added sparsity.
double curve_value(const AnchorCurve& curve, double added);

struct ProbeOptions {
  ProbeCriterion criterion = ProbeCriterion::Fdt75;
  std::size_t workers = 1;
};

// Probes every component of `base` by pruning only that component an extra
// step/2 and 3 step/2 (magnitude order, on top of its mask) and measuring the
// criterion against the unmodified model on `refs`. `refs` must be built
// from `base`. Components already fully pruned get zero measured anchors.
FdtSparseMap probe_components(const ToyModel& base, double step, const ReferenceSet& refs,
                              const ProbeOptions& opts = {});

struct SparsityPlan {
  std::map<ComponentId, double> added;   // allocated extra sparsity
  std::map<ComponentId, double> target;  // absolute: current + added
  double requested = 0.0;                // weighted-mean added sparsity asked for
  double achieved = 0.0;                 // weighted mean of `added`
  double f_star = 0.0;                   // first integer floor meeting the target
  double f_refined = 0.0;                // real-valued floor after refinement

  CompressionPlan to_compression_plan() const;
};

// Descends an integer FDT floor f from max_fdt and stops at the first f whose
// parameter-weighted mean added sparsity reaches target_step. The floor is
// then refined on [f, f + 1] so that the weighted mean meets the target to
// within rounding instead of overshooting by a whole FDT unit.
SparsityPlan allocate(const FdtSparseMap& map, double target_step, const std::map<ComponentId, double>& weights);

// Same budget spread evenly: every component receives target_step added
// sparsity, clamped to its remaining capacity.
SparsityPlan allocate_uniform(const std::map<ComponentId, double>& current, double target_step,
                              const std::map<ComponentId, double>& weights);

// Parameter counts of every prunable component.
std::map<ComponentId, double> component_weights(const ToyModel& model);
std::map<ComponentId, double> component_sparsities(const ToyModel& model);
double weighted_mean(const std::map<ComponentId, double>& values, const std::map<ComponentId, double>& weights);

struct Schedule {
  std::vector<double> increments{0.20, 0.15, 0.10, 0.10, 0.05, 0.05, 0.05, 0.05};

  void validate() const;
  double cumulative(std::size_t round) const;  // sum of increments[0..round]
};

// Training between rounds. run_schedule calls it once per round.
class RoundTrainer {
 public:
  virtual ~RoundTrainer() = default;
  virtual LossTrace train_round(ToyModel& model, std::size_t round) = 0;
  virtual std::string describe() const = 0;
};

class NoOpTrainer final : public RoundTrainer {
 public:
  LossTrace train_round(ToyModel&, std::size_t) override { return {}; }
  std::string describe() const override { return "none"; }
};

// train_masked on windows of a token stream; the sampler seed is advanced
// per round so rounds see different batches.
class MaskedRoundTrainer final : public RoundTrainer {
 public:
  MaskedRoundTrainer(TrainConfig cfg, std::vector<Token> stream);
  LossTrace train_round(ToyModel& model, std::size_t round) override;
  std::string describe() const override;

 private:
  TrainConfig cfg_;
  std::vector<Token> stream_;
};

enum class AllocationMode { Balanced, Uniform };

struct ScheduleOptions {
  Schedule schedule;
  AllocationMode mode = AllocationMode::Balanced;
  ProbeCriterion criterion = ProbeCriterion::Fdt75;
  std::size_t workers = 1;
  std::optional<std::filesystem::path> out_dir;  // round_NN/ artifacts when set
};

struct RoundResult {
  std::size_t round = 0;
  double cumulative_target = 0.0;
  std::optional<FdtSparseMap> map;  // absent in uniform mode
  SparsityPlan plan;
  LossTrace loss;
  DivergenceReport report;  // final model of the round vs the original base
  std::map<ComponentId, double> sparsity;
  double model_sparsity = 0.0;
};

// Per round: probe (balanced mode) -> allocate -> extend magnitude masks ->
// train -> re-apply masks -> evaluate against `eval_refs` (built from the
// original model). Probe references are rebuilt from the current model each
// round from `probe_prefixes`.
std::vector<RoundResult> run_schedule(ToyModel& model, std::span<const TokenSequence> probe_prefixes,
                                      const ProbeSpec& spec, const ReferenceSet& eval_refs, RoundTrainer& trainer,
                                      const ScheduleOptions& opts);

std::string sparsity_map_csv(const std::map<ComponentId, double>& sparsity, std::size_t n_layers);
std::string anchors_csv(const FdtSparseMap& map);
void write_round_artifacts(const RoundResult& r, std::size_t n_layers, const std::filesystem::path& dir);

}  // namespace dtm
