#pragma once

// Divergence metrics between a base model and a compressed model.
//
// Index conventions (0-based): a sequence y of N tokens has N logit rows and
// row i scores the token y[i + 1]. With prefix length n, the completion region
// is rows n-1 .. N-2, i.e. N - n predictions. FDT counts the completion tokens
// that match before the first divergence, so it lies in [0, N - n] and equals
// N - n when nothing diverges.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtm/model.hpp"
#include "dtm/numerics.hpp"

namespace dtm {

struct ProbeSpec {
  std::size_t prefix_len = 100;  // n
  std::size_t total_len = 200;   // N

  void validate() const;
  std::size_t completion_len() const noexcept { return total_len - prefix_len; }
  bool operator==(const ProbeSpec&) const = default;
};

// ---- metrics on a token sequence and its logits ----

double nll(std::span<const Token> y, const Matrix& logits, std::size_t n);
double ppl(std::span<const Token> y, const Matrix& logits, std::size_t n);
inline double ppl(std::span<const Token> y, const Matrix& logits) { return ppl(y, logits, 1); }
std::size_t sdt(std::span<const Token> y, const Matrix& logits, std::size_t n);
std::size_t fdt(std::span<const Token> y, const Matrix& logits, std::size_t n);

// Completion-relative positions where the argmax departs from y (the SDT set).
std::vector<std::size_t> divergent_positions(std::span<const Token> y, const Matrix& logits, std::size_t n);
// Gaps between consecutive divergent positions; empty when fewer than two.
std::vector<std::size_t> inter_error_distances(std::span<const std::size_t> positions);

// ---- metrics on a pair of logit matrices ----
//
// The greedy target of row i is argmax of the reference row; rows
// [first_row, rows) are compared.

struct LogitComparison {
  std::size_t sdt = 0;
  std::size_t fdt = 0;
  double dppl = 1.0;
};

LogitComparison compare_logits(const Matrix& reference, const Matrix& candidate, std::size_t first_row);

// Perplexity of `logits` where row i must predict targets[i], over rows [first_row, rows).
double ppl_rows(const Matrix& logits, std::span<const Token> targets, std::size_t first_row);

// ---- probing models ----

struct ProbeResult {
  std::size_t fdt = 0;
  std::size_t sdt = 0;
  double dppl = 1.0;
  double ppl = 1.0;
};

// Greedy completion of the base model plus the text used for plain perplexity.
struct Reference {
  std::size_t probe_id = 0;
  TokenSequence completion;   // G(base, prefix, N), length N
  TokenSequence ppl_target;   // ground-truth window when given, else the completion
};

struct ReferenceSet {
  ProbeSpec spec;
  std::vector<Reference> items;
  bool ground_truth = false;
};

// Each dataset entry supplies at least n tokens; the first n form the prefix.
// Entries of exactly N tokens also serve as ground truth for plain PPL.
ReferenceSet build_references(const FrozenModel& base, std::span<const TokenSequence> dataset, const ProbeSpec& spec,
                              std::size_t workers = 1);

// One forward pass of the compressed model on the reference completion yields
// FDT, SDT and DPPL; PPL costs a second pass only when ground truth differs.
// `trace`, when given, receives the activations of the completion pass.
ProbeResult evaluate_probe(const FrozenModel& compressed, const Reference& ref, const ProbeSpec& spec,
                           bool with_ppl = true, ForwardTrace* trace = nullptr);

ProbeResult probe_pair(const FrozenModel& base, const FrozenModel& compressed, std::span<const Token> prefix,
                       const ProbeSpec& spec);

struct ProbeRecord {
  std::size_t probe_id = 0;
  std::size_t fdt = 0;
  std::size_t sdt = 0;
  double dppl = 1.0;
  double ppl = 1.0;

  bool operator==(const ProbeRecord&) const = default;
};

struct ReportAggregates {
  std::size_t probes = 0;
  double mean_fdt = 0.0;
  double median_fdt = 0.0;
  double fdt_75 = 0.0;
  double mean_sdt = 0.0;
  double mean_dppl = 0.0;
  double mean_ppl = 0.0;
  std::size_t full_matches = 0;  // probes with fdt == N - n

  bool operator==(const ReportAggregates&) const = default;
};

struct DivergenceReport {
  ProbeSpec spec;
  std::string ppl_source = "ground_truth";  // or "base_completion"
  std::vector<ProbeRecord> records;
  ReportAggregates aggregates;

  static DivergenceReport from_records(const ProbeSpec& spec, std::vector<ProbeRecord> records,
                                       std::string ppl_source);
  // Throws FormatError on any violated record or aggregate invariant.
  void validate() const;
  std::vector<double> fdt_values() const;
  std::vector<double> ppl_values() const;
  std::vector<double> dppl_values() const;

  bool operator==(const DivergenceReport&) const = default;
};

struct EvalOptions {
  bool with_ppl = true;
  std::size_t workers = 1;
};

DivergenceReport evaluate(const FrozenModel& compressed, const ReferenceSet& refs, const EvalOptions& opts = {});

DivergenceReport aggregate(const FrozenModel& base, const FrozenModel& compressed,
                           std::span<const TokenSequence> dataset, const ProbeSpec& spec, std::size_t workers = 1);

// ---- proposition constructions ----

// Bumps every row's runner-up logit by delta so it overtakes the leader.
// Requires distinct values per row and leader gap < delta.
Matrix construct_ppl_adversary(const Matrix& logits, double delta);

// Makes rows satisfy the adversary preconditions: sub-delta deterministic
// jitter separates repeated values, then each runner-up is lifted to
// leader - delta / 2 when the gap is wider than that.
Matrix narrow_top_gaps(const Matrix& logits, double delta);

struct BoundCheck {
  std::size_t sdt = 0;
  double dppl = 1.0;
  double bound = 0.0;
  bool holds = true;
};

// SDT <= (N - n) / log 2 * log DPPL, with N = logits rows.
BoundCheck check_dppl_bound(const Matrix& reference, const Matrix& candidate, std::size_t n);

}  // namespace dtm
