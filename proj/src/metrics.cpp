#include "dtm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dtm/parallel.hpp"

namespace dtm {

void ProbeSpec::validate() const {
  if (prefix_len == 0) throw ArgumentError("probe prefix length must be positive");
  if (prefix_len >= total_len) {
    throw ArgumentError("probe prefix length " + std::to_string(prefix_len) + " must be below total length " +
                        std::to_string(total_len));
  }
}

namespace {

void check_token_inputs(std::span<const Token> y, const Matrix& logits, std::size_t n) {
  if (logits.rows() != y.size()) throw ArgumentError("logit rows must equal sequence length");
  if (n == 0 || n >= y.size()) {
    throw ArgumentError("prefix length " + std::to_string(n) + " must satisfy 0 < n < N = " +
                        std::to_string(y.size()));
  }
}

}  // namespace

double nll(std::span<const Token> y, const Matrix& logits, std::size_t n) {
  check_token_inputs(y, logits, n);
  double total = 0.0;
  for (std::size_t r = n - 1; r + 1 < y.size(); ++r) {
    if (y[r + 1] >= logits.cols()) throw ArgumentError("token outside logit vocabulary");
    total -= log_softmax(logits.row(r))[y[r + 1]];
  }
  return total / static_cast<double>(y.size() - n);
}

double ppl(std::span<const Token> y, const Matrix& logits, std::size_t n) { return std::exp(nll(y, logits, n)); }

std::vector<std::size_t> divergent_positions(std::span<const Token> y, const Matrix& logits, std::size_t n) {
  check_token_inputs(y, logits, n);
  std::vector<std::size_t> out;
  for (std::size_t r = n - 1; r + 1 < y.size(); ++r) {
    if (argmax(logits.row(r)) != y[r + 1]) out.push_back(r + 1 - n);
  }
  return out;
}

std::size_t sdt(std::span<const Token> y, const Matrix& logits, std::size_t n) {
  return divergent_positions(y, logits, n).size();
}

std::size_t fdt(std::span<const Token> y, const Matrix& logits, std::size_t n) {
  check_token_inputs(y, logits, n);
  for (std::size_t r = n - 1; r + 1 < y.size(); ++r) {
    if (argmax(logits.row(r)) != y[r + 1]) return r + 1 - n;
  }
  return y.size() - n;
}

std::vector<std::size_t> inter_error_distances(std::span<const std::size_t> positions) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < positions.size(); ++i) out.push_back(positions[i] - positions[i - 1]);
  return out;
}

LogitComparison compare_logits(const Matrix& reference, const Matrix& candidate, std::size_t first_row) {
  if (!reference.same_shape(candidate)) throw ArgumentError("logit matrices differ in shape");
  if (first_row >= reference.rows()) throw ArgumentError("first compared row outside logits");
  LogitComparison out;
  out.fdt = reference.rows() - first_row;
  bool diverged = false;
  double total = 0.0;
  for (std::size_t r = first_row; r < reference.rows(); ++r) {
    const std::size_t target = argmax(reference.row(r));
    const auto lp = log_softmax(candidate.row(r));
    total -= lp[target];
    if (argmax(candidate.row(r)) != target) {
      ++out.sdt;
      if (!diverged) {
        out.fdt = r - first_row;
        diverged = true;
      }
    }
  }
  out.dppl = std::exp(total / static_cast<double>(reference.rows() - first_row));
  return out;
}

double ppl_rows(const Matrix& logits, std::span<const Token> targets, std::size_t first_row) {
  if (targets.size() != logits.rows()) throw ArgumentError("one target per logit row required");
  if (first_row >= logits.rows()) throw ArgumentError("first row outside logits");
  double total = 0.0;
  for (std::size_t r = first_row; r < logits.rows(); ++r) {
    if (targets[r] >= logits.cols()) throw ArgumentError("target outside logit vocabulary");
    total -= log_softmax(logits.row(r))[targets[r]];
  }
  return std::exp(total / static_cast<double>(logits.rows() - first_row));
}

// ---- probing ----

ReferenceSet build_references(const FrozenModel& base, std::span<const TokenSequence> dataset, const ProbeSpec& spec,
                              std::size_t workers) {
  spec.validate();
  ReferenceSet refs;
  refs.spec = spec;
  refs.items.resize(dataset.size());
  bool all_ground_truth = !dataset.empty();
  for (const auto& item : dataset) {
    if (item.size() < spec.prefix_len) throw ArgumentError("dataset entry shorter than the probe prefix");
    all_ground_truth = all_ground_truth && item.size() == spec.total_len;
  }
  refs.ground_truth = all_ground_truth;
  parallel_for(dataset.size(), workers, [&](std::size_t i) {
    const auto prefix = std::span<const Token>(dataset[i]).first(spec.prefix_len);
    auto& ref = refs.items[i];
    ref.probe_id = i;
    ref.completion = greedy_decode(base, prefix, spec.total_len);
    ref.ppl_target = all_ground_truth ? dataset[i] : ref.completion;
  });
  return refs;
}

ProbeResult evaluate_probe(const FrozenModel& compressed, const Reference& ref, const ProbeSpec& spec,
                           bool with_ppl, ForwardTrace* trace) {
  const Matrix logits = forward(compressed, ref.completion, trace);
  ProbeResult out;
  out.fdt = fdt(ref.completion, logits, spec.prefix_len);
  out.sdt = sdt(ref.completion, logits, spec.prefix_len);
  out.dppl = ppl(ref.completion, logits, spec.prefix_len);
  if (with_ppl) {
    if (ref.ppl_target == ref.completion) {
      out.ppl = ppl(ref.completion, logits, 1);
    } else {
      const Matrix gt_logits = forward(compressed, ref.ppl_target);
      out.ppl = ppl(ref.ppl_target, gt_logits, 1);
    }
  }
  return out;
}

ProbeResult probe_pair(const FrozenModel& base, const FrozenModel& compressed, std::span<const Token> prefix,
                       const ProbeSpec& spec) {
  spec.validate();
  if (prefix.size() != spec.prefix_len) throw ArgumentError("probe prefix must have exactly n tokens");
  Reference ref;
  ref.completion = greedy_decode(base, prefix, spec.total_len);
  ref.ppl_target = ref.completion;
  return evaluate_probe(compressed, ref, spec, false);
}

// ---- reports ----

DivergenceReport DivergenceReport::from_records(const ProbeSpec& spec, std::vector<ProbeRecord> records,
                                                std::string ppl_source) {
  if (records.empty()) throw ArgumentError("report needs at least one probe");
  DivergenceReport rep;
  rep.spec = spec;
  rep.ppl_source = std::move(ppl_source);
  rep.records = std::move(records);
  auto& a = rep.aggregates;
  a.probes = rep.records.size();
  const auto fdts = rep.fdt_values();
  std::vector<double> sdts;
  for (const auto& r : rep.records) {
    sdts.push_back(static_cast<double>(r.sdt));
    a.full_matches += (r.fdt == spec.completion_len());
  }
  a.mean_fdt = mean(fdts);
  a.median_fdt = quantile(fdts, Quantile(0.5));
  a.fdt_75 = quantile(fdts, Quantile(0.75));
  a.mean_sdt = mean(sdts);
  a.mean_dppl = mean(rep.dppl_values());
  a.mean_ppl = mean(rep.ppl_values());
  return rep;
}

std::vector<double> DivergenceReport::fdt_values() const {
  std::vector<double> v;
  for (const auto& r : records) v.push_back(static_cast<double>(r.fdt));
  return v;
}

std::vector<double> DivergenceReport::ppl_values() const {
  std::vector<double> v;
  for (const auto& r : records) v.push_back(r.ppl);
  return v;
}

std::vector<double> DivergenceReport::dppl_values() const {
  std::vector<double> v;
  for (const auto& r : records) v.push_back(r.dppl);
  return v;
}

void DivergenceReport::validate() const {
  try {
    spec.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(e.what());
  }
  if (ppl_source != "ground_truth" && ppl_source != "base_completion") {
    throw FormatError("unknown ppl_source '" + ppl_source + "'");
  }
  if (records.empty()) throw FormatError("report has no records");
  const std::size_t cap = spec.completion_len();
  constexpr double kTol = 1e-12;
  for (const auto& r : records) {
    const std::string where = "probe " + std::to_string(r.probe_id) + ": ";
    if (r.fdt > cap) throw FormatError(where + "fdt exceeds completion length");
    if (r.sdt > cap) throw FormatError(where + "sdt exceeds completion length");
    if (r.fdt == cap && r.sdt != 0) throw FormatError(where + "full match with nonzero sdt");
    if (r.fdt < cap && r.sdt == 0) throw FormatError(where + "divergence with zero sdt");
    if (!(r.dppl >= 1.0 - kTol) || !std::isfinite(r.dppl)) throw FormatError(where + "dppl below 1");
    if (!(r.ppl >= 1.0 - kTol) || !std::isfinite(r.ppl)) throw FormatError(where + "ppl below 1");
  }
  if (aggregates.probes != records.size()) throw FormatError("aggregate probe count mismatch");
  const auto expect = from_records(spec, records, ppl_source).aggregates;
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); };
  if (expect.full_matches != aggregates.full_matches || !close(expect.mean_fdt, aggregates.mean_fdt) ||
      !close(expect.median_fdt, aggregates.median_fdt) || !close(expect.fdt_75, aggregates.fdt_75) ||
      !close(expect.mean_sdt, aggregates.mean_sdt) || !close(expect.mean_dppl, aggregates.mean_dppl) ||
      !close(expect.mean_ppl, aggregates.mean_ppl)) {
    throw FormatError("aggregates inconsistent with records");
  }
}

DivergenceReport evaluate(const FrozenModel& compressed, const ReferenceSet& refs, const EvalOptions& opts) {
  if (refs.items.empty()) throw ArgumentError("empty probe dataset");
  std::vector<ProbeRecord> records(refs.items.size());
  parallel_for(refs.items.size(), opts.workers, [&](std::size_t i) {
    const auto& ref = refs.items[i];
    const auto res = evaluate_probe(compressed, ref, refs.spec, opts.with_ppl);
    records[i] = {ref.probe_id, res.fdt, res.sdt, res.dppl, opts.with_ppl ? res.ppl : 1.0};
  });
  return DivergenceReport::from_records(refs.spec, std::move(records),
                                        refs.ground_truth ? "ground_truth" : "base_completion");
}

DivergenceReport aggregate(const FrozenModel& base, const FrozenModel& compressed,
                           std::span<const TokenSequence> dataset, const ProbeSpec& spec, std::size_t workers) {
  if (dataset.empty()) throw ArgumentError("empty probe dataset");
  const auto refs = build_references(base, dataset, spec, workers);
  return evaluate(compressed, refs, {.with_ppl = true, .workers = workers});
}

// ---- propositions ----

namespace {

struct TopTwo {
  std::size_t first = 0;
  std::size_t second = 0;
};

TopTwo top_two(std::span<const double> row) {
  TopTwo t{0, 1};
  if (row[1] > row[0]) std::swap(t.first, t.second);
  for (std::size_t j = 2; j < row.size(); ++j) {
    if (row[j] > row[t.first]) {
      t.second = t.first;
      t.first = j;
    } else if (row[j] > row[t.second]) {
      t.second = j;
    }
  }
  return t;
}

bool has_repeats(std::span<const double> row) {
  std::vector<double> sorted(row.begin(), row.end());
  std::sort(sorted.begin(), sorted.end());
  return std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
}

void require_delta(double delta) {
  if (!(delta > 0.0) || !std::isfinite(delta)) throw ArgumentError("delta must be positive and finite");
}

}  // namespace

Matrix construct_ppl_adversary(const Matrix& logits, double delta) {
  require_delta(delta);
  if (logits.cols() < 2) throw PreconditionError("adversary needs at least two vocabulary entries");
  if (!logits.all_finite()) throw DomainError("non-finite logits");
  Matrix out = logits;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    if (has_repeats(row)) throw PreconditionError("row " + std::to_string(i) + " has repeated values");
    const auto t = top_two(row);
    if (!(row[t.first] - row[t.second] < delta)) {
      throw PreconditionError("row " + std::to_string(i) + " leader gap is not below delta");
    }
    out(i, t.second) += delta;
  }
  return out;
}

Matrix narrow_top_gaps(const Matrix& logits, double delta) {
  require_delta(delta);
  if (logits.cols() < 2) throw PreconditionError("adversary needs at least two vocabulary entries");
  if (!logits.all_finite()) throw DomainError("non-finite logits");
  Matrix out = logits;
  const double step = delta * 1e-3 / static_cast<double>(logits.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    // Jitter: later duplicates of a value move up by multiples of a sub-delta step.
    for (int pass = 0; pass < 8 && has_repeats(row); ++pass) {
      for (std::size_t j = 1; j < row.size(); ++j) {
        std::size_t dup = 0;
        for (std::size_t k = 0; k < j; ++k) dup += (row[k] == row[j]);
        if (dup > 0) row[j] += static_cast<double>(dup) * step;
      }
    }
    if (has_repeats(row)) throw InvariantViolation("jitter failed to separate repeated logits");
    const auto t = top_two(row);
    if (row[t.first] - row[t.second] > delta / 2) row[t.second] = row[t.first] - delta / 2;
  }
  return out;
}

BoundCheck check_dppl_bound(const Matrix& reference, const Matrix& candidate, std::size_t n) {
  const auto cmp = compare_logits(reference, candidate, n);
  BoundCheck out;
  out.sdt = cmp.sdt;
  out.dppl = cmp.dppl;
  out.bound = static_cast<double>(reference.rows() - n) / std::numbers::ln2 * std::log(cmp.dppl);
  out.holds = static_cast<double>(out.sdt) <= out.bound + 1e-9 * std::max(1.0, out.bound);
  return out;
}

}  // namespace dtm
