#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dtm/errors.hpp"
#include "dtm/metrics.hpp"
#include "dtm/report.hpp"
#include "support.hpp"

namespace dtm {
namespace {

using testing::random_matrix;
using testing::random_tokens;
using testing::tiny_config;
using testing::uniform_index;

// Logits whose argmax at row i is next[i] with a wide margin.
Matrix certain_logits(std::span<const Token> next, std::size_t vocab, double margin = 60.0) {
  Matrix l(next.size(), vocab);
  for (std::size_t i = 0; i < next.size(); ++i) l(i, next[i]) = margin;
  return l;
}

// Row i predicts y[i + 1]; the last row is unconstrained.
Matrix teacher_logits(std::span<const Token> y, std::size_t vocab) {
  TokenSequence next(y.begin() + 1, y.end());
  next.push_back(0);
  return certain_logits(next, vocab);
}

TEST(Metrics, NllExamples) {
  const TokenSequence y{0, 1, 2, 3};
  EXPECT_NEAR(nll(y, teacher_logits(y, 4), 1), 0.0, 1e-20);
  EXPECT_NEAR(nll(y, Matrix(4, 4), 1), std::log(4.0), 1e-15);
  EXPECT_NEAR(ppl(y, Matrix(4, 4), 1), 4.0, 1e-12);
  EXPECT_NEAR(ppl(y, teacher_logits(y, 4)), 1.0, 1e-12);

  // Hand oracle on three predicted positions.
  const auto l = Matrix::from_rows({{1.0, 0.0, 0.0, 0.0}, {0.0, 2.0, 0.0, 1.0}, {0.5, 0.5, 0.5, -1.0}, {9, 9, 9, 9}});
  const double a = -std::log(std::exp(0.0) / (std::exp(1.0) + 3.0));
  const double b = -std::log(std::exp(0.0) / (std::exp(2.0) + 2.0 + std::exp(1.0)));
  const double c = -std::log(std::exp(-1.0) / (3.0 * std::exp(0.5) + std::exp(-1.0)));
  EXPECT_NEAR(nll(y, l, 1), (a + b + c) / 3.0, 1e-14);
  EXPECT_NEAR(nll(y, l, 2), (b + c) / 2.0, 1e-14);
  EXPECT_NEAR(nll(y, l, 3), c, 1e-14);
}

TEST(Metrics, ArgumentErrors) {
  const TokenSequence y{0, 1, 2};
  const Matrix l(3, 4);
  EXPECT_THROW(nll(y, l, 3), ArgumentError);
  EXPECT_THROW(nll(y, l, 0), ArgumentError);
  EXPECT_THROW(sdt(y, Matrix(2, 4), 1), ArgumentError);
  EXPECT_THROW(fdt(y, l, 5), ArgumentError);
  EXPECT_THROW(nll(TokenSequence{0, 7}, Matrix(2, 4), 1), ArgumentError);
  EXPECT_THROW(ProbeSpec({0, 4}).validate(), ArgumentError);
  EXPECT_THROW(ProbeSpec({4, 4}).validate(), ArgumentError);
}

TEST(Metrics, FdtSdtExamples) {
  // 3-token prefix and 8 completion tokens; the 4th generated token is missed.
  TokenSequence y{5, 6, 7, 1, 2, 3, 4, 5, 6, 7, 1};
  auto l = teacher_logits(y, 8);
  EXPECT_EQ(fdt(y, l, 3), 8u);
  EXPECT_EQ(sdt(y, l, 3), 0u);
  // Row r predicts y[r + 1]; completion token k sits at y[3 + k], predicted by row 2 + k.
  l(2 + 3, y[6]) = 0.0;
  l(2 + 3, 0) = 100.0;
  EXPECT_EQ(fdt(y, l, 3), 3u);
  EXPECT_EQ(sdt(y, l, 3), 1u);
  EXPECT_EQ(divergent_positions(y, l, 3), (std::vector<std::size_t>{3}));

  auto first = teacher_logits(y, 8);
  first(2, 0) = 100.0;
  EXPECT_EQ(fdt(y, first, 3), 0u);

  Matrix wrong(y.size(), 8);
  for (std::size_t r = 0; r < y.size(); ++r) wrong(r, (y[(r + 1) % y.size()] + 1) % 8) = 5.0;
  EXPECT_EQ(sdt(y, wrong, 3), 8u);
  EXPECT_EQ(fdt(y, wrong, 3), 0u);
}

TEST(Metrics, FdtSdtAgainstBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t N = uniform_index(rng, 2, 12);
    const std::size_t n = uniform_index(rng, 1, N - 1);
    const std::size_t V = uniform_index(rng, 2, 5);
    const auto y = random_tokens(N, V, rng);
    const auto l = random_matrix(N, V, rng);
    std::size_t wrong = 0, first = N - n;
    bool seen = false;
    for (std::size_t pos = n; pos < N; ++pos) {
      const auto row = l.row(pos - 1);
      const std::size_t am = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (am != y[pos]) {
        ++wrong;
        if (!seen) first = pos - n;
        seen = true;
      }
    }
    const auto f = fdt(y, l, n);
    const auto s = sdt(y, l, n);
    ASSERT_EQ(s, wrong);
    ASSERT_EQ(f, first);
    ASSERT_LE(f, N - n);
    ASSERT_LE(s, N - n);
    ASSERT_EQ(f == N - n, s == 0);
    ASSERT_GE(ppl(y, l, n), 1.0);
  }
}

TEST(Metrics, InterErrorDistances) {
  EXPECT_TRUE(inter_error_distances(std::vector<std::size_t>{}).empty());
  EXPECT_TRUE(inter_error_distances(std::vector<std::size_t>{4}).empty());
  EXPECT_EQ(inter_error_distances(std::vector<std::size_t>{1, 4, 5, 9}), (std::vector<std::size_t>{3, 1, 4}));
}

TEST(Metrics, CompareLogitsAndBoundExamples) {
  std::mt19937_64 rng(2);
  const auto l = random_matrix(6, 5, rng);
  const auto same = compare_logits(l, l, 2);
  EXPECT_EQ(same.sdt, 0u);
  EXPECT_EQ(same.fdt, 4u);
  EXPECT_GE(same.dppl, 1.0);
  const auto b = check_dppl_bound(l, l, 2);
  EXPECT_TRUE(b.holds);
  EXPECT_EQ(b.sdt, 0u);

  // One compared row whose candidate is flat over 2 entries: dppl 2, bound 1.
  const auto ref = Matrix::from_rows({{0.0, 0.0}, {5.0, 0.0}});
  const auto cand = Matrix::from_rows({{0.0, 0.0}, {0.0, 0.0}});
  const auto c = check_dppl_bound(ref, cand, 1);
  EXPECT_NEAR(c.dppl, 2.0, 1e-15);
  EXPECT_NEAR(c.bound, 1.0, 1e-15);
  EXPECT_EQ(c.sdt, 0u);  // tie goes to the lowest index, which is the target
  EXPECT_TRUE(c.holds);
}

TEST(Metrics, DpplBoundHoldsOnRandomPairs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto ref = random_matrix(32, 16, rng, 1.0 + static_cast<double>(trial % 5));
    auto cand = ref;
    const double noise = std::pow(10.0, std::uniform_real_distribution<double>(-3.0, 1.0)(rng));
    for (double& v : cand.values()) v += std::normal_distribution<double>(0.0, noise)(rng);
    const std::size_t n = uniform_index(rng, 1, 31);
    ASSERT_TRUE(check_dppl_bound(ref, cand, n).holds) << trial;
  }
}

TEST(Metrics, PplAdversaryExamples) {
  const double d = 0.1;
  const auto row = Matrix::from_rows({{1.0, 1.0 - d / 2, 0.0}});
  const auto adv = construct_ppl_adversary(row, d);
  EXPECT_EQ(argmax_row(row, 0), 0u);
  EXPECT_EQ(argmax_row(adv, 0), 1u);
  EXPECT_THROW(construct_ppl_adversary(Matrix::from_rows({{1.0, 0.0, 0.5}}), d), PreconditionError);
  EXPECT_THROW(construct_ppl_adversary(Matrix::from_rows({{1.0, 1.0, 0.5}}), d), PreconditionError);
  EXPECT_THROW(construct_ppl_adversary(row, 0.0), ArgumentError);
  EXPECT_THROW(construct_ppl_adversary(Matrix(2, 1), d), PreconditionError);
}

TEST(Metrics, PplAdversaryFlipsEveryRow) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t N = uniform_index(rng, 1, 40);
    const std::size_t V = uniform_index(rng, 2, 20);
    auto l = random_matrix(N, V, rng, 3.0);
    if (trial % 7 == 0) l(0, 1) = l(0, 0);  // repeated values get jittered apart
    const double delta = std::pow(10.0, std::uniform_real_distribution<double>(-7.0, -1.0)(rng));
    const auto narrowed = narrow_top_gaps(l, delta);
    const auto adv = construct_ppl_adversary(narrowed, delta);
    double linf = 0.0;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      linf = std::max(linf, std::abs(adv.values()[i] - narrowed.values()[i]));
    }
    ASSERT_LE(linf, delta + 1e-13);  // slack for rounding at |l| ~ 10
    const auto cmp = compare_logits(narrowed, adv, 0);
    ASSERT_EQ(cmp.sdt, N);
    ASSERT_EQ(cmp.fdt, 0u);
    TokenSequence targets(N);
    for (std::size_t i = 0; i < N; ++i) targets[i] = static_cast<Token>(argmax_row(narrowed, i));
    ASSERT_LT(std::abs(ppl_rows(narrowed, targets, 0) - ppl_rows(adv, targets, 0)), 100 * delta * V);
  }
}

TEST(Probe, IdenticalModelsMatchFully) {
  std::mt19937_64 rng(5);
  const auto base = random_init(tiny_config(), 1).freeze();
  const ProbeSpec spec{6, 20};
  const auto prefix = random_tokens(6, 32, rng);
  const auto r = probe_pair(base, base, prefix, spec);
  EXPECT_EQ(r.fdt, 14u);
  EXPECT_EQ(r.sdt, 0u);
  const auto z = greedy_decode(base, prefix, 20);
  EXPECT_NEAR(r.dppl, ppl(z, forward(base, z), 6), 1e-15);
  EXPECT_THROW(probe_pair(base, base, random_tokens(5, 32, rng), spec), ArgumentError);
}

// First index where two independent greedy decodes disagree.
std::size_t two_decode_fdt(const FrozenModel& a, const FrozenModel& b, std::span<const Token> prefix,
                           const ProbeSpec& spec) {
  const auto za = greedy_decode(a, prefix, spec.total_len);
  const auto zb = greedy_decode(b, prefix, spec.total_len);
  for (std::size_t i = spec.prefix_len; i < spec.total_len; ++i) {
    if (za[i] != zb[i]) return i - spec.prefix_len;
  }
  return spec.completion_len();
}

TEST(Probe, FdtIsSymmetricAndMatchesTwoDecodeOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto seed = rng();
    auto a = random_init(tiny_config(), seed);
    auto b = a;
    // Small perturbation so divergence lands anywhere in the completion.
    const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-3.0, 0.0)(rng));
    for (const auto& id : b.components()) {
      auto m = b.get_component(id);
      for (double& v : m.values()) v += std::normal_distribution<double>(0.0, scale)(rng);
      b.set_component(id, std::move(m));
    }
    const auto fa = a.freeze(), fb = b.freeze();
    const std::size_t n = uniform_index(rng, 1, 8);
    const ProbeSpec spec{n, n + uniform_index(rng, 1, 24)};
    const auto prefix = random_tokens(n, 32, rng);
    const auto ab = probe_pair(fa, fb, prefix, spec);
    const auto ba = probe_pair(fb, fa, prefix, spec);
    ASSERT_EQ(ab.fdt, ba.fdt);
    ASSERT_EQ(ab.fdt, two_decode_fdt(fa, fb, prefix, spec));
    ASSERT_GE(ab.dppl, 1.0);
  }
}

TEST(Probe, ReferencesAndEvaluate) {
  std::mt19937_64 rng(7);
  const auto base = random_init(tiny_config(), 3).freeze();
  const ProbeSpec spec{4, 12};
  std::vector<TokenSequence> prefixes;
  for (int i = 0; i < 9; ++i) prefixes.push_back(random_tokens(4, 32, rng));
  const auto refs = build_references(base, prefixes, spec, 3);
  EXPECT_FALSE(refs.ground_truth);
  for (std::size_t i = 0; i < refs.items.size(); ++i) {
    EXPECT_EQ(refs.items[i].probe_id, i);
    EXPECT_EQ(refs.items[i].completion, greedy_decode(base, prefixes[i], 12));
  }
  const auto rep = evaluate(base, refs, {.with_ppl = true, .workers = 2});
  EXPECT_EQ(rep.ppl_source, "base_completion");
  EXPECT_EQ(rep.aggregates.fdt_75, 8.0);
  EXPECT_EQ(rep.aggregates.mean_sdt, 0.0);
  EXPECT_EQ(rep.aggregates.full_matches, 9u);
  EXPECT_NO_THROW(rep.validate());
  // Worker count does not change anything.
  EXPECT_EQ(rep, evaluate(base, refs, {.with_ppl = true, .workers = 1}));
  EXPECT_EQ(rep, aggregate(base, base, prefixes, spec, 4));

  std::vector<TokenSequence> windows;
  for (int i = 0; i < 3; ++i) windows.push_back(random_tokens(12, 32, rng));
  const auto gt = build_references(base, windows, spec);
  EXPECT_TRUE(gt.ground_truth);
  EXPECT_EQ(gt.items[0].ppl_target, windows[0]);
  const auto r0 = evaluate_probe(base, gt.items[0], spec);
  EXPECT_NEAR(r0.ppl, ppl(windows[0], forward(base, windows[0])), 1e-12);
  EXPECT_THROW(aggregate(base, base, std::vector<TokenSequence>{}, spec), ArgumentError);
  EXPECT_THROW(build_references(base, std::vector<TokenSequence>{{1, 2}}, spec), ArgumentError);
}

TEST(Report, AggregateExamples) {
  const ProbeSpec spec{10, 110};
  std::vector<ProbeRecord> recs{{0, 10, 3, 1.2, 5.0}, {1, 20, 1, 1.1, 4.0}, {2, 90, 2, 1.0, 3.0}};
  const auto rep = DivergenceReport::from_records(spec, recs, "ground_truth");
  EXPECT_EQ(rep.aggregates.fdt_75, 20.0);
  EXPECT_EQ(rep.aggregates.median_fdt, 20.0);
  EXPECT_NEAR(rep.aggregates.mean_fdt, 40.0, 1e-12);
  EXPECT_NEAR(rep.aggregates.mean_sdt, 2.0, 1e-12);
  const auto one = DivergenceReport::from_records(spec, {recs[1]}, "ground_truth");
  EXPECT_EQ(one.aggregates.mean_fdt, 20.0);
  EXPECT_EQ(one.aggregates.fdt_75, 20.0);
  EXPECT_EQ(one.aggregates.mean_ppl, 4.0);
  EXPECT_THROW(DivergenceReport::from_records(spec, {}, "ground_truth"), ArgumentError);
}

TEST(Report, ValidateRejectsBrokenRecords) {
  const ProbeSpec spec{2, 10};
  auto check = [&](ProbeRecord r) {
    auto rep = DivergenceReport::from_records(spec, {r}, "ground_truth");
    EXPECT_THROW(rep.validate(), FormatError);
  };
  check({0, 9, 1, 1.0, 1.0});    // fdt beyond N - n
  check({0, 8, 1, 1.0, 1.0});    // full match with errors
  check({0, 3, 0, 1.0, 1.0});    // divergence without errors
  check({0, 3, 2, 0.5, 1.0});    // dppl below 1
  check({0, 3, 2, 1.0, std::nan("")});
  auto rep = DivergenceReport::from_records(spec, {{0, 3, 2, 1.5, 2.0}}, "ground_truth");
  EXPECT_NO_THROW(rep.validate());
  rep.aggregates.mean_fdt = 4.0;
  EXPECT_THROW(rep.validate(), FormatError);
  rep = DivergenceReport::from_records(spec, {{0, 3, 2, 1.5, 2.0}}, "somewhere");
  EXPECT_THROW(rep.validate(), FormatError);
}

DivergenceReport random_report(std::mt19937_64& rng) {
  const std::size_t n = uniform_index(rng, 1, 50);
  const ProbeSpec spec{n, n + uniform_index(rng, 1, 150)};
  const std::size_t cap = spec.completion_len();
  std::vector<ProbeRecord> recs(uniform_index(rng, 1, 12));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto& r = recs[i];
    r.probe_id = i * 3 + uniform_index(rng, 0, 2);
    r.fdt = uniform_index(rng, 0, cap);
    r.sdt = r.fdt == cap ? 0 : uniform_index(rng, 1, cap - r.fdt);
    r.dppl = 1.0 + std::exp(12.0 * u(rng) - 8.0) * u(rng);
    r.ppl = 1.0 + 300.0 * u(rng) * u(rng);
  }
  return DivergenceReport::from_records(spec, std::move(recs), rng() % 2 ? "ground_truth" : "base_completion");
}

TEST(Report, JsonRoundTripProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto rep = random_report(rng);
    const auto j = report_to_json(rep);
    EXPECT_NO_THROW(check_report_schema(j));
    const auto back = report_from_json(nlohmann::json::parse(j.dump()));
    ASSERT_EQ(back, rep) << trial;
  }
}

TEST(Report, CsvRoundTripProperty) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto rep = random_report(rng);
    const auto csv = report_to_csv(rep);
    ASSERT_EQ(csv.substr(0, kReportCsvHeader.size()), kReportCsvHeader);
    ASSERT_EQ(report_from_csv(csv, rep.spec, rep.ppl_source), rep) << trial;
  }
}

TEST(Report, SchemaErrors) {
  std::mt19937_64 rng(10);
  const auto j = report_to_json(random_report(rng));
  auto bad = j;
  bad["schema"] = "other";
  EXPECT_THROW(check_report_schema(bad), FormatError);
  bad = j;
  bad["schema_version"] = kReportSchemaVersion + 1;
  EXPECT_THROW(report_from_json(bad), FormatError);
  bad = j;
  bad.erase("records");
  EXPECT_THROW(report_from_json(bad), FormatError);
  const ProbeSpec spec{1, 5};
  EXPECT_THROW(report_from_csv("probe,fdt\n", spec, "ground_truth"), FormatError);
  EXPECT_THROW(report_from_csv(std::string(kReportCsvHeader) + "\n0,1,x,1,1\n", spec, "ground_truth"), FormatError);
  EXPECT_THROW(report_from_csv(std::string(kReportCsvHeader) + "\n0,9,1,1,1\n", spec, "ground_truth"), FormatError);
}

}  // namespace
}  // namespace dtm
