// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dtm/compress.hpp"
#include "dtm/harness.hpp"
#include "dtm/planner.hpp"
#include "dtm/quantsearch.hpp"
#include "dtm/report.hpp"
#include "dtm/train.hpp"

using namespace dtm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

TokenSequence random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<Token>(pick(rng, 0, vocab - 1));
  return t;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Matrix m(r, c);
  for (double& v : m.values()) v = d(rng);
  return m;
}

ModelConfig toy_config(std::size_t layers) {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 24;
  c.max_seq = 64;
  return c;
}

// ---- shared desk model for 7 and 8 ----

struct Desk {
  Corpus corpus;
  ToyModel base{ModelConfig{}};
  double pretrain_seconds = 0.0;
};

const Desk& desk() {
  static const Desk d = [] {
    Desk out;
    out.corpus = Corpus::load(DTM_CORPUS);
    const auto t0 = Clock::now();
    out.base = random_init(ModelConfig{}, 1);
    TrainConfig tc;
    tc.optimizer = Optimizer::AdamW;
    tc.learning_rate = 3e-3;
    tc.batch_size = 4;
    tc.seq_len = 128;
    BatchSampler data(out.corpus.tokens, tc.seq_len, 5);
    const auto trace = train(out.base, tc, data, 2500);
    out.pretrain_seconds = seconds_since(t0);
    double tail = 0.0;
    for (std::size_t i = trace.records.size() - 100; i < trace.records.size(); ++i) tail += trace.records[i].loss;
    std::cout << "  desk model pretrained in " << fmt(out.pretrain_seconds) << " s, mean loss of last 100 steps "
              << fmt(tail / 100.0) << std::endl;
    return out;
  }();
  return d;
}

// ---- criteria ----

Outcome criterion1() {
  const auto t0 = Clock::now();
  const auto r = run_prop1(64, 16, 1e-6, 1);
  const double t = seconds_since(t0);
  return {r.passed && r.sdt == 64 && t < 1.0,
          "sdt=" + std::to_string(r.sdt) + "/64 |dPPL|=" + fmt(r.ppl_change) + " t=" + fmt(t) + "s"};
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  const auto r = run_prop2(10000, 16, 32, 4, 2);
  const double t = seconds_since(t0);
  return {r.passed && t < 30.0, "violations=" + std::to_string(r.violations) + "/" + std::to_string(r.trials) +
                                    " max sdt/bound=" + fmt(r.max_ratio) + " t=" + fmt(t) + "s"};
}

std::size_t two_decode_fdt(const FrozenModel& a, const FrozenModel& b, std::span<const Token> prefix,
                           const ProbeSpec& spec) {
  const auto za = greedy_decode(a, prefix, spec.total_len);
  const auto zb = greedy_decode(b, prefix, spec.total_len);
  for (std::size_t i = spec.prefix_len; i < spec.total_len; ++i) {
    if (za[i] != zb[i]) return i - spec.prefix_len;
  }
  return spec.completion_len();
}

Outcome criterion3() {
  std::mt19937_64 rng(3);
  std::size_t probes = 0, bad = 0, diverged = 0;
  for (int pair = 0; pair < 100; ++pair) {
    const auto cfg = toy_config(1 + pair % 2);
    auto a = random_init(cfg, rng());
    // Half the pairs are perturbations of each other, half independent.
    ToyModel b = pair % 2 ? random_init(cfg, rng()) : a;
    if (pair % 2 == 0) {
      const double sd = std::pow(10.0, std::uniform_real_distribution<double>(-3.0, 0.0)(rng));
      for (const auto& id : b.components()) {
        auto m = b.get_component(id);
        for (double& v : m.values()) v += std::normal_distribution<double>(0.0, sd)(rng);
        b.set_component(id, std::move(m));
      }
    }
    const auto fa = a.freeze(), fb = b.freeze();
    for (int p = 0; p < 5; ++p, ++probes) {
      const std::size_t n = pick(rng, 1, 8);
      const ProbeSpec spec{n, n + pick(rng, 1, 24)};
      const auto prefix = random_tokens(n, cfg.vocab_size, rng);
      const auto ab = probe_pair(fa, fb, prefix, spec).fdt;
      const auto ba = probe_pair(fb, fa, prefix, spec).fdt;
      if (ab != ba || ab != two_decode_fdt(fa, fb, prefix, spec)) ++bad;
      if (ab < spec.completion_len()) ++diverged;
    }
  }
  return {bad == 0, "pairs=100 probes=" + std::to_string(probes) + " mismatches=" + std::to_string(bad) +
                        " probes with a divergence=" + std::to_string(diverged)};
}

Outcome criterion4() {
  const auto t0 = Clock::now();
  ModelConfig cfg;  // default desk dimensions, two layers
  cfg.n_layers = 2;
  cfg.vocab_size = 48;
  cfg.max_seq = 16;
  auto model = random_init(cfg, 4);
  std::mt19937_64 rng(4);
  for (auto& g : model.weights().final_norm) g = 0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (auto& layer : model.weights().layers) {
    for (auto& g : layer.attn_norm) g = 0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (auto& g : layer.mlp_norm) g = 0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  }
  const std::vector<TokenSequence> batch{random_tokens(6, 48, rng), random_tokens(4, 48, rng)};
  const auto analytic = loss_and_grads(model, batch, false);
  std::vector<std::span<const double>> gs;
  analytic.grads.for_each_tensor([&](const std::string&, std::span<const double> s) { gs.push_back(s); });
  std::vector<std::span<double>> ws;
  std::vector<std::string> names;
  model.weights().for_each_tensor([&](const std::string& n, std::span<double> s) {
    ws.push_back(s);
    names.push_back(n);
  });
  constexpr double h = 1e-5, floor = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  for (std::size_t t = 0; t < ws.size(); ++t) {
    for (std::size_t i = 0; i < ws[t].size(); ++i, ++checked) {
      const double orig = ws[t][i];
      ws[t][i] = orig + h;
      const double up = batch_loss(model.freeze(false), batch);
      ws[t][i] = orig - h;
      const double down = batch_loss(model.freeze(false), batch);
      ws[t][i] = orig;
      const double fd = (up - down) / (2 * h);
      const double err = std::abs(gs[t][i] - fd) / std::max(std::abs(gs[t][i]) + std::abs(fd), floor);
      if (err > worst) {
        worst = err;
        where = names[t] + "[" + std::to_string(i) + "]";
      }
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && t < 120.0, "parameters=" + std::to_string(checked) + " worst rel err=" + fmt(worst) +
                                          " at " + where + " t=" + fmt(t) + "s"};
}

ComponentId component(std::size_t i) { return {0, kAllKinds[i]}; }

double min_fdt(const FdtSparseMap& map, const std::map<ComponentId, double>& added) {
  double m = map.max_fdt;
  for (const auto& [id, a] : added) m = std::min(m, curve_value(map.curves.at(id), a));
  return m;
}

Outcome criterion5() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::array<double, 5> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t wins = 0, ties = 0, losses = 0;
  double worst_gap = std::numeric_limits<double>::infinity();
  for (int inst = 0; inst < 50; ++inst) {
    FdtSparseMap map;
    map.max_fdt = static_cast<double>(pick(rng, 8, 100));
    map.step = 0.02 + 0.28 * u(rng);
    std::map<ComponentId, double> w;
    for (std::size_t i = 0; i < 3; ++i) {
      const double a = map.max_fdt * (0.02 + 0.96 * u(rng));
      const double b = a * (0.02 + 0.96 * u(rng));
      map.curves[component(i)] = make_curve(map.step, map.max_fdt, a, b);
      map.current[component(i)] = 0.0;
      w[component(i)] = static_cast<double>(pick(rng, 16, 5000));
    }
    const double target = 0.01 + 0.94 * u(rng);
    const auto plan = allocate(map, target, w);
    double oracle = -1.0;
    for (double a : grid)
      for (double b : grid)
        for (double c : grid) {
          const std::map<ComponentId, double> added{{component(0), a}, {component(1), b}, {component(2), c}};
          if (weighted_mean(added, w) + 1e-12 < target) continue;
          oracle = std::max(oracle, min_fdt(map, added));
        }
    const double got = min_fdt(map, plan.added);
    const double gap = got - oracle;
    worst_gap = std::min(worst_gap, gap);
    if (std::abs(plan.achieved - target) > 1e-9) ++losses;
    else if (gap > 1e-9) ++wins;
    else if (gap >= -1e-9) ++ties;
    else ++losses;
  }
  return {losses == 0, "instances=50 plan>grid=" + std::to_string(wins) + " plan=grid=" + std::to_string(ties) +
                           " plan<grid=" + std::to_string(losses) + " min(plan-grid)=" + fmt(worst_gap)};
}

Outcome criterion6() {
  const auto& corpus = Corpus::load(DTM_CORPUS);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.max_seq = 64;
  std::size_t matched = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = random_init(cfg, 100 + seed);
    TrainConfig tc;
    tc.optimizer = Optimizer::AdamW;
    tc.batch_size = 8;
    tc.seq_len = 64;
    BatchSampler data(corpus.tokens, tc.seq_len, seed);
    train(model, tc, data, 300);
    const ProbeSpec spec{16, 48};
    const auto prefixes = sample_prefixes(corpus, 64, spec.prefix_len, 1000 + seed).items;
    const auto refs = build_references(model.freeze(), prefixes, spec);
    SearchConfig sc;
    sc.width = 10;
    sc.max_depth = 3;
    sc.census = false;
    sc.quant.bits = 4;
    const auto log = run_search(model, refs, sc);
    const auto best = exhaustive_best(model, refs, sc, 3);
    const auto& beam = log.depths.at(2).frontier.front();
    const bool ok = beam.set == best.set;
    matched += ok;
    detail << (seed ? " " : "") << (ok ? "=" : "x") << fmt(beam.score, 3) << "/" << fmt(best.score, 3);
  }
  return {matched == 10, "matched=" + std::to_string(matched) + "/10 beam/exhaustive score: " + detail.str()};
}

Outcome criterion7() {
  const auto t0 = Clock::now();
  const auto& d = desk();
  const ProbeSpec spec{64, 128};
  const auto prefixes = sample_prefixes(d.corpus, 1000, spec.prefix_len, 1).items;
  const auto refs = build_references(d.base.freeze(), prefixes, spec);
  DiscriminateOptions opts;
  opts.fraction = 0.001;
  opts.resamples = 1000;
  const auto r = discriminate(d.base, refs, opts);
  const double t = seconds_since(t0);
  const bool fdt_sep = r.fdt.significant;
  const bool ppl_quiet = std::abs(r.ppl.difference) <= 2.0 * r.ppl.bootstrap_se;
  return {fdt_sep && ppl_quiet && t < 900.0,
          "FDT diff=" + fmt(r.fdt.difference) + " se=" + fmt(r.fdt.bootstrap_se) + " PPL diff=" +
              fmt(r.ppl.difference) + " se=" + fmt(r.ppl.bootstrap_se) + " DPPL diff=" + fmt(r.dppl.difference) +
              " se=" + fmt(r.dppl.bootstrap_se) + " t=" + fmt(t) + "s (pretraining included)"};
}

Outcome criterion8() {
  const auto& d = desk();
  const auto t0 = Clock::now();
  const ProbeSpec spec{32, 96};
  const auto probes = sample_prefixes(d.corpus, 64, spec.prefix_len, 11).items;
  const auto eval = sample_windows(d.corpus, 128, spec.total_len, 12).items;
  const auto eval_refs = build_references(d.base.freeze(), eval, spec);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seq_len = 128;
  tc.learning_rate = 0.05;
  tc.optimizer = Optimizer::Sgd;
  std::map<AllocationMode, double> final_dppl;
  std::ostringstream detail;
  for (auto mode : {AllocationMode::Balanced, AllocationMode::Uniform}) {
    auto model = d.base;
    MaskedRoundTrainer trainer(tc, d.corpus.tokens);
    ScheduleOptions o;
    o.mode = mode;
    const auto rounds = run_schedule(model, probes, spec, eval_refs, trainer, o);
    const auto& last = rounds.back();
    final_dppl[mode] = last.report.aggregates.mean_dppl;
    detail << (mode == AllocationMode::Balanced ? "balanced" : " uniform") << " sparsity=" << fmt(last.model_sparsity, 3)
           << " DPPL=" << fmt(last.report.aggregates.mean_dppl) << " FDT=" << fmt(last.report.aggregates.mean_fdt);
    std::cout << "  " << (mode == AllocationMode::Balanced ? "balanced" : "uniform") << " arm done at "
              << fmt(seconds_since(t0)) << " s" << std::endl;
  }
  const double t = seconds_since(t0);
  const bool ok = final_dppl[AllocationMode::Balanced] <= final_dppl[AllocationMode::Uniform] && t < 3600.0;
  return {ok, detail.str() + " t=" + fmt(t) + "s (pretraining excluded)"};
}

// Each property runs at least 1000 cases; returns the failing property name or "".
Outcome criterion9() {
  std::vector<std::string> failed;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t cases = 1000;

  bool ok = true;
  for (std::size_t t = 0; t < cases && ok; ++t) {
    const std::size_t r = pick(rng, 1, 12), c = pick(rng, 1, 12);
    auto w = random_matrix(r, c, rng);
    if (t % 5 == 0)
      for (double& v : w.values()) v = std::round(v);
    Mask mask(r, c);
    double target = 0.0;
    for (int round = 0; round < 5 && ok; ++round) {
      target = std::min(1.0, target + u(rng) * 0.4);
      const auto next = round % 2 ? random_mask(w, mask, SparsityLevel(target), rng())
                                  : magnitude_mask(w, mask, SparsityLevel(target));
      ok = next.covers(mask) && next.zeros() == target_zero_count(SparsityLevel(target), w.size());
      mask = next;
    }
  }
  if (!ok) failed.push_back("mask monotonicity");

  ok = true;
  for (std::size_t t = 0; t < cases && ok; ++t) {
    const QuantSpec spec{t % 2 ? 4 : 8};
    const double sd = std::pow(10.0, -4.0 + 7.0 * u(rng));
    const auto w = random_matrix(pick(rng, 1, 10), pick(rng, 1, 10), rng, sd);
    const double scale = absmax_scale(w, spec);
    const auto q = absmax_quantize_dequantize(w, spec);
    const auto qq = absmax_quantize_dequantize(q, spec);
    for (std::size_t i = 0; i < w.size() && ok; ++i) {
      const double a = q.values()[i];
      ok = std::abs(a - w.values()[i]) <= scale / 2 * (1 + 1e-12) &&
           std::abs(qq.values()[i] - a) <= 1e-12 * std::max(1.0, std::abs(a));
    }
  }
  if (!ok) failed.push_back("absmax idempotence / half-step bound");

  ok = true;
  for (std::size_t t = 0; t < cases && ok; ++t) {
    auto model = random_init(toy_config(1 + t % 2), rng());
    for (auto& layer : model.weights().layers)
      for (double& g : layer.attn_norm) g = std::exp(std::normal_distribution<double>(0.0, 0.7)(rng));
    ForwardTrace trace;
    forward(model.freeze(), random_tokens(pick(rng, 1, 8), 32, rng), &trace);
    std::array<double, 5> th;
    for (double& x : th) x = 4.0 * u(rng);
    std::sort(th.begin(), th.end());
    std::map<ComponentId, std::size_t> prev;
    for (double x : th) {
      auto census = empty_census(model.config(), x);
      add_outliers(census, trace);
      for (const auto& [id, n] : census.counts)
        if (!prev.empty() && n > prev[id]) ok = false;
      prev = census.counts;
    }
  }
  if (!ok) failed.push_back("census threshold monotonicity");

  ok = true;
  for (std::size_t t = 0; t < cases && ok; ++t) {
    auto cfg = toy_config(1);
    cfg.d_model = 8;
    cfg.d_ff = 8;
    cfg.max_seq = 16;
    const auto model = random_init(cfg, rng());
    const std::size_t n = pick(rng, 1, 8);
    const std::size_t N = n + pick(rng, 0, 8);
    const auto prefix = random_tokens(n, 32, rng);
    const auto a = greedy_decode(model, prefix, N);
    ok = a == greedy_decode(model.freeze(), prefix, N) && a == greedy_decode(ToyModel(model), prefix, N);
  }
  if (!ok) failed.push_back("greedy decode determinism");

  ok = true;
  for (std::size_t t = 0; t < cases && ok; ++t) {
    const std::size_t n = pick(rng, 1, 50);
    const ProbeSpec spec{n, n + pick(rng, 1, 150)};
    const std::size_t cap = spec.completion_len();
    std::vector<ProbeRecord> recs(pick(rng, 1, 12));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto& r = recs[i];
      r.probe_id = i * 3 + pick(rng, 0, 2);
      r.fdt = pick(rng, 0, cap);
      r.sdt = r.fdt == cap ? 0 : pick(rng, 1, cap - r.fdt);
      r.dppl = 1.0 + std::exp(12.0 * u(rng) - 8.0) * u(rng);
      r.ppl = 1.0 + 300.0 * u(rng) * u(rng);
    }
    const auto rep =
        DivergenceReport::from_records(spec, std::move(recs), rng() % 2 ? "ground_truth" : "base_completion");
    ok = report_from_json(nlohmann::json::parse(report_to_json(rep).dump())) == rep &&
         report_from_csv(report_to_csv(rep), rep.spec, rep.ppl_source) == rep;
  }
  if (!ok) failed.push_back("report round trips");

  std::string detail = "5 properties x " + std::to_string(cases) + " cases";
  for (const auto& f : failed) detail += "; FAILED " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  if (only.empty()) only = {1, 2, 3, 4, 5, 6, 7, 8, 9};

  const std::array<std::function<Outcome()>, 9> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                          criterion6, criterion7, criterion8, criterion9};
  int failures = 0;
  for (int c : std::set<int>(only.begin(), only.end())) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(c - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  ["
              << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
