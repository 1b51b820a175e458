#include "dtm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "dtm/parallel.hpp"
#include "dtm/report.hpp"

#ifndef DTM_VERSION
#define DTM_VERSION "unknown"
#endif

namespace dtm {

using nlohmann::json;

std::string_view code_version() noexcept { return DTM_VERSION; }

TokenSequence tokenize(std::string_view bytes) {
  TokenSequence out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(c);
  return out;
}

std::string detokenize(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t > 255) throw ArgumentError("token " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(t));
  }
  return out;
}

Corpus Corpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  Corpus c = from_text(buf.str());
  c.source = path;
  return c;
}

Corpus Corpus::from_text(std::string_view text) { return Corpus{{}, tokenize(text)}; }

Windows sample_windows(const Corpus& corpus, std::size_t count, std::size_t len, std::uint64_t seed) {
  if (len == 0) throw ArgumentError("window length must be positive");
  if (corpus.tokens.size() < len) {
    throw ArgumentError("corpus has " + std::to_string(corpus.tokens.size()) + " tokens, fewer than the window length " +
                        std::to_string(len));
  }
  Windows w;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.tokens.size() - len);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t o = offset(rng);
    w.offsets.push_back(o);
    w.items.emplace_back(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(o),
                         corpus.tokens.begin() + static_cast<std::ptrdiff_t>(o + len));
  }
  return w;
}

// ---- discrimination ----

ToyModel prune_all(const ToyModel& model, double fraction, PruneRule rule, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ArgumentError("prune fraction must lie in [0, 1]");
  ToyModel out = model;
  std::uint64_t s = seed;
  for (const auto& id : model.components()) {
    const auto& w = model.get_component(id);
    const SparsityLevel target(std::min(1.0, model.component_sparsity(id) + fraction));
    out.set_mask(id, rule == PruneRule::LowestMagnitude ? magnitude_mask(w, model.mask(id), target)
                                                        : random_mask(w, model.mask(id), target, s++));
  }
  return out;
}

double bootstrap_se_of_mean_difference(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                       std::uint64_t seed) {
  if (a.empty() || b.empty()) throw ArgumentError("bootstrap needs two nonempty samples");
  if (resamples < 2) throw ArgumentError("bootstrap needs at least two resamples");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_a(0, a.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_b(0, b.size() - 1);
  std::vector<double> diffs(resamples);
  for (auto& d : diffs) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += a[pick_a(rng)];
    for (std::size_t i = 0; i < b.size(); ++i) sb += b[pick_b(rng)];
    d = sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
  }
  return stddev(diffs);
}

namespace {

Separation separate(std::string name, const std::vector<double>& lowest, const std::vector<double>& random,
                    const DiscriminateOptions& opts) {
  Separation s;
  s.metric = std::move(name);
  s.mean_lowest = mean(lowest);
  s.mean_random = mean(random);
  s.difference = s.mean_lowest - s.mean_random;
  s.bootstrap_se = bootstrap_se_of_mean_difference(lowest, random, opts.resamples, opts.bootstrap_seed);
  s.significant = std::abs(s.difference) > 2.0 * s.bootstrap_se;
  return s;
}

}  // namespace

DiscriminateResult discriminate(const ToyModel& base, const ReferenceSet& refs, const DiscriminateOptions& opts) {
  DiscriminateResult r;
  const EvalOptions eval{.with_ppl = true, .workers = opts.workers};
  r.lowest = evaluate(prune_all(base, opts.fraction, PruneRule::LowestMagnitude, 0).freeze(true), refs, eval);
  r.random = evaluate(prune_all(base, opts.fraction, PruneRule::Random, opts.prune_seed).freeze(true), refs, eval);
  r.fdt = separate("fdt", r.lowest.fdt_values(), r.random.fdt_values(), opts);
  r.dppl = separate("dppl", r.lowest.dppl_values(), r.random.dppl_values(), opts);
  r.ppl = separate("ppl", r.lowest.ppl_values(), r.random.ppl_values(), opts);
  return r;
}

std::string discriminate_csv(const DiscriminateResult& r) {
  std::string out = "metric,mean_lowest,mean_random,difference,bootstrap_se,significant\n";
  for (const auto* s : {&r.fdt, &r.dppl, &r.ppl}) {
    out += s->metric + ',' + format_real(s->mean_lowest) + ',' + format_real(s->mean_random) + ',' +
           format_real(s->difference) + ',' + format_real(s->bootstrap_se) + ',' + (s->significant ? "yes" : "no") +
           '\n';
  }
  return out;
}

// ---- propositions ----

namespace {

Matrix normal_matrix(std::size_t rows, std::size_t cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace

Prop1Result run_prop1(std::size_t rows, std::size_t vocab, double delta, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Matrix logits = narrow_top_gaps(normal_matrix(rows, vocab, 1.0, rng), delta);
  const Matrix adversary = construct_ppl_adversary(logits, delta);
  const auto same = compare_logits(logits, logits, 0);
  const auto moved = compare_logits(logits, adversary, 0);
  Prop1Result r;
  r.rows = rows;
  r.sdt = moved.sdt;
  r.ppl_change = std::abs(moved.dppl - same.dppl);
  r.passed = r.sdt == rows && r.ppl_change < 1e-3;
  return r;
}

Prop2Result run_prop2(std::size_t trials, std::size_t vocab, std::size_t total_len, std::size_t prefix_len,
                      std::uint64_t seed) {
  if (prefix_len >= total_len) throw ArgumentError("prefix must be shorter than the sequence");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> log_scale(std::log(1e-3), std::log(10.0));
  Prop2Result r;
  r.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix ref = normal_matrix(total_len, vocab, 1.0 + 2.0 * (t % 3), rng);
    const Matrix noise = normal_matrix(total_len, vocab, std::exp(log_scale(rng)), rng);
    Matrix cand = ref;
    auto cv = cand.values();
    const auto nv = noise.values();
    for (std::size_t i = 0; i < cv.size(); ++i) cv[i] += nv[i];
    const auto check = check_dppl_bound(ref, cand, prefix_len);
    if (!check.holds) ++r.violations;
    if (check.bound > 0.0) r.max_ratio = std::max(r.max_ratio, static_cast<double>(check.sdt) / check.bound);
  }
  r.passed = r.violations == 0;
  return r;
}

// ---- commands ----

std::string_view command_name(Command c) noexcept {
  switch (c) {
    case Command::Metrics: return "metrics";
    case Command::Discriminate: return "discriminate";
    case Command::Sparsify: return "sparsify";
    case Command::Quantsearch: return "quantsearch";
    case Command::Train: return "train";
    case Command::Props: return "props";
  }
  return "?";
}

Command parse_command(std::string_view s) {
  for (auto c : {Command::Metrics, Command::Discriminate, Command::Sparsify, Command::Quantsearch, Command::Train,
                 Command::Props}) {
    if (command_name(c) == s) return c;
  }
  throw ArgumentError("unknown command '" + std::string(s) + "'");
}

json make_manifest(const RunContext& ctx, double wall_seconds, const json& extra) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return {{"schema", "dtm.manifest"},
          {"schema_version", 1},
          {"command", command_name(ctx.command)},
          {"config", ctx.config},
          {"seed", ctx.seed},
          {"workers", ctx.workers},
          {"code_version", code_version()},
          {"finished_at", stamp},
          {"wall_seconds", wall_seconds},
          {"results", extra}};
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("config key '") + key + "': " + e.what());
  }
}

const json& section(const json& cfg, const char* key) {
  static const json empty = json::object();
  if (!cfg.contains(key)) return empty;
  if (!cfg[key].is_object()) throw ArgumentError(std::string("config section '") + key + "' must be an object");
  return cfg[key];
}

std::filesystem::path existing_path(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw ArgumentError(std::string("config needs a path '") + key + "'");
  std::filesystem::path p = j[key].get<std::string>();
  if (!std::filesystem::exists(p)) throw ArgumentError("file not found: " + p.string());
  return p;
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  c.d_model = get_or(j, "d_model", c.d_model);
  c.n_heads = get_or(j, "n_heads", c.n_heads);
  c.n_layers = get_or(j, "n_layers", c.n_layers);
  c.d_ff = get_or(j, "d_ff", c.d_ff);
  c.max_seq = get_or(j, "max_seq", c.max_seq);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ArgumentError(std::string("model config: ") + e.what());
  }
  return c;
}

// {"checkpoint": path} or {"config": {...}, "init_seed": s}.
ToyModel load_model(const json& cfg, std::uint64_t seed) {
  const json& m = section(cfg, "model");
  if (m.contains("checkpoint")) return load_checkpoint(existing_path(m, "checkpoint"));
  return random_init(model_config_from(section(m, "config")), get_or<std::uint64_t>(m, "init_seed", seed));
}

ProbeSpec probe_spec_from(const json& cfg) {
  const json& p = section(cfg, "probe");
  ProbeSpec spec{get_or<std::size_t>(p, "prefix_len", 100), get_or<std::size_t>(p, "total_len", 200)};
  spec.validate();
  return spec;
}

// Ground-truth windows of N tokens; their first n tokens are the prefixes.
std::vector<TokenSequence> probe_windows(const json& cfg, const ProbeSpec& spec, std::uint64_t seed,
                                         json& echo) {
  const auto corpus = Corpus::load(existing_path(cfg, "corpus"));
  const json& p = section(cfg, "probe");
  const auto count = get_or<std::size_t>(p, "count", 1000);
  const auto probe_seed = get_or<std::uint64_t>(p, "seed", seed);
  auto w = sample_windows(corpus, count, spec.total_len, probe_seed);
  echo["probe_seed"] = probe_seed;
  echo["probe_offsets"] = w.offsets;
  return std::move(w.items);
}

TrainConfig train_config_from(const json& t, std::uint64_t seed) {
  TrainConfig c;
  c.learning_rate = get_or(t, "learning_rate", c.learning_rate);
  c.weight_decay = get_or(t, "weight_decay", c.weight_decay);
  c.batch_size = get_or(t, "batch_size", c.batch_size);
  c.seq_len = get_or(t, "seq_len", c.seq_len);
  c.masked_steps = get_or(t, "masked_steps", c.masked_steps);
  c.dense_steps = get_or(t, "dense_steps", c.dense_steps);
  c.seed = get_or<std::uint64_t>(t, "seed", seed);
  const auto opt = get_or<std::string>(t, "optimizer", "sgd");
  if (opt == "sgd") {
    c.optimizer = Optimizer::Sgd;
  } else if (opt == "adamw") {
    c.optimizer = Optimizer::AdamW;
  } else {
    throw ArgumentError("optimizer must be 'sgd' or 'adamw'");
  }
  c.validate();
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void write_report(const DivergenceReport& rep, const std::filesystem::path& dir, const std::string& stem) {
  const json j = report_to_json(rep);
  check_report_schema(j);
  write_text(dir / (stem + ".json"), j.dump(2) + "\n");
  write_text(dir / (stem + ".csv"), report_to_csv(rep));
}

json separation_json(const Separation& s) {
  return {{"mean_lowest", s.mean_lowest},
          {"mean_random", s.mean_random},
          {"difference", s.difference},
          {"bootstrap_se", s.bootstrap_se},
          {"significant", s.significant}};
}

int cmd_metrics(const RunContext& ctx, json& out) {
  const auto& cfg = ctx.config;
  const auto base = load_model(cfg, ctx.seed);
  const json& c = section(cfg, "compressed");
  ToyModel compressed = base;
  if (c.contains("checkpoint")) {
    compressed = load_checkpoint(existing_path(c, "checkpoint"));
  } else if (c.contains("plan")) {
    compressed = apply_plan(base, load_plan(existing_path(c, "plan")));
  }
  const auto spec = probe_spec_from(cfg);
  const auto windows = probe_windows(cfg, spec, ctx.seed, out);
  const auto refs = build_references(base.freeze(true), windows, spec, ctx.workers);
  const auto rep = evaluate(compressed.freeze(true), refs, {.with_ppl = true, .workers = ctx.workers});
  write_report(rep, ctx.out_dir, "report");
  out["mean_fdt"] = rep.aggregates.mean_fdt;
  out["fdt_75"] = rep.aggregates.fdt_75;
  out["mean_sdt"] = rep.aggregates.mean_sdt;
  out["mean_dppl"] = rep.aggregates.mean_dppl;
  out["mean_ppl"] = rep.aggregates.mean_ppl;
  return kExitOk;
}

int cmd_discriminate(const RunContext& ctx, json& out) {
  const auto& cfg = ctx.config;
  const auto base = load_model(cfg, ctx.seed);
  const auto spec = probe_spec_from(cfg);
  const auto windows = probe_windows(cfg, spec, ctx.seed, out);
  const auto refs = build_references(base.freeze(true), windows, spec, ctx.workers);
  const json& d = section(cfg, "discriminate");
  DiscriminateOptions opts;
  opts.fraction = get_or(d, "fraction", opts.fraction);
  opts.resamples = get_or(d, "resamples", opts.resamples);
  opts.prune_seed = get_or<std::uint64_t>(d, "prune_seed", ctx.seed);
  opts.bootstrap_seed = get_or<std::uint64_t>(d, "bootstrap_seed", ctx.seed);
  opts.workers = ctx.workers;
  const auto r = discriminate(base, refs, opts);
  write_report(r.lowest, ctx.out_dir, "lowest");
  write_report(r.random, ctx.out_dir, "random");
  write_text(ctx.out_dir / "comparison.csv", discriminate_csv(r));
  out["prune_seed"] = opts.prune_seed;
  out["bootstrap_seed"] = opts.bootstrap_seed;
  out["fdt"] = separation_json(r.fdt);
  out["dppl"] = separation_json(r.dppl);
  out["ppl"] = separation_json(r.ppl);
  std::cout << discriminate_csv(r);
  return kExitOk;
}

int cmd_sparsify(const RunContext& ctx, json& out) {
  const auto& cfg = ctx.config;
  auto model = load_model(cfg, ctx.seed);
  const auto base = model;
  const auto spec = probe_spec_from(cfg);
  const auto windows = probe_windows(cfg, spec, ctx.seed, out);
  ScheduleOptions opts;
  if (cfg.contains("schedule")) opts.schedule.increments = cfg["schedule"].get<std::vector<double>>();
  const auto mode = get_or<std::string>(cfg, "mode", "balanced");
  if (mode != "balanced" && mode != "uniform") throw ArgumentError("mode must be 'balanced' or 'uniform'");
  opts.mode = mode == "balanced" ? AllocationMode::Balanced : AllocationMode::Uniform;
  const auto crit = get_or<std::string>(cfg, "criterion", "fdt75");
  if (crit != "fdt75" && crit != "dppl") throw ArgumentError("criterion must be 'fdt75' or 'dppl'");
  opts.criterion = crit == "fdt75" ? ProbeCriterion::Fdt75 : ProbeCriterion::Dppl;
  opts.workers = ctx.workers;
  opts.out_dir = ctx.out_dir;
  opts.schedule.validate();

  std::unique_ptr<RoundTrainer> trainer;
  if (cfg.contains("train") && !cfg["train"].is_null()) {
    trainer = std::make_unique<MaskedRoundTrainer>(train_config_from(cfg["train"], ctx.seed),
                                                   Corpus::load(existing_path(cfg, "corpus")).tokens);
  } else {
    trainer = std::make_unique<NoOpTrainer>();
  }
  const auto refs = build_references(base.freeze(true), windows, spec, ctx.workers);
  const auto rounds = run_schedule(model, windows, spec, refs, *trainer, opts);
  save_checkpoint(model, ctx.out_dir / "final.ckpt");
  json summary = json::array();
  for (const auto& r : rounds) {
    summary.push_back({{"round", r.round},
                       {"cumulative_target", r.cumulative_target},
                       {"achieved_step", r.plan.achieved},
                       {"model_sparsity", r.model_sparsity},
                       {"mean_fdt", r.report.aggregates.mean_fdt},
                       {"fdt_75", r.report.aggregates.fdt_75},
                       {"mean_dppl", r.report.aggregates.mean_dppl},
                       {"mean_ppl", r.report.aggregates.mean_ppl}});
  }
  out["trainer"] = trainer->describe();
  out["rounds"] = summary;
  return kExitOk;
}

int cmd_quantsearch(const RunContext& ctx, json& out) {
  const auto& cfg = ctx.config;
  const auto base = load_model(cfg, ctx.seed);
  const auto spec = probe_spec_from(cfg);
  const auto windows = probe_windows(cfg, spec, ctx.seed, out);
  const auto refs = build_references(base.freeze(true), windows, spec, ctx.workers);
  const json& s = section(cfg, "search");
  SearchConfig sc;
  sc.width = get_or(s, "width", sc.width);
  sc.criterion = parse_criterion(get_or<std::string>(s, "criterion", "fdt"));
  const auto stat = get_or<std::string>(s, "statistic", "mean");
  if (stat != "mean" && stat != "fdt75") throw ArgumentError("statistic must be 'mean' or 'fdt75'");
  sc.fdt_statistic = stat == "mean" ? FdtStatistic::Mean : FdtStatistic::Quantile75;
  sc.quant.bits = get_or(s, "bits", sc.quant.bits);
  sc.max_depth = get_or(s, "max_depth", sc.max_depth);
  sc.greedy = get_or(s, "greedy", sc.greedy);
  sc.census = get_or(s, "census", sc.census);
  sc.outlier_threshold = get_or(s, "outlier_threshold", sc.outlier_threshold);
  sc.workers = ctx.workers;
  sc.validate(base.components().size());
  const auto log = run_search(base, refs, sc);
  write_text(ctx.out_dir / "search.jsonl", log.to_jsonl());
  write_text(ctx.out_dir / "frontier.csv", log.frontier_csv());
  for (auto k : get_or<std::vector<std::size_t>>(cfg, "top_k", {log.depths.size()})) {
    save_plan(top_k_plan(log, k), ctx.out_dir / ("plan_top_" + std::to_string(k) + ".json"));
  }
  out["evaluated"] = log.evaluated.size();
  out["fdt_nonimproving"] = log.fdt_nonimproving;
  if (get_or(s, "exhaustive_check", false)) {
    const std::size_t depth = log.depths.size();
    const auto best = exhaustive_best(base, refs, sc, depth);
    const bool match = best.set == log.depths.back().frontier.front().set;
    out["exhaustive_match"] = match;
    if (!match) return kExitAssertion;
  }
  return kExitOk;
}

int cmd_train(const RunContext& ctx, json& out) {
  const auto& cfg = ctx.config;
  auto model = load_model(cfg, ctx.seed);
  const auto corpus = Corpus::load(existing_path(cfg, "corpus"));
  const json& t = section(cfg, "train");
  const auto tc = train_config_from(t, ctx.seed);
  const auto steps = get_or<std::size_t>(t, "steps", 1000);
  BatchSampler sampler(corpus.tokens, tc.seq_len, tc.seed);
  const auto trace = train(model, tc, sampler, steps);
  save_checkpoint(model, ctx.out_dir / "model.ckpt");
  write_text(ctx.out_dir / "loss.csv", trace.to_csv());
  out["optimizer"] = optimizer_name(tc.optimizer);
  out["train_seed"] = tc.seed;
  out["final_loss"] = trace.records.empty() ? 0.0 : trace.records.back().loss;
  return kExitOk;
}

int cmd_props(const RunContext& ctx, json& out) {
  const json& p1 = section(ctx.config, "prop1");
  const json& p2 = section(ctx.config, "prop2");
  const auto r1 = run_prop1(get_or<std::size_t>(p1, "rows", 64), get_or<std::size_t>(p1, "vocab", 16),
                            get_or(p1, "delta", 1e-6), get_or<std::uint64_t>(p1, "seed", ctx.seed));
  const auto r2 = run_prop2(get_or<std::size_t>(p2, "trials", 10000), get_or<std::size_t>(p2, "vocab", 16),
                            get_or<std::size_t>(p2, "total_len", 32), get_or<std::size_t>(p2, "prefix_len", 4),
                            get_or<std::uint64_t>(p2, "seed", ctx.seed));
  out["prop1"] = {{"rows", r1.rows}, {"sdt", r1.sdt}, {"ppl_change", r1.ppl_change}, {"passed", r1.passed}};
  out["prop2"] = {
      {"trials", r2.trials}, {"violations", r2.violations}, {"max_ratio", r2.max_ratio}, {"passed", r2.passed}};
  write_text(ctx.out_dir / "props.json", out.dump(2) + "\n");
  std::cout << "prop1 " << (r1.passed ? "PASS" : "FAIL") << " sdt=" << r1.sdt << " dppl_change=" << r1.ppl_change
            << "\nprop2 " << (r2.passed ? "PASS" : "FAIL") << " violations=" << r2.violations << "/" << r2.trials
            << "\n";
  return r1.passed && r2.passed ? kExitOk : kExitAssertion;
}

}  // namespace

int run(const RunContext& ctx) {
  if (!ctx.config.is_object()) throw ArgumentError("config must be a JSON object");
  if (ctx.workers == 0) throw ArgumentError("workers must be >= 1");
  std::filesystem::create_directories(ctx.out_dir);
  const auto start = std::chrono::steady_clock::now();
  json results = json::object();
  int status = kExitOk;
  switch (ctx.command) {
    case Command::Metrics: status = cmd_metrics(ctx, results); break;
    case Command::Discriminate: status = cmd_discriminate(ctx, results); break;
    case Command::Sparsify: status = cmd_sparsify(ctx, results); break;
    case Command::Quantsearch: status = cmd_quantsearch(ctx, results); break;
    case Command::Train: status = cmd_train(ctx, results); break;
    case Command::Props: status = cmd_props(ctx, results); break;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  results["exit_status"] = status;
  write_text(ctx.out_dir / "manifest.json", make_manifest(ctx, wall, results).dump(2) + "\n");
  return status;
}

}  // namespace dtm
