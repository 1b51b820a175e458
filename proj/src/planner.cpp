#include "dtm/planner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dtm/parallel.hpp"
#include "dtm/report.hpp"

namespace dtm {

void FdtSparseMap::validate() const {
  for (const auto& [id, c] : curves) {
    const auto bad = [&](const std::string& what) { throw InvariantViolation("anchors of " + id.key() + ": " + what); };
    if (c.front().added != 0.0 || c.front().fdt != max_fdt) bad("first anchor must be (0, max)");
    if (c.back().added != 1.0 || c.back().fdt != 0.0) bad("last anchor must be (1, 0)");
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!(c[i].fdt >= 0.0 && c[i].fdt <= max_fdt)) bad("fdt outside [0, max]");
      if (i > 0 && !(c[i].added > c[i - 1].added)) bad("sparsities not strictly increasing");
    }
  }
}

AnchorCurve make_curve(double step, double max_fdt, double at_half, double at_three_halves) {
  if (!(step > 0.0 && 1.5 * step < 1.0)) throw ArgumentError("probe step must satisfy 0 < 1.5 * step < 1");
  const auto clamp = [max_fdt](double v) { return std::clamp(v, 0.0, max_fdt); };
  return {Anchor{0.0, max_fdt}, Anchor{step / 2, clamp(at_half)}, Anchor{1.5 * step, clamp(at_three_halves)},
          Anchor{1.0, 0.0}};
}

double interpolate_max_sparsity(const AnchorCurve& c, double f) {
  for (std::size_t k = c.size() - 1; k-- > 0;) {
    const Anchor& a = c[k];
    const Anchor& b = c[k + 1];
    if (b.fdt >= f) return b.added;
    if (a.fdt >= f) return a.added + (a.fdt - f) / (a.fdt - b.fdt) * (b.added - a.added);
  }
  return 0.0;
}

double curve_value(const AnchorCurve& c, double added) {
  added = std::clamp(added, 0.0, 1.0);
  for (std::size_t k = 0; k + 1 < c.size(); ++k) {
    if (added <= c[k + 1].added) {
      const double t = (added - c[k].added) / (c[k + 1].added - c[k].added);
      return c[k].fdt + t * (c[k + 1].fdt - c[k].fdt);
    }
  }
  return c.back().fdt;
}

// ---- probing ----

FdtSparseMap probe_components(const ToyModel& base, double step, const ReferenceSet& refs, const ProbeOptions& opts) {
  if (!(step > 0.0 && step < 1.0)) throw ArgumentError("probe step must lie in (0, 1)");
  if (1.5 * step >= 1.0) throw ArgumentError("probe step too large for four distinct anchors");
  if (refs.items.empty()) throw ArgumentError("probing needs at least one probe");

  const auto ids = base.components();
  const FrozenModel frozen = base.freeze(true);
  const double max_fdt = static_cast<double>(refs.spec.completion_len());
  double base_dppl = 1.0;
  if (opts.criterion == ProbeCriterion::Dppl) {
    base_dppl = evaluate(frozen, refs, {.with_ppl = false, .workers = opts.workers}).aggregates.mean_dppl;
  }

  const std::array<double, 2> offsets{step / 2, 1.5 * step};
  std::vector<double> measured(ids.size() * offsets.size(), 0.0);
  // Tasks run one probe set each; the probe loop itself stays sequential so the
  // per-task result does not depend on the worker count.
  parallel_for(measured.size(), opts.workers, [&](std::size_t task) {
    const ComponentId id = ids[task / offsets.size()];
    const double current = base.component_sparsity(id);
    if (current >= 1.0) return;
    const double target = std::min(1.0, current + offsets[task % offsets.size()]);
    const Mask mask = magnitude_mask(base.get_component(id), base.mask(id), SparsityLevel(target));
    Matrix w = base.get_component(id);
    mask.apply(w);
    FrozenModel pruned = frozen;
    pruned.set_component(id, std::move(w));
    const auto rep = evaluate(pruned, refs, {.with_ppl = false, .workers = 1});
    if (opts.criterion == ProbeCriterion::Fdt75) {
      measured[task] = rep.aggregates.fdt_75;
    } else {
      measured[task] = max_fdt * base_dppl / rep.aggregates.mean_dppl;
    }
  });

  FdtSparseMap map;
  map.max_fdt = max_fdt;
  map.step = step;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    map.curves[ids[i]] = make_curve(step, max_fdt, measured[2 * i], measured[2 * i + 1]);
    map.current[ids[i]] = base.component_sparsity(ids[i]);
  }
  map.validate();
  return map;
}

// ---- allocation ----

double weighted_mean(const std::map<ComponentId, double>& values, const std::map<ComponentId, double>& weights) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& [id, v] : values) {
    const auto it = weights.find(id);
    if (it == weights.end()) throw ArgumentError("no weight for component " + id.key());
    num += it->second * v;
    den += it->second;
  }
  if (den <= 0.0) throw ArgumentError("component weights must sum to a positive value");
  return num / den;
}

std::map<ComponentId, double> component_weights(const ToyModel& model) {
  std::map<ComponentId, double> out;
  for (const auto& id : model.components()) out[id] = static_cast<double>(model.component_parameter_count(id));
  return out;
}

std::map<ComponentId, double> component_sparsities(const ToyModel& model) {
  std::map<ComponentId, double> out;
  for (const auto& id : model.components()) out[id] = model.component_sparsity(id);
  return out;
}

CompressionPlan SparsityPlan::to_compression_plan() const {
  CompressionPlan plan;
  for (const auto& [id, t] : target) plan.entries[id].sparsity = std::clamp(t, 0.0, 1.0);
  return plan;
}

namespace {

std::map<ComponentId, double> added_at(const FdtSparseMap& map, double f) {
  std::map<ComponentId, double> out;
  for (const auto& [id, curve] : map.curves) {
    const double cap = 1.0 - map.current.at(id);
    out[id] = f > map.max_fdt ? 0.0 : std::min(interpolate_max_sparsity(curve, f), cap);
  }
  return out;
}

void finish(SparsityPlan& plan, const std::map<ComponentId, double>& current,
            const std::map<ComponentId, double>& weights) {
  plan.target.clear();
  for (const auto& [id, a] : plan.added) plan.target[id] = std::min(1.0, current.at(id) + a);
  plan.achieved = weighted_mean(plan.added, weights);
}

}  // namespace

SparsityPlan allocate(const FdtSparseMap& map, double target_step, const std::map<ComponentId, double>& weights) {
  if (!(target_step > 0.0 && target_step < 1.0)) throw ArgumentError("target step must lie in (0, 1)");
  if (map.curves.empty()) throw ArgumentError("empty sparsity map");
  map.validate();
  const auto mean_at = [&](double f) { return weighted_mean(added_at(map, f), weights); };

  std::optional<double> found;
  for (double f = std::floor(map.max_fdt); f >= 0.0; f -= 1.0) {
    if (mean_at(f) >= target_step) {
      found = f;
      break;
    }
  }
  if (!found) throw InvariantViolation("no FDT floor reaches the requested sparsity");

  SparsityPlan plan;
  plan.requested = target_step;
  plan.f_star = *found;

  // mean_at is nonincreasing in f: keep lo feasible and hi infeasible.
  double lo = *found;
  double hi = *found + 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_at(mid) >= target_step ? lo : hi) = mid;
  }
  plan.f_refined = lo;
  plan.added = added_at(map, lo);
  const double over = mean_at(lo) - target_step;
  if (over > 1e-12) {
    // A flat stretch of some curve makes the allocation jump at this floor;
    // move along the jump just far enough to meet the target.
    const auto upper = added_at(map, hi);
    const double gap = mean_at(lo) - weighted_mean(upper, weights);
    const double t = gap > 0.0 ? over / gap : 0.0;
    for (auto& [id, a] : plan.added) a -= t * (a - upper.at(id));
  }
  finish(plan, map.current, weights);
  return plan;
}

SparsityPlan allocate_uniform(const std::map<ComponentId, double>& current, double target_step,
                              const std::map<ComponentId, double>& weights) {
  if (!(target_step > 0.0 && target_step < 1.0)) throw ArgumentError("target step must lie in (0, 1)");
  SparsityPlan plan;
  plan.requested = target_step;
  for (const auto& [id, c] : current) plan.added[id] = std::min(target_step, 1.0 - c);
  finish(plan, current, weights);
  return plan;
}

// ---- schedule ----

void Schedule::validate() const {
  if (increments.empty()) throw ArgumentError("schedule has no rounds");
  double total = 0.0;
  for (double s : increments) {
    if (!(s > 0.0)) throw ArgumentError("schedule increments must be positive");
    total += s;
  }
  if (total > 1.0 + 1e-12) throw ArgumentError("schedule increments sum past 100%");
}

double Schedule::cumulative(std::size_t round) const {
  double total = 0.0;
  for (std::size_t i = 0; i <= round && i < increments.size(); ++i) total += increments[i];
  return total;
}

MaskedRoundTrainer::MaskedRoundTrainer(TrainConfig cfg, std::vector<Token> stream)
    : cfg_(cfg), stream_(std::move(stream)) {
  cfg_.validate();
  if (stream_.size() < cfg_.seq_len) throw ArgumentError("training stream shorter than one window");
}

LossTrace MaskedRoundTrainer::train_round(ToyModel& model, std::size_t round) {
  BatchSampler sampler(stream_, cfg_.seq_len, cfg_.seed + 7919 * (round + 1));
  return train_masked(model, cfg_, sampler);
}

std::string MaskedRoundTrainer::describe() const {
  std::ostringstream out;
  out << optimizer_name(cfg_.optimizer) << " lr=" << cfg_.learning_rate << " wd=" << cfg_.weight_decay
      << " batch=" << cfg_.batch_size << " seq=" << cfg_.seq_len << " masked=" << cfg_.masked_steps
      << " dense=" << cfg_.dense_steps;
  return out.str();
}

std::vector<RoundResult> run_schedule(ToyModel& model, std::span<const TokenSequence> probe_prefixes,
                                      const ProbeSpec& spec, const ReferenceSet& eval_refs, RoundTrainer& trainer,
                                      const ScheduleOptions& opts) {
  opts.schedule.validate();
  spec.validate();
  if (opts.mode == AllocationMode::Balanced && probe_prefixes.empty()) {
    throw ArgumentError("balanced allocation needs probe prefixes");
  }
  const auto weights = component_weights(model);
  std::vector<RoundResult> results;
  for (std::size_t r = 0; r < opts.schedule.increments.size(); ++r) {
    RoundResult res;
    res.round = r;
    res.cumulative_target = opts.schedule.cumulative(r);
    const double step = res.cumulative_target - model.model_sparsity();
    const auto current = component_sparsities(model);
    if (step > 1e-12) {
      if (opts.mode == AllocationMode::Balanced) {
        const auto refs = build_references(model.freeze(true), probe_prefixes, spec, opts.workers);
        res.map = probe_components(model, opts.schedule.increments[r], refs,
                                   {.criterion = opts.criterion, .workers = opts.workers});
        res.plan = allocate(*res.map, step, weights);
      } else {
        res.plan = allocate_uniform(current, step, weights);
      }
      for (const auto& [id, t] : res.plan.target) {
        model.set_mask(id, magnitude_mask(model.get_component(id), model.mask(id), SparsityLevel(std::max(t, current.at(id)))));
      }
    }
    model.apply_masks_to_raw();
    res.loss = trainer.train_round(model, r);
    model.apply_masks_to_raw();
    res.report = evaluate(model.freeze(true), eval_refs, {.with_ppl = true, .workers = opts.workers});
    res.sparsity = component_sparsities(model);
    res.model_sparsity = model.model_sparsity();
    if (opts.out_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "round_%02zu", r);
      write_round_artifacts(res, model.config().n_layers, *opts.out_dir / name);
    }
    results.push_back(std::move(res));
  }
  return results;
}

// ---- artifacts ----

std::string sparsity_map_csv(const std::map<ComponentId, double>& sparsity, std::size_t n_layers) {
  std::string out = "layer";
  for (auto kind : kAllKinds) out += "," + std::string(kind_name(kind));
  out += '\n';
  for (std::size_t l = 0; l < n_layers; ++l) {
    out += std::to_string(l);
    for (auto kind : kAllKinds) {
      const auto it = sparsity.find({l, kind});
      out += ',' + (it == sparsity.end() ? std::string() : format_real(it->second));
    }
    out += '\n';
  }
  return out;
}

std::string anchors_csv(const FdtSparseMap& map) {
  std::string out = "component,current,added,fdt\n";
  for (const auto& [id, curve] : map.curves) {
    for (const auto& a : curve) {
      out += id.key() + ',' + format_real(map.current.at(id)) + ',' + format_real(a.added) + ',' +
             format_real(a.fdt) + '\n';
    }
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

}  // namespace

void write_round_artifacts(const RoundResult& r, std::size_t n_layers, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_plan(r.plan.to_compression_plan(), dir / "plan.json");
  nlohmann::json alloc = {{"round", r.round},
                          {"cumulative_target", r.cumulative_target},
                          {"requested_step", r.plan.requested},
                          {"achieved_step", r.plan.achieved},
                          {"f_star", r.plan.f_star},
                          {"f_refined", r.plan.f_refined},
                          {"model_sparsity", r.model_sparsity}};
  write_text(dir / "allocation.json", alloc.dump(2) + "\n");
  write_text(dir / "report.json", report_to_json(r.report).dump(2) + "\n");
  write_text(dir / "report.csv", report_to_csv(r.report));
  write_text(dir / "loss.csv", r.loss.to_csv());
  write_text(dir / "sparsity.csv", sparsity_map_csv(r.sparsity, n_layers));
  if (r.map) write_text(dir / "anchors.csv", anchors_csv(*r.map));
}

}  // namespace dtm
