#include "dtm/compress.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace dtm {

SparsityLevel::SparsityLevel(double fraction) : fraction_(fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ArgumentError("sparsity must lie in [0, 1]");
}

void QuantSpec::validate() const {
  if (bits != 4 && bits != 8) throw ArgumentError("quantization supports 4 or 8 bits, got " + std::to_string(bits));
}

std::size_t target_zero_count(SparsityLevel target, std::size_t numel) noexcept {
  const double raw = target.fraction() * static_cast<double>(numel);
  return std::min(numel, static_cast<std::size_t>(std::floor(raw + 1e-9)));
}

namespace {

// Kept flat indices and how many of them must be dropped to reach `target`.
std::pair<std::vector<std::size_t>, std::size_t> drop_candidates(const Matrix& w, const Mask& existing,
                                                                 SparsityLevel target) {
  if (!existing.matches(w)) throw ArgumentError("mask shape mismatch");
  const std::size_t want = target_zero_count(target, w.size());
  const std::size_t have = existing.zeros();
  if (want < have) {
    throw ArgumentError("target sparsity " + std::to_string(target.fraction()) + " below current sparsity " +
                        std::to_string(existing.sparsity()));
  }
  std::vector<std::size_t> kept;
  kept.reserve(w.size() - have);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (existing.keep(i)) kept.push_back(i);
  }
  return {std::move(kept), want - have};
}

}  // namespace

Mask magnitude_mask(const Matrix& w, const Mask& existing, SparsityLevel target) {
  auto [kept, extra] = drop_candidates(w, existing, target);
  Mask out = existing;
  if (extra == 0) return out;
  const auto vals = w.values();
  auto less = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(vals[a]);
    const double mb = std::abs(vals[b]);
    return ma < mb || (ma == mb && a < b);
  };
  std::nth_element(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(extra - 1), kept.end(), less);
  for (std::size_t i = 0; i < extra; ++i) out.drop(kept[i]);
  return out;
}

Mask random_mask(const Matrix& w, const Mask& existing, SparsityLevel target, std::uint64_t seed) {
  auto [kept, extra] = drop_candidates(w, existing, target);
  Mask out = existing;
  std::mt19937_64 rng(seed);
  std::shuffle(kept.begin(), kept.end(), rng);
  for (std::size_t i = 0; i < extra; ++i) out.drop(kept[i]);
  return out;
}

double absmax_scale(const Matrix& w, const QuantSpec& spec) {
  spec.validate();
  double hi = 0.0;
  for (double v : w.values()) {
    if (!std::isfinite(v)) throw DomainError("non-finite weight in quantization input");
    hi = std::max(hi, std::abs(v));
  }
  return hi / static_cast<double>(spec.max_int());
}

Matrix absmax_quantize_dequantize(const Matrix& w, const QuantSpec& spec) {
  const double scale = absmax_scale(w, spec);
  Matrix out(w.rows(), w.cols());
  if (scale == 0.0) return out;
  const auto src = w.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::round(src[i] / scale) * scale;
  return out;
}

OutlierCensus empty_census(const ModelConfig& cfg, double threshold) {
  OutlierCensus census;
  census.threshold = threshold;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (auto kind : kAllKinds) census.counts[{l, kind}] = 0;
  }
  return census;
}

void add_outliers(OutlierCensus& census, const ForwardTrace& trace) {
  const double threshold = census.threshold;
  auto count = [threshold](const Matrix& a) {
    std::size_t n = 0;
    for (double v : a.values()) n += (std::abs(v) > threshold);
    return n;
  };
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const auto& lt = trace.layers[l];
    const std::size_t attn_in = count(lt.u_attn);
    const std::size_t dense_in = count(lt.attn);
    const std::size_t mlp_in = count(lt.u_mlp);
    const std::size_t down_in = count(lt.act);
    census.counts[{l, ComponentKind::AttnQuery}] += attn_in;
    census.counts[{l, ComponentKind::AttnKey}] += attn_in;
    census.counts[{l, ComponentKind::AttnValue}] += attn_in;
    census.counts[{l, ComponentKind::AttnDense}] += dense_in;
    census.counts[{l, ComponentKind::MlpUp}] += mlp_in;
    census.counts[{l, ComponentKind::MlpGate}] += mlp_in;
    census.counts[{l, ComponentKind::MlpDown}] += down_in;
    census.total += 3 * attn_in + dense_in + 2 * mlp_in + down_in;
  }
}

OutlierCensus outlier_census(const FrozenModel& model, std::span<const TokenSequence> probes, double threshold) {
  if (probes.empty()) throw ArgumentError("outlier census needs at least one probe");
  if (!(threshold >= 0.0)) throw ArgumentError("outlier threshold must be >= 0");
  auto census = empty_census(model.config(), threshold);
  for (const auto& probe : probes) {
    ForwardTrace trace;
    forward(model, probe, &trace);
    add_outliers(census, trace);
  }
  return census;
}

ToyModel apply_plan(const ToyModel& model, const CompressionPlan& plan) {
  ToyModel out = model;
  for (const auto& [id, entry] : plan.entries) {
    model.check(id);
    if (entry.sparsity) {
      const auto& raw = out.get_component(id);
      out.set_mask(id, magnitude_mask(raw, out.mask(id), SparsityLevel(*entry.sparsity)));
    }
    if (entry.bits) {
      QuantSpec spec{*entry.bits, QuantScheme::AbsMax};
      spec.validate();
      Matrix w = out.get_component(id);
      out.mask(id).apply(w);
      out.set_component(id, absmax_quantize_dequantize(w, spec));
    }
  }
  return out;
}

// ---- plan files ----

nlohmann::json plan_to_json(const CompressionPlan& plan) {
  nlohmann::json comps = nlohmann::json::object();
  for (const auto& [id, entry] : plan.entries) {
    nlohmann::json e = nlohmann::json::object();
    if (entry.sparsity) e["sparsity"] = *entry.sparsity;
    if (entry.bits) e["bits"] = *entry.bits;
    comps[id.key()] = std::move(e);
  }
  return {{"schema", "dtm.compression_plan"}, {"schema_version", 1}, {"components", std::move(comps)}};
}

CompressionPlan plan_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("schema", "") != "dtm.compression_plan" || j.value("schema_version", 0) != 1) {
    throw FormatError("not a version-1 compression plan");
  }
  if (!j.contains("components") || !j["components"].is_object()) throw FormatError("plan has no components object");
  CompressionPlan plan;
  for (const auto& [key, e] : j["components"].items()) {
    ComponentId id;
    try {
      id = ComponentId::parse(key);
    } catch (const ArgumentError& err) {
      throw FormatError(err.what());
    }
    PlanEntry entry;
    if (e.contains("sparsity")) {
      if (!e["sparsity"].is_number()) throw FormatError("sparsity of " + key + " is not a number");
      entry.sparsity = e["sparsity"].get<double>();
      if (!(*entry.sparsity >= 0.0 && *entry.sparsity <= 1.0)) throw FormatError("sparsity of " + key + " outside [0,1]");
    }
    if (e.contains("bits")) {
      if (!e["bits"].is_number_integer()) throw FormatError("bits of " + key + " is not an integer");
      entry.bits = e["bits"].get<int>();
      if (*entry.bits != 4 && *entry.bits != 8) throw FormatError("bits of " + key + " must be 4 or 8");
    }
    if (!entry.sparsity && !entry.bits) throw FormatError("plan entry " + key + " is empty");
    plan.entries[id] = entry;
  }
  return plan;
}

void save_plan(const CompressionPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write plan " + path.string());
  out << plan_to_json(plan).dump(2) << '\n';
}

CompressionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open plan " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan is not valid JSON: ") + e.what());
  }
  return plan_from_json(j);
}

}  // namespace dtm
