#include "dtm/quantsearch.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "dtm/parallel.hpp"
#include "dtm/report.hpp"

namespace dtm {

std::string_view criterion_name(SearchCriterion c) noexcept {
  switch (c) {
    case SearchCriterion::Fdt: return "fdt";
    case SearchCriterion::Dppl: return "dppl";
    case SearchCriterion::Ppl: return "ppl";
  }
  return "?";
}

SearchCriterion parse_criterion(std::string_view s) {
  if (s == "fdt" || s == "fdt75") return SearchCriterion::Fdt;
  if (s == "dppl") return SearchCriterion::Dppl;
  if (s == "ppl") return SearchCriterion::Ppl;
  throw ArgumentError("unknown search criterion '" + std::string(s) + "'");
}

void SearchConfig::validate(std::size_t n_components) const {
  if (width == 0) throw ArgumentError("beam width must be >= 1");
  if (max_depth > n_components) throw ArgumentError("search depth exceeds the component count");
  if (!(outlier_threshold >= 0.0)) throw ArgumentError("outlier threshold must be >= 0");
  quant.validate();
}

NodeEvaluator::NodeEvaluator(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg)
    : base_(base.freeze(true)), refs_(&refs), cfg_(cfg), ids_(base.components()) {
  if (refs.items.empty()) throw ArgumentError("search needs at least one probe");
  cfg_.validate(ids_.size());
  for (const auto& id : ids_) quantized_.emplace(id, absmax_quantize_dequantize(base_.weights().component(id), cfg_.quant));
}

SearchNode NodeEvaluator::evaluate(const ComponentSet& set) const {
  FrozenModel model = base_;
  for (const auto& id : set) model.set_component(id, quantized_.at(id));
  SearchNode node;
  node.set = set;
  std::vector<double> fdts;
  fdts.reserve(refs_->items.size());
  double sdt = 0.0, dppl = 0.0, ppl = 0.0;
  OutlierCensus census = empty_census(model.config(), cfg_.outlier_threshold);
  for (const auto& ref : refs_->items) {
    ForwardTrace trace;
    const auto r = evaluate_probe(model, ref, refs_->spec, true, cfg_.census ? &trace : nullptr);
    if (cfg_.census) add_outliers(census, trace);
    fdts.push_back(static_cast<double>(r.fdt));
    sdt += static_cast<double>(r.sdt);
    dppl += r.dppl;
    ppl += r.ppl;
  }
  const double count = static_cast<double>(fdts.size());
  node.metrics = {quantile(fdts, Quantile(0.75)), mean(fdts), sdt / count, dppl / count, ppl / count};
  node.outliers = census.total;
  switch (cfg_.criterion) {
    case SearchCriterion::Fdt:
      node.score = cfg_.fdt_statistic == FdtStatistic::Mean ? node.metrics.mean_fdt : node.metrics.fdt75;
      break;
    case SearchCriterion::Dppl: node.score = node.metrics.dppl; break;
    case SearchCriterion::Ppl: node.score = node.metrics.ppl; break;
  }
  return node;
}

bool ranks_before(const SearchNode& a, const SearchNode& b, SearchCriterion criterion) {
  if (a.score != b.score) return criterion == SearchCriterion::Fdt ? a.score > b.score : a.score < b.score;
  return a.set < b.set;
}

std::vector<ComponentSet> expand_sets(const std::vector<SearchNode>& frontier, const std::vector<ComponentId>& all) {
  if (frontier.empty()) throw ArgumentError("cannot expand an empty frontier");
  const std::size_t depth = frontier.front().set.size();
  std::set<ComponentSet> unique;
  for (const auto& node : frontier) {
    if (node.set.size() != depth) throw ArgumentError("frontier nodes differ in depth");
    for (const auto& id : all) {
      if (std::binary_search(node.set.begin(), node.set.end(), id)) continue;
      ComponentSet child = node.set;
      child.insert(std::upper_bound(child.begin(), child.end(), id), id);
      unique.insert(std::move(child));
    }
  }
  return {unique.begin(), unique.end()};
}

namespace {

std::vector<SearchNode> evaluate_all(const std::vector<ComponentSet>& sets, const NodeEvaluator& eval) {
  std::vector<SearchNode> out(sets.size());
  parallel_for(sets.size(), eval.config().workers, [&](std::size_t i) { out[i] = eval.evaluate(sets[i]); });
  return out;
}

DepthRecord summarize(std::size_t depth, std::vector<SearchNode> frontier, std::size_t evaluated) {
  DepthRecord rec;
  rec.depth = depth;
  rec.evaluated = evaluated;
  const double n = static_cast<double>(frontier.size());
  for (const auto& node : frontier) {
    rec.mean_score += node.score / n;
    rec.mean_fdt += node.metrics.mean_fdt / n;
    rec.mean_sdt += node.metrics.mean_sdt / n;
    rec.mean_dppl += node.metrics.dppl / n;
    rec.mean_ppl += node.metrics.ppl / n;
    rec.mean_outliers += static_cast<double>(node.outliers) / n;
    for (const auto& id : node.set) ++rec.kind_histogram[id.kind];
  }
  rec.frontier = std::move(frontier);
  return rec;
}

}  // namespace

std::vector<SearchNode> expand(const std::vector<SearchNode>& frontier, const NodeEvaluator& eval) {
  return evaluate_all(expand_sets(frontier, eval.components()), eval);
}

std::vector<SearchNode> select(std::vector<SearchNode> children, const SearchConfig& cfg) {
  if (children.empty()) throw ArgumentError("nothing to select from");
  std::sort(children.begin(), children.end(),
            [&](const SearchNode& a, const SearchNode& b) { return ranks_before(a, b, cfg.criterion); });
  if (children.size() > cfg.width) children.resize(cfg.width);
  return children;
}

SearchLog run_search(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg) {
  const NodeEvaluator eval(base, refs, cfg);
  const std::size_t depth_limit = cfg.max_depth == 0 ? eval.components().size() : cfg.max_depth;
  SearchLog log;
  log.config = cfg;
  log.root = eval.evaluate({});
  log.evaluated.push_back(log.root);

  std::vector<SearchNode> frontier{log.root};
  std::vector<ComponentId> ranking;
  double previous_best = log.root.score;
  for (std::size_t depth = 1; depth <= depth_limit; ++depth) {
    std::vector<SearchNode> children;
    if (cfg.greedy && depth > 1) {
      ComponentSet set(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(depth));
      std::sort(set.begin(), set.end());
      children.push_back(eval.evaluate(set));
    } else {
      children = expand(frontier, eval);
    }
    log.evaluated.insert(log.evaluated.end(), children.begin(), children.end());
    const std::size_t evaluated = children.size();
    if (cfg.greedy && depth == 1) {
      SearchConfig all = cfg;
      all.width = children.size();
      const auto ranked = select(children, all);
      for (const auto& node : ranked) ranking.push_back(node.set.front());
      frontier = {ranked.front()};
    } else {
      frontier = select(std::move(children), cfg);
    }
    if (cfg.criterion == SearchCriterion::Fdt && frontier.front().score > previous_best) log.fdt_nonimproving = false;
    previous_best = frontier.front().score;
    log.depths.push_back(summarize(depth, frontier, evaluated));
  }

  std::set<ComponentSet> distinct;
  for (const auto& node : log.evaluated) distinct.insert(node.set);
  if (distinct.size() != log.evaluated.size()) throw InvariantViolation("a component set was evaluated twice");
  return log;
}

SearchNode exhaustive_best(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg, std::size_t depth) {
  const NodeEvaluator eval(base, refs, cfg);
  const auto& ids = eval.components();
  if (depth > ids.size()) throw ArgumentError("depth exceeds the component count");
  std::vector<ComponentSet> sets;
  std::vector<std::size_t> idx(depth);
  for (std::size_t i = 0; i < depth; ++i) idx[i] = i;
  while (true) {
    ComponentSet set;
    for (auto i : idx) set.push_back(ids[i]);
    sets.push_back(std::move(set));
    std::size_t k = depth;
    while (k > 0 && idx[k - 1] == ids.size() - depth + k - 1) --k;
    if (k == 0) break;
    ++idx[k - 1];
    for (std::size_t j = k; j < depth; ++j) idx[j] = idx[j - 1] + 1;
  }
  const auto nodes = evaluate_all(sets, eval);
  return *std::min_element(nodes.begin(), nodes.end(),
                           [&](const SearchNode& a, const SearchNode& b) { return ranks_before(a, b, cfg.criterion); });
}

CompressionPlan top_k_plan(const SearchLog& log, std::size_t k) {
  if (k > log.depths.size()) {
    throw ArgumentError("k = " + std::to_string(k) + " exceeds the search depth " + std::to_string(log.depths.size()));
  }
  CompressionPlan plan;
  if (k == 0) return plan;
  for (const auto& id : log.depths[k - 1].frontier.front().set) plan.entries[id].bits = log.config.quant.bits;
  return plan;
}

std::string SearchLog::to_jsonl() const {
  std::string out;
  for (const auto& node : evaluated) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& id : node.set) comps.push_back(id.key());
    nlohmann::json j = {{"depth", node.set.size()},
                        {"components", std::move(comps)},
                        {"score", node.score},
                        {"fdt75", node.metrics.fdt75},
                        {"mean_fdt", node.metrics.mean_fdt},
                        {"mean_sdt", node.metrics.mean_sdt},
                        {"dppl", node.metrics.dppl},
                        {"ppl", node.metrics.ppl},
                        {"outliers", node.outliers}};
    out += j.dump() + '\n';
  }
  return out;
}

std::string SearchLog::frontier_csv() const {
  std::string out = "depth,evaluated,best_score,mean_score,mean_fdt,mean_sdt,mean_dppl,mean_ppl,mean_outliers";
  for (auto kind : kAllKinds) out += ",n_" + std::string(kind_name(kind));
  out += '\n';
  for (const auto& d : depths) {
    out += std::to_string(d.depth) + ',' + std::to_string(d.evaluated) + ',' + format_real(d.frontier.front().score) +
           ',' + format_real(d.mean_score) + ',' + format_real(d.mean_fdt) + ',' + format_real(d.mean_sdt) + ',' +
           format_real(d.mean_dppl) + ',' + format_real(d.mean_ppl) + ',' + format_real(d.mean_outliers);
    for (auto kind : kAllKinds) {
      const auto it = d.kind_histogram.find(kind);
      out += ',' + std::to_string(it == d.kind_histogram.end() ? 0 : it->second);
    }
    out += '\n';
  }
  return out;
}

}  // namespace dtm
