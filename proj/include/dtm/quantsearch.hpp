#pragma once

// Beam search over which components to quantize with AbsMax, ranked by
// divergence from the unquantized model.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dtm/compress.hpp"
#include "dtm/metrics.hpp"

namespace dtm {

enum class SearchCriterion { Fdt, Dppl, Ppl };

// Which FDT statistic ranks nodes under SearchCriterion::Fdt.
enum class FdtStatistic { Mean, Quantile75 };

std::string_view criterion_name(SearchCriterion c) noexcept;
SearchCriterion parse_criterion(std::string_view s);

using ComponentSet = std::vector<ComponentId>;  // kept sorted, no repeats

struct NodeMetrics {
  double fdt75 = 0.0;
  double mean_fdt = 0.0;
  double mean_sdt = 0.0;
  double dppl = 0.0;
  double ppl = 0.0;
};

struct SearchNode {
  ComponentSet set;
  double score = 0.0;
  NodeMetrics metrics;
  std::size_t outliers = 0;
};

struct SearchConfig {
  std::size_t width = 10;
  SearchCriterion criterion = SearchCriterion::Fdt;
  FdtStatistic fdt_statistic = FdtStatistic::Mean;
  QuantSpec quant;
  std::size_t max_depth = 0;  // 0 = every component
  bool greedy = false;        // width 1, ranking fixed after the first depth
  bool census = true;         // outlier counts per node
  double outlier_threshold = kDefaultOutlierThreshold;
  std::size_t workers = 1;

  void validate(std::size_t n_components) const;
};

// Quantized copies of every component, built once per search.
class NodeEvaluator {
 public:
  NodeEvaluator(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg);

  SearchNode evaluate(const ComponentSet& set) const;
  const std::vector<ComponentId>& components() const noexcept { return ids_; }
  const SearchConfig& config() const noexcept { return cfg_; }

 private:
  FrozenModel base_;
  const ReferenceSet* refs_;
  SearchConfig cfg_;
  std::vector<ComponentId> ids_;
  std::map<ComponentId, Matrix> quantized_;
};

// True when a should rank ahead of b under the criterion.
bool ranks_before(const SearchNode& a, const SearchNode& b, SearchCriterion criterion);

// Every one-component extension of every frontier node, deduplicated by set
// and returned in set order.
std::vector<ComponentSet> expand_sets(const std::vector<SearchNode>& frontier, const std::vector<ComponentId>& all);
std::vector<SearchNode> expand(const std::vector<SearchNode>& frontier, const NodeEvaluator& eval);

std::vector<SearchNode> select(std::vector<SearchNode> children, const SearchConfig& cfg);

struct DepthRecord {
  std::size_t depth = 0;
  std::vector<SearchNode> frontier;  // best first
  std::size_t evaluated = 0;         // nodes scored at this depth
  double mean_score = 0.0;
  double mean_fdt = 0.0;
  double mean_sdt = 0.0;
  double mean_dppl = 0.0;
  double mean_ppl = 0.0;
  double mean_outliers = 0.0;
  std::map<ComponentKind, std::size_t> kind_histogram;  // over frontier sets
};

struct SearchLog {
  SearchConfig config;
  SearchNode root;                  // nothing quantized
  std::vector<DepthRecord> depths;  // depths[d - 1] holds depth d
  std::vector<SearchNode> evaluated;
  bool fdt_nonimproving = true;  // observation only

  std::string to_jsonl() const;
  std::string frontier_csv() const;
};

SearchLog run_search(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg);

// Best set of exactly `depth` components by brute force.
SearchNode exhaustive_best(const ToyModel& base, const ReferenceSet& refs, const SearchConfig& cfg, std::size_t depth);

// Plan quantizing the components of the best node at depth k.
CompressionPlan top_k_plan(const SearchLog& log, std::size_t k);

}  // namespace dtm
