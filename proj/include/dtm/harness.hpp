#pragma once

// Corpus handling, experiment drivers and run manifests behind the dtm CLI.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dtm/metrics.hpp"
#include "dtm/planner.hpp"
#include "dtm/quantsearch.hpp"
#include "dtm/train.hpp"
#include "json.hpp"

namespace dtm {

// Byte-level tokenizer: token = byte value, vocabulary 256.
TokenSequence tokenize(std::string_view bytes);
std::string detokenize(std::span<const Token> tokens);  // ArgumentError on tokens > 255

struct Corpus {
  std::filesystem::path source;
  TokenSequence tokens;

  static Corpus load(const std::filesystem::path& path);
  static Corpus from_text(std::string_view text);
};

struct Windows {
  std::vector<std::size_t> offsets;
  std::vector<TokenSequence> items;
};

// `count` windows of `len` tokens at offsets drawn uniformly from
// [0, size - len]; reproducible per seed.
Windows sample_windows(const Corpus& corpus, std::size_t count, std::size_t len, std::uint64_t seed);
inline Windows sample_prefixes(const Corpus& corpus, std::size_t count, std::size_t n, std::uint64_t seed) {
  return sample_windows(corpus, count, n, seed);
}

// ---- pruning discrimination ----

enum class PruneRule { LowestMagnitude, Random };

// Every component pruned by `fraction` more (on top of its mask).
ToyModel prune_all(const ToyModel& model, double fraction, PruneRule rule, std::uint64_t seed);

struct Separation {
  std::string metric;
  double mean_lowest = 0.0;
  double mean_random = 0.0;
  double difference = 0.0;  // mean_lowest - mean_random
  double bootstrap_se = 0.0;
  bool significant = false;  // |difference| > 2 * bootstrap_se
};

// Standard error of mean(a) - mean(b) from independent bootstrap resamples
// of each group.
double bootstrap_se_of_mean_difference(std::span<const double> a, std::span<const double> b, std::size_t resamples,
                                       std::uint64_t seed);

struct DiscriminateOptions {
  double fraction = 0.001;
  std::uint64_t prune_seed = 0;
  std::uint64_t bootstrap_seed = 0;
  std::size_t resamples = 1000;
  std::size_t workers = 1;
};

struct DiscriminateResult {
  DivergenceReport lowest;
  DivergenceReport random;
  Separation fdt;
  Separation dppl;
  Separation ppl;
};

DiscriminateResult discriminate(const ToyModel& base, const ReferenceSet& refs, const DiscriminateOptions& opts);
std::string discriminate_csv(const DiscriminateResult& r);

// ---- proposition suites ----

struct Prop1Result {
  std::size_t rows = 0;
  std::size_t sdt = 0;
  double ppl_change = 0.0;  // |PPL(adversary) - PPL(original)| against the original argmax targets
  bool passed = false;
};

// Random rows x vocab logits, narrowed and perturbed by delta.
Prop1Result run_prop1(std::size_t rows, std::size_t vocab, double delta, std::uint64_t seed);

struct Prop2Result {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;  // largest sdt / bound over trials with a positive bound
  bool passed = false;
};

// Random logit pairs of N rows: references, candidate = reference + noise of
// random strength.
Prop2Result run_prop2(std::size_t trials, std::size_t vocab, std::size_t total_len, std::size_t prefix_len,
                      std::uint64_t seed);

// ---- runs ----

enum class Command { Metrics, Discriminate, Sparsify, Quantsearch, Train, Props };

std::string_view command_name(Command c) noexcept;
Command parse_command(std::string_view s);

// Exit codes of the CLI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitUsage = 2;

struct RunContext {
  Command command = Command::Metrics;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path out_dir = "out";
};

// Executes one experiment, writing artifacts and manifest.json to out_dir.
// Returns the process exit code; configuration problems throw ArgumentError.
int run(const RunContext& ctx);

nlohmann::json make_manifest(const RunContext& ctx, double wall_seconds, const nlohmann::json& extra);

// Code version baked in at build time.
std::string_view code_version() noexcept;

}  // namespace dtm
