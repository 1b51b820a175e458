#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dtm/errors.hpp"
#include "dtm/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Divergence-metric probing, pruning and quantization experiments on a toy transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(dtm::code_version()));

  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out_dir = "out";
  for (auto c : {dtm::Command::Metrics, dtm::Command::Discriminate, dtm::Command::Sparsify, dtm::Command::Quantsearch,
                 dtm::Command::Train, dtm::Command::Props}) {
    auto* sub = app.add_subcommand(std::string(dtm::command_name(c)));
    sub->add_option("-c,--config", config_path, "JSON run configuration");
    sub->add_option("-s,--seed", seed, "master seed")->capture_default_str();
    sub->add_option("-w,--workers", workers, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("-o,--out", out_dir, "output directory")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? dtm::kExitOk : dtm::kExitUsage;
  }

  dtm::RunContext ctx;
  ctx.command = dtm::parse_command(app.get_subcommands().front()->get_name());
  ctx.seed = seed;
  ctx.workers = workers;
  ctx.out_dir = out_dir;
  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw dtm::ArgumentError("cannot open config " + config_path);
      ctx.config = nlohmann::json::parse(in);
    }
    return dtm::run(ctx);
  } catch (const nlohmann::json::parse_error& e) {
    std::cerr << "dtm: config is not valid JSON: " << e.what() << '\n';
    return dtm::kExitUsage;
  } catch (const dtm::ArgumentError& e) {
    std::cerr << "dtm: " << e.what() << '\n';
    return dtm::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "dtm: " << e.what() << '\n';
    return dtm::kExitAssertion;
  }
}
