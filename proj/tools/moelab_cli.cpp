// moelab: corpus generation, pretraining, routing analysis, expert selection,
// adaptation and reporting for desk-scale MoE language-adaptation runs.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

struct Args {
  std::string config = "paper-desk";
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> alpha;
  std::optional<std::size_t> k_shared;
  std::vector<std::size_t> layers;
  std::optional<double> lr;
  bool resume = false;
  bool quiet = false;
  std::optional<std::string> before, after;
  std::string report = "forgetting_pair";
};

void common_flags(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "preset name (paper-desk, paper-desk-quick, tiny) or JSON config file");
  cmd->add_option("--out", a.out, "run directory (default $MOELAB_OUT_ROOT/<name> or runs/<name>)");
  cmd->add_option("--seed", a.seed, "restrict to one seed");
  cmd->add_option("--strategy", a.strategy, "SEFT | SSFT | RANDOM_SEFT | SEFT_TOP20 | AEFT | FULL_FT");
  cmd->add_option("--alpha", a.alpha, "activation-gap threshold");
  cmd->add_option("--k-shared", a.k_shared, "shared experts added by SSFT");
  cmd->add_option("--layers", a.layers, "comma-separated MoE layers for selection")->delimiter(',');
  cmd->add_option("--lr", a.lr, "fixed learning rate (skips the sweep)");
  cmd->add_flag("--resume", a.resume, "skip stages already completed in the run directory");
  cmd->add_flag("--quiet", a.quiet, "suppress progress output");
}

bool dir_is_clean(const fs::path& dir) { return !fs::exists(dir) || fs::is_empty(dir); }

int run(const std::string& command, const Args& a) {
  PipelineConfig config = resolve_config(a.config);
  CliOverrides o;
  o.seed = a.seed;
  o.strategy = a.strategy;
  o.alpha = a.alpha;
  o.k_shared = a.k_shared;
  if (!a.layers.empty()) o.layers = a.layers;
  o.lr = a.lr;
  apply_overrides(config, o);
  thread_count();

  const fs::path root = resolve_run_dir(config, a.out);
  if (!a.quiet) std::cout << pipeline_to_json(config).dump(2) << "\n[run] " << root.string() << std::endl;

  if (command == "repro" && !a.resume && !dir_is_clean(root)) {
    throw ConfigError("run directory " + root.string() + " is not empty; pass --resume to continue it");
  }
  if (command != "gen" && command != "repro" && !fs::exists(root)) {
    throw ConfigError("run directory " + root.string() + " does not exist; run `moelab gen` first");
  }
  if (command == "eval" && (a.before.has_value() != a.after.has_value())) {
    throw ConfigError("--before and --after must be given together");
  }

  RunLock lock(root);
  Pipeline p{config, RunDir{root}, command == "repro" || a.resume, a.quiet ? nullptr : &std::cout};
  if (command == "gen") {
    cmd_gen(p);
  } else if (command == "pretrain") {
    for (std::uint64_t s : config.pretrain_seeds) cmd_pretrain(p, s);
  } else if (command == "analyze") {
    for (std::uint64_t s : config.pretrain_seeds) cmd_analyze(p, s);
  } else if (command == "select") {
    cmd_select(p, config.strategies);
  } else if (command == "adapt") {
    cmd_adapt(p, config.strategies);
  } else if (command == "eval") {
    if (a.before) {
      cmd_eval_pair(p, *a.before, *a.after, a.report);
    } else {
      cmd_forgetting(p);
      cmd_eval(p);
    }
  } else if (command == "repro") {
    cmd_repro(p);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: desk-scale MoE routing analysis and expert-selective adaptation"};
  app.require_subcommand(1);
  Args a;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen", "generate the synthetic multilingual corpus"},
      {"pretrain", "phase 1 (base language) then phase 2 (multilingual mixture)"},
      {"analyze", "routing entropy, JSD and activation tables of the pretrained model"},
      {"select", "write expert-selection plans for every target"},
      {"adapt", "learning-rate sweep and adaptation per strategy and seed"},
      {"eval", "forgetting runs and summary tables, or a before/after forgetting report"},
      {"repro", "the full pipeline end to end"}};
  for (const auto& [name, help] : commands) {
    CLI::App* cmd = app.add_subcommand(name, help);
    common_flags(cmd, a);
    if (name == "eval") {
      cmd->add_option("--before", a.before, "checkpoint before adaptation");
      cmd->add_option("--after", a.after, "checkpoint after adaptation");
      cmd->add_option("--name", a.report, "report file stem for --before/--after");
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, a);
  } catch (const ConfigError& e) {
    std::cerr << "moelab " << command << ": configuration error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "moelab " << command << ": " << e.what() << std::endl;
    return 1;
  }
}
