#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/selection.hpp"
#include "moelab/trainer.hpp"

namespace moelab {

struct ForgettingConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  double budget_multiplier = 3.0;
  double lr = 1e-3;
  std::size_t resamples = 50;
  std::vector<Strategy> strategies{Strategy::FULL_FT, Strategy::SEFT};
};

struct PipelineConfig {
  std::string name = "paper-desk";
  ModelConfig model;
  CorpusLayout corpus;
  RunConfig phase1;  // dominant-language base
  RunConfig phase2;  // uniform multilingual mixture
  RunConfig adapt;
  std::string base_language = "hr0";
  std::vector<Strategy> strategies{Strategy::SEFT, Strategy::SSFT, Strategy::RANDOM_SEFT, Strategy::SEFT_TOP20,
                                   Strategy::AEFT, Strategy::FULL_FT};
  std::vector<double> lr_grid{1e-5, 1e-4, 4e-4, 1e-3, 4e-3};
  /// When false, only the first adaptation seed sweeps; later seeds reuse its
  /// selected learning rate.
  bool sweep_all_seeds = true;
  double alpha = 0.01;
  std::size_t k_shared = 5;
  std::vector<std::size_t> layers;  // empty: final two
  std::vector<std::uint64_t> pretrain_seeds{0, 1, 2};
  std::vector<std::uint64_t> adapt_seeds{0, 1, 2, 3, 4};
  ForgettingConfig forgetting;
  std::size_t snapshot_docs = 50;  // held-out documents per language for in-training snapshots
  bool export_traces = false;
  std::string keep_checkpoints = "primary";  // none | primary | all

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  [[nodiscard]] std::uint64_t primary_seed() const { return pretrain_seeds.front(); }
  [[nodiscard]] std::vector<std::size_t> selection_layers() const {
    return layers.empty() ? default_layers(model) : layers;
  }
};

nlohmann::json pipeline_to_json(const PipelineConfig& c);
PipelineConfig pipeline_from_json(const nlohmann::json& j);

/// Built-in presets: "paper-desk", "paper-desk-quick", "tiny".
std::vector<std::string> preset_names();
nlohmann::json preset_json(const std::string& name);

/// `spec` is a preset name or a JSON file. A file may name a "preset" whose
/// values it overrides (JSON merge patch).
PipelineConfig resolve_config(const std::string& spec);

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> alpha;
  std::optional<std::size_t> k_shared;
  std::optional<std::vector<std::size_t>> layers;
  std::optional<double> lr;
};

void apply_overrides(PipelineConfig& c, const CliOverrides& o);

/// Root for a run: --out, else $MOELAB_OUT_ROOT/<name>, else runs/<name>.
std::filesystem::path resolve_run_dir(const PipelineConfig& c, const std::optional<std::string>& out);
/// $MOELAB_THREADS, default 1.
std::size_t thread_count();

/// Exclusive run.lock in a run directory; released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Layout of one experiment directory.
struct RunDir {
  std::filesystem::path root;
  [[nodiscard]] std::filesystem::path corpus() const { return root / "corpus"; }
  [[nodiscard]] std::filesystem::path seed_dir(std::uint64_t s) const { return root / "pretrain" / ("s" + std::to_string(s)); }
  [[nodiscard]] std::filesystem::path phase_ckpt(std::uint64_t s, int phase) const {
    return seed_dir(s) / ("phase" + std::to_string(phase)) / "model.ckpt";
  }
  [[nodiscard]] std::filesystem::path analysis(std::uint64_t s) const { return root / "analysis" / ("s" + std::to_string(s)); }
  [[nodiscard]] std::filesystem::path plan(const std::string& target, Strategy st, std::optional<std::uint64_t> seed) const;
  [[nodiscard]] std::filesystem::path adapt_dir(const std::string& target, Strategy st, std::uint64_t seed) const {
    return root / "adapt" / target / to_string(st) / ("s" + std::to_string(seed));
  }
  [[nodiscard]] std::filesystem::path forgetting_dir(const std::string& target, Strategy st, std::uint64_t seed) const {
    return root / "forgetting" / target / to_string(st) / ("s" + std::to_string(seed));
  }
  [[nodiscard]] std::filesystem::path marker(const std::string& stage) const { return root / "stages" / (stage + ".done"); }
};

/// Execution context shared by the stage commands.
struct Pipeline {
  PipelineConfig config;
  RunDir dir;
  bool resume = true;  // skip stages whose marker exists
  std::ostream* log = nullptr;

  void note(const std::string& line) const;
  [[nodiscard]] bool done(const std::string& stage) const;
  void mark(const std::string& stage, const nlohmann::json& info = {}) const;

  [[nodiscard]] CorpusManifest manifest() const { return build_manifest(config.corpus); }
  [[nodiscard]] std::vector<LanguageDocs> split(const std::vector<std::string>& ids, const std::string& split,
                                                std::size_t limit = 0) const;
};

// Stage commands. Each validates its prerequisites before writing anything.
CorpusReport cmd_gen(const Pipeline& p);
void cmd_pretrain(const Pipeline& p, std::uint64_t seed);
void cmd_analyze(const Pipeline& p, std::uint64_t seed);
void cmd_select(const Pipeline& p, const std::vector<Strategy>& strategies);
void cmd_adapt(const Pipeline& p, const std::vector<Strategy>& strategies, std::optional<double> fixed_lr = std::nullopt);
void cmd_forgetting(const Pipeline& p);
/// Writes summary.csv / summary.md comparing strategies.
void cmd_eval(const Pipeline& p);
/// Forgetting report between two explicit checkpoints over the anchor
/// languages' test split; written to <run>/eval/<stem>.{csv,json}.
EvalReport cmd_eval_pair(const Pipeline& p, const std::filesystem::path& before, const std::filesystem::path& after,
                         const std::string& stem);
/// gen -> pretrain (both phases, every seed) -> analyze -> select -> adapt
/// -> forgetting -> eval.
void cmd_repro(const Pipeline& p);

/// Reads <run>/eval/summary.json.
nlohmann::json load_summary(const RunDir& dir);

}  // namespace moelab
