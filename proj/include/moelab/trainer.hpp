#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/checkpoint.hpp"
#include "moelab/corpus.hpp"
#include "moelab/error.hpp"
#include "moelab/optim.hpp"
#include "moelab/selection.hpp"
#include "moelab/telemetry.hpp"

namespace moelab {

struct TrainableMask {
  std::vector<std::string> names;
  std::vector<bool> trainable;  // aligned with the checkpoint's parameters
  std::size_t trainable_elements = 0;
  std::size_t frozen_elements = 0;

  [[nodiscard]] double trainable_fraction() const {
    const std::size_t total = trainable_elements + frozen_elements;
    return total ? static_cast<double>(trainable_elements) / static_cast<double>(total) : 0.0;
  }
  [[nodiscard]] bool any() const { return trainable_elements > 0; }
};

TrainableMask full_mask(const ParameterSet& params);
/// Expert tensors of selected experts plus routers of the layers holding
/// them (unless `freeze_routers`); the whole model for FULL_FT. Throws
/// ConfigError naming the offending layer or expert on a mismatch.
TrainableMask build_mask(const ExpertSelectionPlan& plan, const Checkpoint& ck, bool freeze_routers = false);

struct RunConfig {
  AdamWConfig optim{};
  std::size_t token_budget = 0;
  std::size_t batch_size = 8;  // documents per step
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double snapshot_fraction = 0.1;
  /// When positive, the checkpoint kept for divergence recovery is refreshed
  /// every this many steps.
  std::size_t keep_every = 50;
  bool save_optimizer = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

struct DocRef {
  std::size_t language = 0;
  std::size_t doc = 0;
};

/// Batches of `batch_size` documents; languages alternate round-robin and each
/// language walks its documents in a per-epoch shuffled order. Stops once
/// the predicted-token count reaches `token_budget`.
std::vector<std::vector<DocRef>> plan_batches(std::span<const LanguageDocs> corpus, std::size_t token_budget,
                                              std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);

struct StepLog {
  std::uint64_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
};

struct SnapshotSpec {
  std::vector<LanguageDocs> corpus;  // held-out documents per language
  std::vector<std::size_t> layers;   // empty: every layer
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> log;
  std::vector<RoutingSnapshot> snapshots;
  std::uint64_t steps = 0;
  std::size_t tokens = 0;
};

class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, std::shared_ptr<const Checkpoint> last_good, std::uint64_t step)
      : Error(what), last_good_(std::move(last_good)), step_(step) {}
  [[nodiscard]] const Checkpoint& last_good() const { return *last_good_; }
  [[nodiscard]] std::uint64_t step() const { return step_; }

 private:
  std::shared_ptr<const Checkpoint> last_good_;
  std::uint64_t step_;
};

/// Generic loop: lm_loss, backward into trainable parameters, clipping, AdamW.
/// Zero planned steps return `init` unchanged.
TrainResult train(const Checkpoint& init, const TrainableMask& mask, std::span<const LanguageDocs> corpus,
                  const RunConfig& config, const SnapshotSpec* snapshots = nullptr);

TrainResult pretrain(const Checkpoint& init, std::span<const LanguageDocs> corpus, const RunConfig& config,
                     const SnapshotSpec* snapshots = nullptr);

TrainResult adapt(const Checkpoint& ck, const TrainableMask& mask, std::span<const LanguageDocs> target,
                  const RunConfig& config);

struct LanguagePerplexity {
  std::string language;
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  std::vector<double> doc_nll;  // per-document NLL sums
  std::vector<std::size_t> doc_tokens;
};

/// exp(mean token NLL) per language over every document; no auxiliary terms.
/// Throws ConfigError on a vocabulary mismatch, InputError on an empty split.
std::vector<LanguagePerplexity> eval_perplexity(const MoeLm& model, std::span<const LanguageDocs> corpus,
                                                std::size_t batch_docs = 16);

struct SweepRow {
  double lr = 0.0;
  std::optional<double> perplexity;  // nullopt when the run diverged
  std::string note;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t best = 0;
  [[nodiscard]] double best_lr() const { return rows[best].lr; }
};

class SweepError : public Error {
 public:
  SweepError(const std::string& what, std::vector<SweepRow> rows) : Error(what), rows_(std::move(rows)) {}
  [[nodiscard]] const std::vector<SweepRow>& rows() const { return rows_; }

 private:
  std::vector<SweepRow> rows_;
};

/// Calls `run(lr)` for each grid point (DivergedError/NumericalError mark the
/// row as diverged) and selects the lowest perplexity; ties go to the lowest
/// learning rate.
SweepResult sweep(std::span<const double> grid, const std::function<double(double)>& run);
SweepResult select_best(std::vector<SweepRow> rows);
const std::vector<double>& default_lr_grid();
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

struct ForgettingEntry {
  std::string language;
  double before = 0.0;
  double after = 0.0;
  double delta = 0.0;
  double before_std = 0.0;  // bootstrap std of the before-model's perplexity
  bool flagged = false;
};

struct EvalReport {
  std::vector<ForgettingEntry> entries;
  std::size_t resamples = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

/// Bootstrap std of exp(Σnll/Σtokens) over `resamples` document resamples.
double bootstrap_perplexity_std(const LanguagePerplexity& lp, std::size_t resamples, Rng rng);

/// Δ = after - before per language; flagged when Δ exceeds the before-model's
/// bootstrap std. Fewer than 2 resamples: no flags and a warning.
EvalReport forgetting_report(const MoeLm& before, const MoeLm& after, std::span<const LanguageDocs> anchors,
                             std::size_t resamples = 50, std::uint64_t seed = 0);
/// Recomputes flags from persisted raw values.
void apply_forgetting_flags(EvalReport& report);

nlohmann::json eval_report_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
void write_eval_report(const std::filesystem::path& dir, const std::string& stem, const EvalReport& r);

}  // namespace moelab
