#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"

namespace moelab {

/// Routing of one document at one layer. Rows are the document's tokens
/// (BOS excluded).
struct RoutingRecord {
  std::string language;
  std::size_t doc = 0;
  std::size_t layer = 0;
  Tensor probs;           // [T, E]
  std::vector<int> topk;  // [T * k]
  std::size_t k = 0;
  [[nodiscard]] std::size_t tokens() const { return probs.rows(); }
  [[nodiscard]] std::size_t experts() const { return probs.cols(); }
};

struct LanguageDocs {
  std::string id;
  std::vector<Document> docs;
};

/// Runs the model over each document (BOS + tokens, truncated to seq_len)
/// and records positions 1..T at every layer. Documents are packed
/// `batch_docs` at a time; routing does not depend on packing.
std::vector<RoutingRecord> collect_records(const MoeLm& model, std::span<const LanguageDocs> corpus,
                                           std::size_t batch_docs = 16);

enum class Granularity { Document, Language };

struct ExpertUsageDistribution {
  Granularity granularity = Granularity::Document;
  std::string owner;
  std::size_t layer = 0;
  std::vector<double> q;
  std::size_t support = 0;  // tokens (document) or documents (language)
};

ExpertUsageDistribution doc_usage(const RoutingRecord& r);
ExpertUsageDistribution lang_usage(std::span<const ExpertUsageDistribution> docs);

/// Shannon entropy in nats, 0 ln 0 = 0. Throws InputError unless q is a
/// distribution within 1e-9.
double router_entropy(std::span<const double> q);
/// Jensen-Shannon divergence in nats.
double pairwise_jsd(std::span<const double> a, std::span<const double> b);

struct ActivationFrequencyTable {
  std::size_t layer = 0;
  std::size_t k = 0;
  std::vector<std::string> languages;
  std::vector<std::vector<std::uint64_t>> counts;  // [language][expert]: tokens with expert in top-k
  std::vector<std::uint64_t> tokens;               // [language]

  [[nodiscard]] std::size_t experts() const { return counts.empty() ? 0 : counts.front().size(); }
  [[nodiscard]] double freq(std::size_t lang, std::size_t expert) const {
    return static_cast<double>(counts[lang][expert]) / static_cast<double>(tokens[lang]);
  }
  [[nodiscard]] std::size_t language_index(const std::string& id) const;
};

/// Table for `layer` over `languages` (in that order). Throws InputError if
/// a language has no tokens.
ActivationFrequencyTable activation_frequencies(std::span<const RoutingRecord> records, std::size_t layer,
                                                std::span<const std::string> languages);

/// Spearman rank correlation with average ranks for ties; nullopt when
/// either sequence is constant. Throws InputError on n < 2 or length mismatch.
std::optional<double> spearman_rho(std::span<const double> xs, std::span<const double> ys);

/// Per-layer routing metrics for one checkpoint.
struct RoutingSnapshot {
  std::uint64_t step = 0;
  std::vector<std::string> languages;
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> entropy;                 // [layer][language]
  std::vector<std::vector<std::vector<double>>> jsd;        // [layer][a][b]
  std::vector<ActivationFrequencyTable> activation;         // [layer]
  std::vector<std::vector<std::vector<double>>> usage;      // [layer][language] -> q

  [[nodiscard]] std::size_t layer_slot(std::size_t layer) const;
  /// Unweighted mean over unordered language pairs.
  [[nodiscard]] double mean_jsd(std::size_t layer) const;
};

/// Metrics from records; `layers` empty means every layer present.
RoutingSnapshot snapshot_from_records(std::span<const RoutingRecord> records, std::span<const std::string> languages,
                                      std::vector<std::size_t> layers, std::uint64_t step);

/// Forward passes with tracing over `corpus`; the model is not mutated.
/// Throws ConfigError when a token id is outside the model's vocabulary.
RoutingSnapshot snapshot(const MoeLm& model, std::span<const LanguageDocs> corpus, std::vector<std::size_t> layers,
                         std::uint64_t step, std::vector<RoutingRecord>* records = nullptr);

nlohmann::json snapshot_json(const RoutingSnapshot& s);

/// Writes entropy.csv, jsd.csv, activation.csv and snapshots.json under
/// `dir`, one row per (step, layer, ...) across all snapshots.
void write_snapshot_reports(const std::filesystem::path& dir, std::span<const RoutingSnapshot> snapshots);

/// One token per line, tab-separated:
/// step layer language doc token topk(comma-separated) probs(comma-separated)
void export_records(const std::filesystem::path& path, std::uint64_t step, std::span<const RoutingRecord> records);
std::vector<RoutingRecord> import_records(const std::filesystem::path& path, std::uint64_t* step = nullptr);

/// Training steps at which snapshots are taken: 0, every `fraction` of
/// total_steps, and total_steps.
std::vector<std::uint64_t> snapshot_schedule(std::uint64_t total_steps, double fraction = 0.1);

}  // namespace moelab
