#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/rng.hpp"

namespace moelab {

constexpr int kBos = 0;

using Document = std::vector<int>;  // BOS followed by the document's tokens

/// One synthetic language: a vocabulary, a Zipfian unigram and a sparse
/// first-order Markov chain whose stationary distribution is that unigram.
struct LanguageSpec {
  std::string id;
  std::vector<int> tokens;     // vocabulary, ordered by Zipf rank
  std::vector<double> unigram;  // aligned with tokens
  // Sparse transition rows over positions in `tokens`.
  std::vector<std::vector<int>> successors;
  std::vector<std::vector<double>> transition;
  std::uint64_t chain_seed = 0;
  int min_doc_len = 1;
  int max_doc_len = 1;

  [[nodiscard]] std::set<int> vocabulary() const { return {tokens.begin(), tokens.end()}; }
  /// Throws ConfigError on a malformed spec.
  void validate() const;
};

struct ChainOptions {
  double zipf_exponent = 1.1;
  int successor_set_size = 8;
  /// Self-transition weight relative to a successor of the same frequency.
  double self_loop = 0.05;
};

/// Builds the chain for `tokens` (already in Zipf rank order).
LanguageSpec make_language(std::string id, std::vector<int> tokens, const ChainOptions& opts, std::uint64_t chain_seed,
                           int min_doc_len, int max_doc_len);

/// Hands out fresh token ids from [first, vocab_size).
class VocabAllocator {
 public:
  VocabAllocator(int first, int vocab_size) : next_(first), end_(vocab_size) {}
  /// Throws ConfigError naming the shortfall when the space is exhausted.
  std::vector<int> take(std::size_t n, const std::string& purpose);
  [[nodiscard]] int next() const { return next_; }

 private:
  int next_;
  int end_;
};

/// Number of shared tokens c such that two vocabularies of size n sharing c
/// tokens have Jaccard index closest to `jaccard`: c/(2n-c) = J.
std::size_t shared_count_for_jaccard(std::size_t n, double jaccard);

/// A related language: keeps a subset of the anchor's tokens (always
/// including `keep`) and replaces the rest with fresh private ids, inheriting
/// the anchor's Zipf ranks and transition structure under that relabeling.
/// The achieved Jaccard index is within 1/n of `shared_fraction`.
LanguageSpec derive_target(const LanguageSpec& anchor, std::string id, double shared_fraction,
                           std::span<const int> keep, VocabAllocator& alloc, Rng rng);

struct FamilySpec {
  std::string anchor_id;
  std::string target_id;
  std::size_t vocab_size = 100;  // per language
  double shared_fraction = 0.5;
};

/// Anchor from fresh ids (plus `common`), target derived from it.
std::pair<LanguageSpec, LanguageSpec> build_language_family(const FamilySpec& family, std::span<const int> common,
                                                            VocabAllocator& alloc, const ChainOptions& opts,
                                                            int min_doc_len, int max_doc_len, Rng rng);

/// BOS followed by `length` tokens from the spec's chain.
Document generate_document(const LanguageSpec& spec, std::size_t length, Rng rng);

enum class OverlapMetric { Jaccard, OverlapCoefficient, WeightedJaccard };
std::string to_string(OverlapMetric m);
OverlapMetric overlap_metric_from_string(const std::string& s);

/// |A ∩ B| / |A ∪ B| over distinct ids. Throws InputError on an empty set.
double vocab_overlap(const std::set<int>& a, const std::set<int>& b);
/// |A ∩ B| / min(|A|, |B|).
double overlap_coefficient(const std::set<int>& a, const std::set<int>& b);
/// Σ min(p, q) / Σ max(p, q) over token frequency distributions.
double weighted_jaccard(const std::map<int, double>& p, const std::map<int, double>& q);

/// Distinct token ids observed in documents, BOS excluded.
std::set<int> observed_vocabulary(std::span<const Document> docs);
std::map<int, double> token_distribution(std::span<const Document> docs);

// ---------------------------------------------------------------------------
// Corpus layout and emission

struct TargetLayout {
  std::string id;
  std::string anchor;
  double overlap = 0.5;
};

/// Pretraining languages are contiguous windows on a token line, so their
/// pairwise overlaps are set by window offsets; consecutive languages hit
/// `line_overlaps` and the rest of the matrix follows. Targets are derived
/// from their anchors.
struct CorpusLayout {
  std::uint64_t seed = 1;
  int vocab_size = 512;
  double common_fraction = 0.02;
  int language_vocab = 128;  // per language, common pool included
  std::vector<std::string> pretrain_ids{"hr0", "hr1", "hr2", "hr3", "hr4"};
  std::vector<double> line_overlaps{0.9, 0.7, 0.6, 0.48};
  std::vector<TargetLayout> targets{{"lr0", "hr1", 0.2}, {"lr1", "hr2", 0.5}, {"lr2", "hr3", 0.9}};
  ChainOptions chain;
  int min_doc_len = 64;
  int max_doc_len = 127;
  int train_docs = 2000;
  int valid_docs = 100;
  int test_docs = 100;
  int target_train_docs = 0;  // 0: same as train_docs
  OverlapMetric metric = OverlapMetric::Jaccard;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusLayout& l);
void from_json(const nlohmann::json& j, CorpusLayout& l);

struct SplitSizes {
  int train = 0;
  int valid = 0;
  int test = 0;
};

struct CorpusManifest {
  CorpusLayout layout;
  std::vector<LanguageSpec> languages;
  std::map<std::string, std::string> roles;  // id -> "pretrain" | "target"
  std::map<std::string, std::string> anchors;  // target id -> anchor id
  std::map<std::string, SplitSizes> splits;
  std::vector<std::vector<double>> target_overlap;  // over `languages`, by spec vocabularies

  [[nodiscard]] const LanguageSpec& language(const std::string& id) const;
  [[nodiscard]] std::vector<std::string> ids_with_role(const std::string& role) const;
};

/// Pure function of the layout.
CorpusManifest build_manifest(const CorpusLayout& layout);

/// Document `index` of `split` for a language; each owns its RNG stream.
Document generate_split_document(const CorpusManifest& m, const LanguageSpec& spec, const std::string& split,
                                 std::size_t index);

struct CorpusReport {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> target;
  std::vector<std::vector<double>> achieved;  // from emitted train split
  std::map<std::string, std::map<std::string, std::size_t>> tokens;  // id -> split -> tokens
  nlohmann::json json;
};

/// Writes <out>/<lang>.{train,valid,test}.txt, manifest.json and
/// overlap_report.json; returns the report.
CorpusReport emit_corpus(const CorpusManifest& m, const std::filesystem::path& out);

void write_documents(const std::filesystem::path& path, std::span<const Document> docs);
std::vector<Document> read_documents(const std::filesystem::path& path);

/// Loads <dir>/<lang>.<split>.txt.
std::vector<Document> load_split(const std::filesystem::path& dir, const std::string& lang, const std::string& split);

}  // namespace moelab
