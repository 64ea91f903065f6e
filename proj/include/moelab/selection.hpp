#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/model.hpp"
#include "moelab/telemetry.hpp"

namespace moelab {

enum class Strategy { SEFT, SSFT, RANDOM_SEFT, SEFT_TOP20, AEFT, FULL_FT };
std::string to_string(Strategy s);
/// Accepts the tag in any case ("seft", "SSFT", "random_seft", ...).
Strategy strategy_from_string(const std::string& s);
const std::vector<Strategy>& all_strategies();

enum class Provenance { LanguageSpecific, Shared, Random, All };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct ActivationGapEntry {
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::string dominant;
  std::string runner_up;
  double dominant_freq = 0.0;
  double runner_up_freq = 0.0;
  double gap = 0.0;
};

/// One entry per (layer, expert). Ties in frequency go to the language
/// listed first in the table. Throws InputError with fewer than 2 languages.
std::vector<ActivationGapEntry> compute_gaps(const ActivationFrequencyTable& table);
std::vector<ActivationGapEntry> compute_gaps(std::span<const ActivationFrequencyTable> tables);

struct SelectedExpert {
  std::size_t expert = 0;
  Provenance provenance = Provenance::LanguageSpecific;
  friend bool operator==(const SelectedExpert&, const SelectedExpert&) = default;
};

struct ExpertSelectionPlan {
  Strategy strategy = Strategy::SEFT;
  std::string target;
  std::string anchor;
  double alpha = 0.01;
  std::size_t k_shared = 0;
  std::vector<std::size_t> layers;
  std::map<std::size_t, std::vector<SelectedExpert>> experts;  // layer -> sorted by expert id
  bool whole_model = false;
  bool flagged_empty = false;
  std::size_t n_experts = 0;
  std::optional<std::uint64_t> seed;  // RANDOM_SEFT only
  std::string gap_source;
  std::size_t trainable_params = 0;

  [[nodiscard]] std::size_t count(std::size_t layer) const;
  [[nodiscard]] std::size_t total_experts() const;
  [[nodiscard]] bool contains(std::size_t layer, std::size_t expert) const;
  /// Throws ConfigError unless layers and experts are valid for `config`.
  void validate(const ModelConfig& config) const;
};

/// Selects experts in `layers` whose dominant language is `anchor` and whose
/// gap exceeds alpha. An empty result is returned flagged, not thrown.
ExpertSelectionPlan select_seft(std::span<const ActivationGapEntry> gaps, const std::string& anchor, double alpha,
                                std::vector<std::size_t> layers, std::size_t n_experts);

/// Per layer, the k_shared experts with highest mean activation frequency
/// over `languages` (all when empty); ties by lowest expert id.
std::map<std::size_t, std::vector<std::size_t>> select_shared(std::span<const ActivationFrequencyTable> tables,
                                                              std::size_t k_shared, std::span<const std::size_t> layers,
                                                              std::span<const std::string> languages = {});

struct SelectionInputs {
  std::string target;
  std::string anchor;
  double alpha = 0.01;
  std::size_t k_shared = 5;
  std::vector<std::size_t> layers;  // empty: final two
  std::vector<ActivationFrequencyTable> tables;  // one per analysed layer
  std::vector<std::string> shared_languages;      // languages averaged for shared experts
  std::optional<ExpertSelectionPlan> base_seft;   // RANDOM_SEFT
  std::uint64_t seed = 0;
  std::string gap_source = "valid";
};

/// Builds the plan for `strategy`. SSFT with k_shared = 0 is the SEFT plan.
ExpertSelectionPlan assemble_plan(Strategy strategy, const SelectionInputs& in, const ModelConfig& config);

/// Final two MoE layers (or all when fewer).
std::vector<std::size_t> default_layers(const ModelConfig& config);

/// Parameters the plan makes trainable: selected expert tensors plus routers
/// of layers holding a selected expert; the whole model for FULL_FT.
std::size_t plan_parameter_count(const ExpertSelectionPlan& plan, const ModelConfig& config);

nlohmann::json plan_to_json(const ExpertSelectionPlan& plan);
ExpertSelectionPlan plan_from_json(const nlohmann::json& j);
std::string serialize_plan(const ExpertSelectionPlan& plan);
void save_plan(const std::filesystem::path& path, const ExpertSelectionPlan& plan);
ExpertSelectionPlan load_plan(const std::filesystem::path& path);

}  // namespace moelab
