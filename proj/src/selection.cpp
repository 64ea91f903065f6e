#include "moelab/selection.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "moelab/error.hpp"

namespace moelab {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::SEFT:
      return "SEFT";
    case Strategy::SSFT:
      return "SSFT";
    case Strategy::RANDOM_SEFT:
      return "RANDOM_SEFT";
    case Strategy::SEFT_TOP20:
      return "SEFT_TOP20";
    case Strategy::AEFT:
      return "AEFT";
    case Strategy::FULL_FT:
      return "FULL_FT";
  }
  return "SEFT";
}

Strategy strategy_from_string(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  std::replace(u.begin(), u.end(), '-', '_');
  for (Strategy st : all_strategies()) {
    if (to_string(st) == u) return st;
  }
  throw ConfigError("unknown strategy '" + s + "' (seft | ssft | random_seft | seft_top20 | aeft | full_ft)");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> v{Strategy::SEFT,       Strategy::SSFT, Strategy::RANDOM_SEFT,
                                       Strategy::SEFT_TOP20, Strategy::AEFT, Strategy::FULL_FT};
  return v;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::LanguageSpecific:
      return "language_specific";
    case Provenance::Shared:
      return "shared";
    case Provenance::Random:
      return "random";
    case Provenance::All:
      return "all";
  }
  return "all";
}

Provenance provenance_from_string(const std::string& s) {
  for (Provenance p : {Provenance::LanguageSpecific, Provenance::Shared, Provenance::Random, Provenance::All}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown provenance label '" + s + "'");
}

std::vector<ActivationGapEntry> compute_gaps(const ActivationFrequencyTable& table) {
  const std::size_t nl = table.languages.size();
  if (nl < 2) throw InputError("compute_gaps: need at least two languages, table has " + std::to_string(nl));
  std::vector<ActivationGapEntry> out;
  for (std::size_t e = 0; e < table.experts(); ++e) {
    std::size_t best = 0, second = 1;
    if (table.freq(1, e) > table.freq(0, e)) std::swap(best, second);
    for (std::size_t l = 2; l < nl; ++l) {
      const double f = table.freq(l, e);
      if (f > table.freq(best, e)) {
        second = best;
        best = l;
      } else if (f > table.freq(second, e)) {
        second = l;
      }
    }
    ActivationGapEntry g;
    g.layer = table.layer;
    g.expert = e;
    g.dominant = table.languages[best];
    g.runner_up = table.languages[second];
    g.dominant_freq = table.freq(best, e);
    g.runner_up_freq = table.freq(second, e);
    g.gap = g.dominant_freq - g.runner_up_freq;
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<ActivationGapEntry> compute_gaps(std::span<const ActivationFrequencyTable> tables) {
  std::vector<ActivationGapEntry> out;
  for (const auto& t : tables) {
    auto g = compute_gaps(t);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

std::size_t ExpertSelectionPlan::count(std::size_t layer) const {
  auto it = experts.find(layer);
  return it == experts.end() ? 0 : it->second.size();
}

std::size_t ExpertSelectionPlan::total_experts() const {
  std::size_t n = 0;
  for (const auto& [l, v] : experts) n += v.size();
  return n;
}

bool ExpertSelectionPlan::contains(std::size_t layer, std::size_t expert) const {
  auto it = experts.find(layer);
  if (it == experts.end()) return false;
  return std::any_of(it->second.begin(), it->second.end(), [&](const SelectedExpert& s) { return s.expert == expert; });
}

void ExpertSelectionPlan::validate(const ModelConfig& config) const {
  const auto nl = static_cast<std::size_t>(config.n_layers);
  const auto ne = static_cast<std::size_t>(config.n_experts);
  if (whole_model) {
    if (!experts.empty()) throw ConfigError("plan: FULL_FT must carry an empty expert map");
    return;
  }
  if (n_experts != 0 && n_experts != ne) {
    throw ConfigError("plan was built for " + std::to_string(n_experts) + " experts per layer; the model has " +
                      std::to_string(ne));
  }
  for (std::size_t l : layers) {
    if (l >= nl) throw ConfigError("plan layer " + std::to_string(l) + " does not exist (model has " + std::to_string(nl) + ")");
  }
  for (const auto& [l, v] : experts) {
    if (std::find(layers.begin(), layers.end(), l) == layers.end()) {
      throw ConfigError("plan selects experts in layer " + std::to_string(l) + " outside its layer set");
    }
    std::set<std::size_t> seen;
    for (const auto& s : v) {
      if (s.expert >= ne) {
        throw ConfigError("plan selects expert " + std::to_string(s.expert) + " in layer " + std::to_string(l) +
                          " but the model has " + std::to_string(ne) + " experts");
      }
      if (!seen.insert(s.expert).second) {
        throw ConfigError("plan lists expert " + std::to_string(s.expert) + " twice in layer " + std::to_string(l));
      }
    }
  }
}

std::vector<std::size_t> default_layers(const ModelConfig& config) {
  const auto n = static_cast<std::size_t>(config.n_layers);
  if (n == 1) return {0};
  return {n - 2, n - 1};
}

ExpertSelectionPlan select_seft(std::span<const ActivationGapEntry> gaps, const std::string& anchor, double alpha,
                                std::vector<std::size_t> layers, std::size_t n_experts) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (layers.empty()) throw ConfigError("layer set must be nonempty");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  ExpertSelectionPlan p;
  p.strategy = Strategy::SEFT;
  p.anchor = anchor;
  p.alpha = alpha;
  p.layers = layers;
  p.n_experts = n_experts;
  for (const auto& g : gaps) {
    if (!std::binary_search(layers.begin(), layers.end(), g.layer)) continue;
    if (g.dominant == anchor && g.gap > alpha) p.experts[g.layer].push_back({g.expert, Provenance::LanguageSpecific});
  }
  for (auto& [l, v] : p.experts) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.expert < b.expert; });
  }
  p.flagged_empty = p.total_experts() == 0;
  return p;
}

std::map<std::size_t, std::vector<std::size_t>> select_shared(std::span<const ActivationFrequencyTable> tables,
                                                              std::size_t k_shared, std::span<const std::size_t> layers,
                                                              std::span<const std::string> languages) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t layer : layers) {
    const ActivationFrequencyTable* t = nullptr;
    for (const auto& tab : tables) {
      if (tab.layer == layer) t = &tab;
    }
    if (t == nullptr) throw InputError("select_shared: no activation table for layer " + std::to_string(layer));
    const std::size_t e = t->experts();
    if (k_shared > e) {
      throw ConfigError("k_shared (" + std::to_string(k_shared) + ") exceeds the " + std::to_string(e) + " experts per layer");
    }
    std::vector<std::size_t> rows;
    if (languages.empty()) {
      rows.resize(t->languages.size());
      std::iota(rows.begin(), rows.end(), 0);
    } else {
      for (const auto& id : languages) rows.push_back(t->language_index(id));
    }
    // Summed exactly as count/tokens ratios; the common 1/|rows| factor does
    // not change the order. Equal means tie exactly and go to the lower id.
    std::vector<boost::multiprecision::cpp_rational> mean(e);
    for (std::size_t x = 0; x < e; ++x) {
      for (std::size_t r : rows) {
        if (t->tokens[r] == 0) throw InputError("select_shared: language '" + t->languages[r] + "' has no tokens");
        mean[x] += boost::multiprecision::cpp_rational(t->counts[r][x], t->tokens[r]);
      }
    }
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean[a] > mean[b]; });
    order.resize(k_shared);
    std::sort(order.begin(), order.end());
    out[layer] = order;
  }
  return out;
}

std::size_t plan_parameter_count(const ExpertSelectionPlan& plan, const ModelConfig& config) {
  const auto d = static_cast<std::size_t>(config.d_model);
  if (plan.whole_model) {
    return MoeLm::initial_parameters(config, Rng(0)).total_elements();
  }
  const std::size_t per_expert = 3 * d * static_cast<std::size_t>(config.expert_hidden);
  const std::size_t router = d * static_cast<std::size_t>(config.n_experts);
  std::size_t n = 0;
  for (const auto& [l, v] : plan.experts) {
    if (v.empty()) continue;
    n += v.size() * per_expert + router;
  }
  return n;
}

ExpertSelectionPlan assemble_plan(Strategy strategy, const SelectionInputs& in, const ModelConfig& config) {
  const auto e = static_cast<std::size_t>(config.n_experts);
  std::vector<std::size_t> layers = in.layers.empty() ? default_layers(config) : in.layers;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

  ExpertSelectionPlan p;
  auto gaps = [&]() {
    if (in.tables.empty()) throw InputError(to_string(strategy) + " needs activation tables");
    return compute_gaps(in.tables);
  };

  switch (strategy) {
    case Strategy::SEFT:
      p = select_seft(gaps(), in.anchor, in.alpha, layers, e);
      break;
    case Strategy::SSFT: {
      p = select_seft(gaps(), in.anchor, in.alpha, layers, e);
      if (in.k_shared == 0) break;  // reduces to SEFT
      p.strategy = Strategy::SSFT;
      p.k_shared = in.k_shared;
      const auto shared = select_shared(in.tables, in.k_shared, layers, in.shared_languages);
      for (const auto& [l, ids] : shared) {
        auto& v = p.experts[l];
        for (std::size_t x : ids) {
          if (!p.contains(l, x)) v.push_back({x, Provenance::Shared});
        }
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.expert < b.expert; });
      }
      p.flagged_empty = p.total_experts() == 0;
      break;
    }
    case Strategy::RANDOM_SEFT: {
      if (!in.base_seft || in.base_seft->strategy != Strategy::SEFT) {
        throw InputError("RANDOM_SEFT needs a base SEFT plan");
      }
      const ExpertSelectionPlan& base = *in.base_seft;
      p.strategy = Strategy::RANDOM_SEFT;
      p.anchor = base.anchor;
      p.alpha = base.alpha;
      p.layers = base.layers;
      p.n_experts = e;
      p.seed = in.seed;
      Rng rng = Rng(in.seed).split("random_seft");
      for (std::size_t l : base.layers) {
        const std::size_t n = base.count(l);
        if (n == 0) continue;
        std::vector<std::size_t> pick = rng.split(l).sample_without_replacement(e, n);
        std::sort(pick.begin(), pick.end());
        for (std::size_t x : pick) p.experts[l].push_back({x, Provenance::Random});
      }
      layers = base.layers;
      p.flagged_empty = p.total_experts() == 0;
      break;
    }
    case Strategy::SEFT_TOP20: {
      const auto all = gaps();
      p.strategy = Strategy::SEFT_TOP20;
      p.anchor = in.anchor;
      p.alpha = in.alpha;
      p.layers = layers;
      p.n_experts = e;
      const auto want = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(e) - 1e-9));
      for (std::size_t l : layers) {
        std::vector<const ActivationGapEntry*> mine, rest;
        for (const auto& g : all) {
          if (g.layer != l) continue;
          (g.dominant == in.anchor ? mine : rest).push_back(&g);
        }
        auto by_gap = [](const ActivationGapEntry* a, const ActivationGapEntry* b) {
          if (a->gap != b->gap) return a->gap > b->gap;
          return a->expert < b->expert;
        };
        std::sort(mine.begin(), mine.end(), by_gap);
        std::sort(rest.begin(), rest.end(), by_gap);
        mine.insert(mine.end(), rest.begin(), rest.end());
        if (mine.size() < want) {
          throw InputError("SEFT_TOP20: layer " + std::to_string(l) + " has gap entries for only " +
                           std::to_string(mine.size()) + " experts");
        }
        auto& v = p.experts[l];
        for (std::size_t i = 0; i < want; ++i) v.push_back({mine[i]->expert, Provenance::LanguageSpecific});
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.expert < b.expert; });
      }
      break;
    }
    case Strategy::AEFT:
      p.strategy = Strategy::AEFT;
      p.anchor = in.anchor;
      p.layers = layers;
      p.n_experts = e;
      for (std::size_t l : layers) {
        for (std::size_t x = 0; x < e; ++x) p.experts[l].push_back({x, Provenance::All});
      }
      break;
    case Strategy::FULL_FT:
      p.strategy = Strategy::FULL_FT;
      p.anchor = in.anchor;
      p.whole_model = true;
      p.n_experts = e;
      break;
  }
  p.target = in.target;
  if (strategy != Strategy::SEFT && strategy != Strategy::SSFT && strategy != Strategy::SEFT_TOP20) p.alpha = 0.0;
  if (strategy == Strategy::RANDOM_SEFT) p.alpha = in.base_seft->alpha;
  p.gap_source = in.gap_source;
  p.validate(config);
  p.trainable_params = plan_parameter_count(p, config);
  return p;
}

nlohmann::json plan_to_json(const ExpertSelectionPlan& p) {
  nlohmann::json sel = nlohmann::json::array();
  for (const auto& [l, v] : p.experts) {
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& s : v) ex.push_back({{"id", s.expert}, {"provenance", to_string(s.provenance)}});
    sel.push_back({{"layer", l}, {"count", v.size()}, {"experts", ex}});
  }
  nlohmann::json j{{"strategy", to_string(p.strategy)},
                   {"target", p.target},
                   {"anchor", p.anchor},
                   {"alpha", p.alpha},
                   {"k_shared", p.k_shared},
                   {"layers", p.layers},
                   {"whole_model", p.whole_model},
                   {"flagged_empty", p.flagged_empty},
                   {"n_experts", p.n_experts},
                   {"gap_source", p.gap_source},
                   {"trainable_params", p.trainable_params},
                   {"selection", sel}};
  j["seed"] = p.seed ? nlohmann::json(*p.seed) : nlohmann::json(nullptr);
  return j;
}

ExpertSelectionPlan plan_from_json(const nlohmann::json& j) {
  try {
    ExpertSelectionPlan p;
    p.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    p.target = j.value("target", "");
    p.anchor = j.value("anchor", "");
    p.alpha = j.value("alpha", 0.0);
    p.k_shared = j.value("k_shared", std::size_t{0});
    p.layers = j.value("layers", std::vector<std::size_t>{});
    p.whole_model = j.value("whole_model", false);
    p.flagged_empty = j.value("flagged_empty", false);
    p.n_experts = j.value("n_experts", std::size_t{0});
    p.gap_source = j.value("gap_source", "");
    p.trainable_params = j.value("trainable_params", std::size_t{0});
    if (j.contains("seed") && !j.at("seed").is_null()) p.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& layer : j.value("selection", nlohmann::json::array())) {
      auto& v = p.experts[layer.at("layer").get<std::size_t>()];
      for (const auto& ex : layer.at("experts")) {
        v.push_back({ex.at("id").get<std::size_t>(), provenance_from_string(ex.at("provenance").get<std::string>())});
      }
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed plan: ") + e.what());
  }
}

std::string serialize_plan(const ExpertSelectionPlan& plan) { return plan_to_json(plan).dump(2) + "\n"; }

void save_plan(const std::filesystem::path& path, const ExpertSelectionPlan& plan) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write plan " + path.string());
  out << serialize_plan(plan);
}

ExpertSelectionPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan " + path.string());
  try {
    return plan_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("plan " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace moelab
