#include "moelab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {
namespace {

bool safe_id(const std::string& s) {
  if (s.empty() || s.size() > 64) return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; });
}

std::size_t sample_index(std::span<const double> weights, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // u lands past the accumulated mass only through rounding.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return 0;
}

// Scales a symmetric nonnegative kernel so that both marginals equal pi.
// The support is symmetric with a positive diagonal, so every entry lies on
// a positive diagonal and the scaling exists.
void sinkhorn(std::vector<std::vector<double>>& k, const std::vector<std::vector<int>>& support,
              const std::vector<double>& pi) {
  const std::size_t n = pi.size();
  std::vector<double> col(n);
  for (int iter = 0; iter < 20000; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (double v : k[i]) s += v;
      for (double& v : k[i]) v *= pi[i] / s;
    }
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < support[i].size(); ++a) col[static_cast<std::size_t>(support[i][a])] += k[i][a];
    }
    double err = 0.0;
    for (std::size_t j = 0; j < n; ++j) err = std::max(err, std::abs(col[j] - pi[j]) / pi[j]);
    if (err < 1e-13) return;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < support[i].size(); ++a) {
        const auto j = static_cast<std::size_t>(support[i][a]);
        k[i][a] *= pi[j] / col[j];
      }
    }
  }
}

}  // namespace

void LanguageSpec::validate() const {
  if (tokens.empty()) throw ConfigError("language '" + id + "' has an empty vocabulary");
  if (unigram.size() != tokens.size() || successors.size() != tokens.size() || transition.size() != tokens.size()) {
    throw ConfigError("language '" + id + "' has misaligned chain tables");
  }
  if (vocabulary().size() != tokens.size()) throw ConfigError("language '" + id + "' repeats a token id");
  if (vocabulary().count(kBos)) throw ConfigError("language '" + id + "' contains the reserved BOS id");
  const double total = std::accumulate(unigram.begin(), unigram.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("language '" + id + "' unigram does not sum to 1");
  if (min_doc_len < 1 || max_doc_len < min_doc_len) throw ConfigError("language '" + id + "' has an invalid length range");
}

LanguageSpec make_language(std::string id, std::vector<int> tokens, const ChainOptions& opts, std::uint64_t chain_seed,
                           int min_doc_len, int max_doc_len) {
  if (tokens.empty()) throw ConfigError("language '" + id + "' needs at least one token");
  if (opts.successor_set_size < 1) throw ConfigError("successor_set_size must be positive");
  if (!(opts.zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be nonnegative");
  if (!(opts.self_loop > 0.0)) throw ConfigError("self_loop weight must be positive");
  LanguageSpec s;
  s.id = std::move(id);
  s.tokens = std::move(tokens);
  s.chain_seed = chain_seed;
  s.min_doc_len = min_doc_len;
  s.max_doc_len = max_doc_len;
  const std::size_t n = s.tokens.size();

  s.unigram.resize(n);
  for (std::size_t r = 0; r < n; ++r) s.unigram[r] = std::pow(static_cast<double>(r + 1), -opts.zipf_exponent);
  const double z = std::accumulate(s.unigram.begin(), s.unigram.end(), 0.0);
  for (double& p : s.unigram) p /= z;

  // Successor sets drawn by unigram weight (Efraimidis-Spirakis keys), then
  // symmetrized so the transition support is closed under reversal.
  Rng rng(chain_seed);
  std::vector<std::set<int>> adj(n);
  const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(opts.successor_set_size), n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    adj[i].insert(static_cast<int>(i));
    if (m == 0) continue;
    Rng r = rng.split(i);
    std::vector<std::pair<double, int>> keys;
    keys.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double u = std::max(r.uniform(), 1e-300);
      keys.emplace_back(std::log(u) / s.unigram[j], static_cast<int>(j));
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(m), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t a = 0; a < m; ++a) {
      adj[i].insert(keys[a].second);
      adj[static_cast<std::size_t>(keys[a].second)].insert(static_cast<int>(i));
    }
  }

  s.successors.resize(n);
  std::vector<std::vector<double>> k(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.successors[i].assign(adj[i].begin(), adj[i].end());
    for (int j : s.successors[i]) {
      const double w = s.unigram[i] * s.unigram[static_cast<std::size_t>(j)];
      k[i].push_back(static_cast<std::size_t>(j) == i ? opts.self_loop * w : w);
    }
  }
  sinkhorn(k, s.successors, s.unigram);
  s.transition.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double row = std::accumulate(k[i].begin(), k[i].end(), 0.0);
    for (double f : k[i]) s.transition[i].push_back(f / row);
  }
  return s;
}

std::vector<int> VocabAllocator::take(std::size_t n, const std::string& purpose) {
  if (static_cast<std::size_t>(end_ - next_) < n) {
    throw ConfigError("vocabulary exhausted: " + purpose + " needs " + std::to_string(n) + " fresh ids but only " +
                      std::to_string(end_ - next_) + " of " + std::to_string(end_) + " remain");
  }
  std::vector<int> out(n);
  std::iota(out.begin(), out.end(), next_);
  next_ += static_cast<int>(n);
  return out;
}

std::size_t shared_count_for_jaccard(std::size_t n, double jaccard) {
  if (!(jaccard >= 0.0 && jaccard <= 1.0)) throw ConfigError("overlap must lie in [0, 1]");
  const double exact = 2.0 * static_cast<double>(n) * jaccard / (1.0 + jaccard);
  auto j_of = [n](std::size_t c) { return static_cast<double>(c) / static_cast<double>(2 * n - c); };
  const auto lo = static_cast<std::size_t>(std::floor(exact));
  const std::size_t hi = std::min(n, lo + 1);
  return std::abs(j_of(lo) - jaccard) <= std::abs(j_of(hi) - jaccard) ? lo : hi;
}

LanguageSpec derive_target(const LanguageSpec& anchor, std::string id, double shared_fraction,
                           std::span<const int> keep, VocabAllocator& alloc, Rng rng) {
  const std::size_t n = anchor.tokens.size();
  const std::size_t c = shared_count_for_jaccard(n, shared_fraction);
  std::vector<bool> retained(n, false);
  std::vector<std::size_t> free_positions;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::find(keep.begin(), keep.end(), anchor.tokens[i]) != keep.end()) {
      retained[i] = true;
      ++kept;
    } else {
      free_positions.push_back(i);
    }
  }
  if (c < kept) {
    throw ConfigError("target '" + id + "': overlap " + std::to_string(shared_fraction) + " needs " + std::to_string(c) +
                      " shared tokens but " + std::to_string(kept) + " tokens are common to every language");
  }
  for (std::size_t idx : rng.sample_without_replacement(free_positions.size(), c - kept)) retained[free_positions[idx]] = true;
  std::vector<int> fresh = alloc.take(n - c, "private pool of '" + id + "'");
  LanguageSpec t = anchor;
  t.id = std::move(id);
  std::size_t f = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!retained[i]) t.tokens[i] = fresh[f++];
  }
  return t;
}

std::pair<LanguageSpec, LanguageSpec> build_language_family(const FamilySpec& family, std::span<const int> common,
                                                            VocabAllocator& alloc, const ChainOptions& opts,
                                                            int min_doc_len, int max_doc_len, Rng rng) {
  if (family.vocab_size < common.size() || family.vocab_size == 0) {
    throw ConfigError("family '" + family.anchor_id + "': vocab_size " + std::to_string(family.vocab_size) +
                      " cannot hold the " + std::to_string(common.size()) + "-token common pool");
  }
  if (!(family.shared_fraction >= 0.0 && family.shared_fraction <= 1.0)) {
    throw ConfigError("family '" + family.anchor_id + "': shared_fraction must lie in [0, 1]");
  }
  std::vector<int> tokens(common.begin(), common.end());
  std::vector<int> own = alloc.take(family.vocab_size - common.size(), "vocabulary of '" + family.anchor_id + "'");
  Rng ranks = rng.split("ranks");
  ranks.shuffle(std::span<int>(own));
  tokens.insert(tokens.end(), own.begin(), own.end());
  LanguageSpec anchor = make_language(family.anchor_id, std::move(tokens), opts, rng.split("chain").next_u64(),
                                      min_doc_len, max_doc_len);
  LanguageSpec target = derive_target(anchor, family.target_id, family.shared_fraction, common, alloc, rng.split("target"));
  return {std::move(anchor), std::move(target)};
}

Document generate_document(const LanguageSpec& spec, std::size_t length, Rng rng) {
  Document d;
  d.reserve(length + 1);
  d.push_back(kBos);
  if (length == 0) return d;
  std::size_t state = sample_index(spec.unigram, rng.uniform());
  d.push_back(spec.tokens[state]);
  for (std::size_t t = 1; t < length; ++t) {
    const std::size_t a = sample_index(spec.transition[state], rng.uniform());
    state = static_cast<std::size_t>(spec.successors[state][a]);
    d.push_back(spec.tokens[state]);
  }
  return d;
}

std::string to_string(OverlapMetric m) {
  switch (m) {
    case OverlapMetric::Jaccard:
      return "jaccard";
    case OverlapMetric::OverlapCoefficient:
      return "overlap_coefficient";
    case OverlapMetric::WeightedJaccard:
      return "weighted_jaccard";
  }
  return "jaccard";
}

OverlapMetric overlap_metric_from_string(const std::string& s) {
  if (s == "jaccard") return OverlapMetric::Jaccard;
  if (s == "overlap_coefficient") return OverlapMetric::OverlapCoefficient;
  if (s == "weighted_jaccard") return OverlapMetric::WeightedJaccard;
  throw ConfigError("unknown overlap metric '" + s + "' (jaccard | overlap_coefficient | weighted_jaccard)");
}

namespace {
std::size_t intersection_size(const std::set<int>& a, const std::set<int>& b) {
  std::size_t n = 0;
  for (int x : a) n += b.count(x);
  return n;
}
}  // namespace

double vocab_overlap(const std::set<int>& a, const std::set<int>& b) {
  if (a.empty() || b.empty()) throw InputError("vocab_overlap: empty vocabulary");
  const std::size_t inter = intersection_size(a, b);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

double overlap_coefficient(const std::set<int>& a, const std::set<int>& b) {
  if (a.empty() || b.empty()) throw InputError("overlap_coefficient: empty vocabulary");
  return static_cast<double>(intersection_size(a, b)) / static_cast<double>(std::min(a.size(), b.size()));
}

double weighted_jaccard(const std::map<int, double>& p, const std::map<int, double>& q) {
  if (p.empty() || q.empty()) throw InputError("weighted_jaccard: empty distribution");
  double lo = 0.0, hi = 0.0;
  std::set<int> keys;
  for (const auto& [k, v] : p) keys.insert(k);
  for (const auto& [k, v] : q) keys.insert(k);
  for (int k : keys) {
    const double a = p.count(k) ? p.at(k) : 0.0;
    const double b = q.count(k) ? q.at(k) : 0.0;
    lo += std::min(a, b);
    hi += std::max(a, b);
  }
  return lo / hi;
}

std::set<int> observed_vocabulary(std::span<const Document> docs) {
  std::set<int> v;
  for (const auto& d : docs) {
    for (int t : d) {
      if (t != kBos) v.insert(t);
    }
  }
  return v;
}

std::map<int, double> token_distribution(std::span<const Document> docs) {
  std::map<int, double> counts;
  double total = 0.0;
  for (const auto& d : docs) {
    for (int t : d) {
      if (t == kBos) continue;
      counts[t] += 1.0;
      total += 1.0;
    }
  }
  for (auto& [k, v] : counts) v /= total;
  return counts;
}

// ---------------------------------------------------------------------------

void CorpusLayout::validate() const {
  if (vocab_size < 2) throw ConfigError("corpus: vocab_size must be at least 2");
  if (!(common_fraction >= 0.0 && common_fraction < 1.0)) throw ConfigError("corpus: common_fraction must lie in [0, 1)");
  if (language_vocab < 1) throw ConfigError("corpus: language_vocab must be positive");
  if (pretrain_ids.empty()) throw ConfigError("corpus: at least one pretraining language is required");
  if (line_overlaps.size() + 1 != pretrain_ids.size()) {
    throw ConfigError("corpus: line_overlaps needs exactly " + std::to_string(pretrain_ids.size() - 1) +
                      " entries (one per consecutive pretraining pair)");
  }
  for (double j : line_overlaps) {
    if (!(j >= 0.0 && j <= 1.0)) throw ConfigError("corpus: line_overlaps entries must lie in [0, 1]");
  }
  std::set<std::string> ids;
  auto add_id = [&](const std::string& id) {
    if (!safe_id(id)) throw ConfigError("corpus: language id '" + id + "' is not filesystem-safe");
    if (!ids.insert(id).second) throw ConfigError("corpus: duplicate language id '" + id + "'");
  };
  for (const auto& id : pretrain_ids) add_id(id);
  for (const auto& t : targets) {
    add_id(t.id);
    if (std::find(pretrain_ids.begin(), pretrain_ids.end(), t.anchor) == pretrain_ids.end()) {
      throw ConfigError("corpus: target '" + t.id + "' names unknown anchor '" + t.anchor + "'");
    }
    if (!(t.overlap >= 0.0 && t.overlap <= 1.0)) throw ConfigError("corpus: target overlap must lie in [0, 1]");
  }
  if (min_doc_len < 1 || max_doc_len < min_doc_len) throw ConfigError("corpus: need 1 <= min_doc_len <= max_doc_len");
  if (train_docs < 0 || valid_docs < 1 || test_docs < 0 || target_train_docs < 0) {
    throw ConfigError("corpus: document counts must be nonnegative (valid_docs >= 1)");
  }
}

void to_json(nlohmann::json& j, const CorpusLayout& l) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : l.targets) targets.push_back({{"id", t.id}, {"anchor", t.anchor}, {"overlap", t.overlap}});
  j = nlohmann::json{{"seed", l.seed},
                     {"vocab_size", l.vocab_size},
                     {"common_fraction", l.common_fraction},
                     {"language_vocab", l.language_vocab},
                     {"pretrain_ids", l.pretrain_ids},
                     {"line_overlaps", l.line_overlaps},
                     {"targets", targets},
                     {"zipf_exponent", l.chain.zipf_exponent},
                     {"successor_set_size", l.chain.successor_set_size},
                     {"self_loop", l.chain.self_loop},
                     {"min_doc_len", l.min_doc_len},
                     {"max_doc_len", l.max_doc_len},
                     {"train_docs", l.train_docs},
                     {"valid_docs", l.valid_docs},
                     {"test_docs", l.test_docs},
                     {"target_train_docs", l.target_train_docs},
                     {"overlap_metric", to_string(l.metric)}};
}

void from_json(const nlohmann::json& j, CorpusLayout& l) {
  CorpusLayout d;
  l.seed = j.value("seed", d.seed);
  l.vocab_size = j.value("vocab_size", d.vocab_size);
  l.common_fraction = j.value("common_fraction", d.common_fraction);
  l.language_vocab = j.value("language_vocab", d.language_vocab);
  l.pretrain_ids = j.value("pretrain_ids", d.pretrain_ids);
  l.line_overlaps = j.value("line_overlaps", d.line_overlaps);
  if (j.contains("targets")) {
    l.targets.clear();
    for (const auto& t : j.at("targets")) {
      l.targets.push_back({t.at("id").get<std::string>(), t.at("anchor").get<std::string>(), t.at("overlap").get<double>()});
    }
  } else {
    l.targets = d.targets;
  }
  l.chain.zipf_exponent = j.value("zipf_exponent", d.chain.zipf_exponent);
  l.chain.successor_set_size = j.value("successor_set_size", d.chain.successor_set_size);
  l.chain.self_loop = j.value("self_loop", d.chain.self_loop);
  l.min_doc_len = j.value("min_doc_len", d.min_doc_len);
  l.max_doc_len = j.value("max_doc_len", d.max_doc_len);
  l.train_docs = j.value("train_docs", d.train_docs);
  l.valid_docs = j.value("valid_docs", d.valid_docs);
  l.test_docs = j.value("test_docs", d.test_docs);
  l.target_train_docs = j.value("target_train_docs", d.target_train_docs);
  l.metric = overlap_metric_from_string(j.value("overlap_metric", to_string(d.metric)));
}

const LanguageSpec& CorpusManifest::language(const std::string& id) const {
  for (const auto& l : languages) {
    if (l.id == id) return l;
  }
  throw ConfigError("unknown language '" + id + "'");
}

std::vector<std::string> CorpusManifest::ids_with_role(const std::string& role) const {
  std::vector<std::string> out;
  for (const auto& l : languages) {
    if (roles.at(l.id) == role) out.push_back(l.id);
  }
  return out;
}

namespace {

double spec_overlap(OverlapMetric metric, const LanguageSpec& a, const LanguageSpec& b) {
  switch (metric) {
    case OverlapMetric::Jaccard:
      return vocab_overlap(a.vocabulary(), b.vocabulary());
    case OverlapMetric::OverlapCoefficient:
      return overlap_coefficient(a.vocabulary(), b.vocabulary());
    case OverlapMetric::WeightedJaccard: {
      std::map<int, double> p, q;
      for (std::size_t i = 0; i < a.tokens.size(); ++i) p[a.tokens[i]] = a.unigram[i];
      for (std::size_t i = 0; i < b.tokens.size(); ++i) q[b.tokens[i]] = b.unigram[i];
      return weighted_jaccard(p, q);
    }
  }
  return 0.0;
}

double corpus_overlap(OverlapMetric metric, std::span<const Document> a, std::span<const Document> b) {
  switch (metric) {
    case OverlapMetric::Jaccard:
      return vocab_overlap(observed_vocabulary(a), observed_vocabulary(b));
    case OverlapMetric::OverlapCoefficient:
      return overlap_coefficient(observed_vocabulary(a), observed_vocabulary(b));
    case OverlapMetric::WeightedJaccard:
      return weighted_jaccard(token_distribution(a), token_distribution(b));
  }
  return 0.0;
}

// Window shift d giving consecutive Jaccard (c0+m-d)/(c0+m+d), nearest integer.
std::size_t line_shift(std::size_t c0, std::size_t m, double j) {
  auto j_of = [&](std::size_t d) {
    const std::size_t dd = std::min(d, m);
    return static_cast<double>(c0 + m - dd) / static_cast<double>(c0 + m + dd);
  };
  std::size_t best = 0;
  for (std::size_t d = 1; d <= m; ++d) {
    if (std::abs(j_of(d) - j) < std::abs(j_of(best) - j)) best = d;
  }
  return best;
}

}  // namespace

CorpusManifest build_manifest(const CorpusLayout& layout) {
  layout.validate();
  CorpusManifest m;
  m.layout = layout;
  Rng root(layout.seed);
  const auto c0 = static_cast<std::size_t>(std::llround(layout.common_fraction * layout.vocab_size));
  if (c0 >= static_cast<std::size_t>(layout.language_vocab)) {
    throw ConfigError("corpus: common pool (" + std::to_string(c0) + " tokens) leaves no room in language_vocab " +
                      std::to_string(layout.language_vocab));
  }
  const std::size_t win = static_cast<std::size_t>(layout.language_vocab) - c0;
  VocabAllocator alloc(1, layout.vocab_size);
  const std::vector<int> common = alloc.take(c0, "common pool");

  std::vector<std::size_t> offsets{0};
  for (double j : layout.line_overlaps) offsets.push_back(offsets.back() + line_shift(c0, win, j));
  const std::vector<int> line = alloc.take(offsets.back() + win, "pretraining token line");

  for (std::size_t i = 0; i < layout.pretrain_ids.size(); ++i) {
    const std::string& id = layout.pretrain_ids[i];
    std::vector<int> own(line.begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                         line.begin() + static_cast<std::ptrdiff_t>(offsets[i] + win));
    Rng rng = root.split("language").split(id);
    rng.split("ranks").shuffle(std::span<int>(own));
    std::vector<int> tokens = common;
    tokens.insert(tokens.end(), own.begin(), own.end());
    m.languages.push_back(make_language(id, std::move(tokens), layout.chain, rng.split("chain").next_u64(),
                                        layout.min_doc_len, layout.max_doc_len));
    m.roles[id] = "pretrain";
    m.splits[id] = {layout.train_docs, layout.valid_docs, layout.test_docs};
  }
  for (const auto& t : layout.targets) {
    const LanguageSpec anchor = m.language(t.anchor);
    m.languages.push_back(derive_target(anchor, t.id, t.overlap, common, alloc, root.split("target").split(t.id)));
    m.roles[t.id] = "target";
    m.anchors[t.id] = t.anchor;
    m.splits[t.id] = {layout.target_train_docs > 0 ? layout.target_train_docs : layout.train_docs, layout.valid_docs,
                      layout.test_docs};
  }
  const std::size_t n = m.languages.size();
  m.target_overlap.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      m.target_overlap[a][b] = m.target_overlap[b][a] = spec_overlap(layout.metric, m.languages[a], m.languages[b]);
    }
  }
  for (const auto& l : m.languages) l.validate();
  return m;
}

Document generate_split_document(const CorpusManifest& m, const LanguageSpec& spec, const std::string& split,
                                 std::size_t index) {
  Rng rng = Rng(m.layout.seed).split("documents").split(spec.id).split(split).split(index);
  const auto span = static_cast<std::size_t>(spec.max_doc_len - spec.min_doc_len + 1);
  const std::size_t length = static_cast<std::size_t>(spec.min_doc_len) + rng.below(span);
  return generate_document(spec, length, rng.split("tokens"));
}

void write_documents(const std::filesystem::path& path, std::span<const Document> docs) {
  std::ostringstream ss;
  for (const auto& d : docs) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (i) ss << ' ';
      ss << d[i];
    }
    ss << '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string s = ss.str();
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw IoError("short write on " + path.string());
}

std::vector<Document> read_documents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Document d;
    long long v;
    while (ls >> v) {
      if (v < 0 || v > 1'000'000'000) throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad token id");
      d.push_back(static_cast<int>(v));
    }
    if (!ls.eof()) throw InputError(path.string() + ":" + std::to_string(lineno) + ": non-numeric token");
    docs.push_back(std::move(d));
  }
  return docs;
}

std::vector<Document> load_split(const std::filesystem::path& dir, const std::string& lang, const std::string& split) {
  return read_documents(dir / (lang + "." + split + ".txt"));
}

CorpusReport emit_corpus(const CorpusManifest& m, const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec || !std::filesystem::is_directory(out)) throw IoError("cannot create corpus directory " + out.string());

  CorpusReport r;
  std::vector<std::vector<Document>> train;
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& spec : m.languages) {
    r.ids.push_back(spec.id);
    const SplitSizes sizes = m.splits.at(spec.id);
    nlohmann::json jl{{"id", spec.id}, {"role", m.roles.at(spec.id)}, {"vocab_size", spec.tokens.size()}};
    if (m.anchors.count(spec.id)) jl["anchor"] = m.anchors.at(spec.id);
    for (const auto& [split, count] : {std::pair<std::string, int>{"train", sizes.train}, {"valid", sizes.valid}, {"test", sizes.test}}) {
      std::vector<Document> docs;
      docs.reserve(static_cast<std::size_t>(count));
      std::size_t tokens = 0;
      for (int i = 0; i < count; ++i) {
        docs.push_back(generate_split_document(m, spec, split, static_cast<std::size_t>(i)));
        tokens += docs.back().size() - 1;
      }
      write_documents(out / (spec.id + "." + split + ".txt"), docs);
      r.tokens[spec.id][split] = tokens;
      jl["splits"][split] = {{"documents", count}, {"tokens", tokens}};
      if (split == "train") train.push_back(std::move(docs));
    }
    langs.push_back(jl);
  }
  const std::size_t n = m.languages.size();
  r.target = m.target_overlap;
  r.achieved.assign(n, std::vector<double>(n, 1.0));
  double worst = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (train[a].empty() || train[b].empty()) {
        r.achieved[a][b] = r.achieved[b][a] = std::nan("");
        continue;
      }
      r.achieved[a][b] = r.achieved[b][a] = corpus_overlap(m.layout.metric, train[a], train[b]);
      worst = std::max(worst, std::abs(r.achieved[a][b] - r.target[a][b]));
    }
  }
  r.json = {{"metric", to_string(m.layout.metric)},
            {"seed", m.layout.seed},
            {"languages", langs},
            {"order", r.ids},
            {"target_overlap", r.target},
            {"achieved_overlap", r.achieved},
            {"max_abs_deviation", worst}};
  {
    std::ofstream f(out / "overlap_report.json", std::ios::trunc);
    if (!f) throw IoError("cannot write overlap report in " + out.string());
    f << r.json.dump(2) << '\n';
  }
  {
    std::ofstream f(out / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + out.string());
    f << nlohmann::json(m.layout).dump(2) << '\n';
  }
  return r;
}

}  // namespace moelab
