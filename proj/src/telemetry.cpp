#include "moelab/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

std::vector<RoutingRecord> collect_records(const MoeLm& model, std::span<const LanguageDocs> corpus,
                                           std::size_t batch_docs) {
  const auto seq_len = static_cast<std::size_t>(model.config().seq_len);
  batch_docs = std::max<std::size_t>(1, batch_docs);
  std::vector<RoutingRecord> out;
  for (const LanguageDocs& lang : corpus) {
    for (std::size_t start = 0; start < lang.docs.size(); start += batch_docs) {
      const std::size_t end = std::min(lang.docs.size(), start + batch_docs);
      std::vector<std::vector<int>> inputs;
      std::vector<std::size_t> doc_ids;
      for (std::size_t d = start; d < end; ++d) {
        const Document& doc = lang.docs[d];
        if (doc.size() < 2) continue;  // BOS alone carries no tokens
        inputs.emplace_back(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(std::min(doc.size(), seq_len)));
        doc_ids.push_back(d);
      }
      if (inputs.empty()) continue;
      std::vector<std::size_t> offsets;
      std::vector<MoeLayerTrace> traces = model.routing(inputs, &offsets);
      for (std::size_t s = 0; s < inputs.size(); ++s) {
        const std::size_t first = offsets[s] + 1, last = offsets[s + 1];
        for (const MoeLayerTrace& tr : traces) {
          RoutingRecord r;
          r.language = lang.id;
          r.doc = doc_ids[s];
          r.layer = tr.layer;
          r.k = tr.k;
          const std::size_t e = tr.probs.cols();
          r.probs = Tensor({last - first, e});
          std::copy(tr.probs.data() + first * e, tr.probs.data() + last * e, r.probs.data());
          r.topk.assign(tr.topk.begin() + static_cast<std::ptrdiff_t>(first * tr.k),
                        tr.topk.begin() + static_cast<std::ptrdiff_t>(last * tr.k));
          out.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

ExpertUsageDistribution doc_usage(const RoutingRecord& r) {
  if (r.tokens() == 0) throw InputError("doc_usage: document " + std::to_string(r.doc) + " has no tokens");
  ExpertUsageDistribution u;
  u.granularity = Granularity::Document;
  u.owner = r.language + "/" + std::to_string(r.doc);
  u.layer = r.layer;
  u.support = r.tokens();
  u.q.assign(r.experts(), 0.0);
  for (std::size_t t = 0; t < r.tokens(); ++t) {
    for (std::size_t e = 0; e < r.experts(); ++e) u.q[e] += r.probs.at(t, e);
  }
  for (double& v : u.q) v /= static_cast<double>(r.tokens());
  return u;
}

ExpertUsageDistribution lang_usage(std::span<const ExpertUsageDistribution> docs) {
  if (docs.empty()) throw InputError("lang_usage: no documents");
  ExpertUsageDistribution u;
  u.granularity = Granularity::Language;
  u.owner = docs.front().owner.substr(0, docs.front().owner.find('/'));
  u.layer = docs.front().layer;
  u.support = docs.size();
  u.q.assign(docs.front().q.size(), 0.0);
  for (const auto& d : docs) {
    if (d.q.size() != u.q.size()) throw InputError("lang_usage: documents disagree on expert count");
    for (std::size_t e = 0; e < u.q.size(); ++e) u.q[e] += d.q[e];
  }
  for (double& v : u.q) v /= static_cast<double>(docs.size());
  return u;
}

namespace {
void check_distribution(std::span<const double> q, const char* what) {
  if (q.empty()) throw InputError(std::string(what) + ": empty distribution");
  double s = 0.0;
  for (double v : q) {
    if (!(v >= 0.0)) throw InputError(std::string(what) + ": negative or non-finite probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw InputError(std::string(what) + ": distribution sums to " + std::to_string(s));
}
}  // namespace

double router_entropy(std::span<const double> q) {
  check_distribution(q, "router_entropy");
  double h = 0.0;
  for (double v : q) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double pairwise_jsd(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw InputError("pairwise_jsd: expert counts differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  check_distribution(a, "pairwise_jsd");
  check_distribution(b, "pairwise_jsd");
  // a log(a/m) = a log1p((a-b)/(a+b)); stays accurate when a ~ b.
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double sum = a[i] + b[i];
    if (sum == 0.0) continue;
    const double d = (a[i] - b[i]) / sum;
    const double ta = a[i] > 0.0 ? a[i] * std::log1p(d) : 0.0;
    const double tb = b[i] > 0.0 ? b[i] * std::log1p(-d) : 0.0;
    s += ta + tb;  // symmetric bit for bit
  }
  return std::max(0.0, 0.5 * s);
}

std::size_t ActivationFrequencyTable::language_index(const std::string& id) const {
  for (std::size_t i = 0; i < languages.size(); ++i) {
    if (languages[i] == id) return i;
  }
  throw InputError("activation table has no language '" + id + "'");
}

ActivationFrequencyTable activation_frequencies(std::span<const RoutingRecord> records, std::size_t layer,
                                                std::span<const std::string> languages) {
  ActivationFrequencyTable t;
  t.layer = layer;
  t.languages.assign(languages.begin(), languages.end());
  std::size_t experts = 0;
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    experts = r.experts();
    t.k = r.k;
    break;
  }
  t.counts.assign(languages.size(), std::vector<std::uint64_t>(experts, 0));
  t.tokens.assign(languages.size(), 0);
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < languages.size(); ++i) slot[languages[i]] = i;
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    auto it = slot.find(r.language);
    if (it == slot.end()) continue;
    if (r.experts() != experts || r.k != t.k) throw InputError("activation_frequencies: records disagree on E or k");
    for (int e : r.topk) t.counts[it->second][static_cast<std::size_t>(e)] += 1;
    t.tokens[it->second] += r.tokens();
  }
  for (std::size_t i = 0; i < languages.size(); ++i) {
    if (t.tokens[i] == 0) {
      throw InputError("activation_frequencies: language '" + languages[i] + "' has no tokens at layer " + std::to_string(layer));
    }
  }
  return t;
}

namespace {
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t a = i; a <= j; ++a) ranks[order[a]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

std::optional<double> spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InputError("spearman_rho: sequences differ in length");
  if (xs.size() < 2) throw InputError("spearman_rho: need at least two observations");
  for (double v : xs) {
    if (!std::isfinite(v)) throw InputError("spearman_rho: non-finite value");
  }
  for (double v : ys) {
    if (!std::isfinite(v)) throw InputError("spearman_rho: non-finite value");
  }
  const std::vector<double> rx = average_ranks(xs), ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::size_t RoutingSnapshot::layer_slot(std::size_t layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer) return i;
  }
  throw InputError("snapshot has no layer " + std::to_string(layer));
}

double RoutingSnapshot::mean_jsd(std::size_t layer) const {
  const auto& m = jsd[layer_slot(layer)];
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t a = 0; a < m.size(); ++a) {
    for (std::size_t b = a + 1; b < m.size(); ++b) {
      s += m[a][b];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

RoutingSnapshot snapshot_from_records(std::span<const RoutingRecord> records, std::span<const std::string> languages,
                                      std::vector<std::size_t> layers, std::uint64_t step) {
  if (layers.empty()) {
    std::set<std::size_t> seen;
    for (const auto& r : records) seen.insert(r.layer);
    layers.assign(seen.begin(), seen.end());
  }
  RoutingSnapshot s;
  s.step = step;
  s.languages.assign(languages.begin(), languages.end());
  s.layers = layers;
  const std::size_t nl = languages.size();
  for (std::size_t layer : layers) {
    std::vector<std::vector<double>> q(nl);
    for (std::size_t li = 0; li < nl; ++li) {
      std::vector<ExpertUsageDistribution> docs;
      for (const auto& r : records) {
        if (r.layer == layer && r.language == languages[li]) docs.push_back(doc_usage(r));
      }
      if (docs.empty()) {
        throw InputError("snapshot: language '" + languages[li] + "' has no routed documents at layer " + std::to_string(layer));
      }
      q[li] = lang_usage(docs).q;
    }
    std::vector<double> ent(nl);
    for (std::size_t li = 0; li < nl; ++li) ent[li] = router_entropy(q[li]);
    std::vector<std::vector<double>> j(nl, std::vector<double>(nl, 0.0));
    for (std::size_t a = 0; a < nl; ++a) {
      for (std::size_t b = a + 1; b < nl; ++b) j[a][b] = j[b][a] = pairwise_jsd(q[a], q[b]);
    }
    s.entropy.push_back(std::move(ent));
    s.jsd.push_back(std::move(j));
    s.activation.push_back(activation_frequencies(records, layer, languages));
    s.usage.push_back(std::move(q));
  }
  return s;
}

RoutingSnapshot snapshot(const MoeLm& model, std::span<const LanguageDocs> corpus, std::vector<std::size_t> layers,
                         std::uint64_t step, std::vector<RoutingRecord>* records) {
  for (const auto& lang : corpus) {
    for (const auto& d : lang.docs) {
      for (int t : d) {
        if (t < 0 || t >= model.config().vocab_size) {
          throw ConfigError("corpus language '" + lang.id + "' uses token " + std::to_string(t) +
                            " outside the model vocabulary of " + std::to_string(model.config().vocab_size));
        }
      }
    }
  }
  for (std::size_t l : layers) {
    if (l >= static_cast<std::size_t>(model.config().n_layers)) {
      throw ConfigError("snapshot layer " + std::to_string(l) + " does not exist");
    }
  }
  std::vector<RoutingRecord> recs = collect_records(model, corpus);
  std::vector<std::string> ids;
  for (const auto& lang : corpus) ids.push_back(lang.id);
  RoutingSnapshot s = snapshot_from_records(recs, ids, std::move(layers), step);
  if (records != nullptr) *records = std::move(recs);
  return s;
}

nlohmann::json snapshot_json(const RoutingSnapshot& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& t = s.activation[i];
    nlohmann::json freq = nlohmann::json::object();
    for (std::size_t li = 0; li < t.languages.size(); ++li) {
      std::vector<double> row(t.experts());
      for (std::size_t e = 0; e < row.size(); ++e) row[e] = t.freq(li, e);
      freq[t.languages[li]] = row;
    }
    layers.push_back({{"layer", s.layers[i]},
                      {"entropy", s.entropy[i]},
                      {"jsd", s.jsd[i]},
                      {"mean_jsd", s.mean_jsd(s.layers[i])},
                      {"activation_frequency", freq},
                      {"activation_counts", t.counts},
                      {"tokens", t.tokens},
                      {"top_k", t.k}});
  }
  return {{"step", s.step}, {"log_base", "e"}, {"languages", s.languages}, {"layers", layers}};
}

namespace {
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}
}  // namespace

void write_snapshot_reports(const std::filesystem::path& dir, std::span<const RoutingSnapshot> snapshots) {
  std::filesystem::create_directories(dir);
  std::ostringstream ent, jsd, act;
  ent << "step,layer,language,entropy_nats\n";
  jsd << "step,layer,language_a,language_b,jsd_nats\n";
  act << "step,layer,language,expert,count,tokens,frequency\n";
  nlohmann::json all = nlohmann::json::array();
  for (const auto& s : snapshots) {
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      for (std::size_t a = 0; a < s.languages.size(); ++a) {
        ent << s.step << ',' << s.layers[i] << ',' << s.languages[a] << ',' << num(s.entropy[i][a]) << '\n';
        for (std::size_t b = a + 1; b < s.languages.size(); ++b) {
          jsd << s.step << ',' << s.layers[i] << ',' << s.languages[a] << ',' << s.languages[b] << ','
              << num(s.jsd[i][a][b]) << '\n';
        }
        const auto& t = s.activation[i];
        for (std::size_t e = 0; e < t.experts(); ++e) {
          act << s.step << ',' << s.layers[i] << ',' << s.languages[a] << ',' << e << ',' << t.counts[a][e] << ','
              << t.tokens[a] << ',' << num(t.freq(a, e)) << '\n';
        }
      }
    }
    all.push_back(snapshot_json(s));
  }
  write_text(dir / "entropy.csv", ent.str());
  write_text(dir / "jsd.csv", jsd.str());
  write_text(dir / "activation.csv", act.str());
  write_text(dir / "snapshots.json", all.dump(1) + "\n");
}

void export_records(const std::filesystem::path& path, std::uint64_t step, std::span<const RoutingRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write routing trace " + path.string());
  for (const auto& r : records) {
    for (std::size_t t = 0; t < r.tokens(); ++t) {
      out << step << '\t' << r.layer << '\t' << r.language << '\t' << r.doc << '\t' << t << '\t';
      for (std::size_t j = 0; j < r.k; ++j) out << (j ? "," : "") << r.topk[t * r.k + j];
      out << '\t';
      for (std::size_t e = 0; e < r.experts(); ++e) out << (e ? "," : "") << num(r.probs.at(t, e));
      out << '\n';
    }
  }
  if (!out) throw IoError("short write on " + path.string());
}

std::vector<RoutingRecord> import_records(const std::filesystem::path& path, std::uint64_t* step) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open routing trace " + path.string());
  std::vector<RoutingRecord> out;
  std::vector<double> probs;
  std::size_t experts = 0;
  auto flush = [&]() {
    if (out.empty() || probs.empty()) return;
    RoutingRecord& r = out.back();
    const std::size_t rows = probs.size() / experts;
    r.probs = Tensor({rows, experts}, std::move(probs));
    probs.clear();
  };
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f_step, f_layer, lang, f_doc, f_tok, f_topk, f_probs;
    std::getline(ls, f_step, '\t');
    std::getline(ls, f_layer, '\t');
    std::getline(ls, lang, '\t');
    std::getline(ls, f_doc, '\t');
    std::getline(ls, f_tok, '\t');
    std::getline(ls, f_topk, '\t');
    std::getline(ls, f_probs, '\t');
    if (f_probs.empty()) throw InputError("malformed routing trace line in " + path.string());
    if (step != nullptr) *step = std::stoull(f_step);
    const std::size_t layer = std::stoul(f_layer), doc = std::stoul(f_doc), tok = std::stoul(f_tok);
    std::vector<int> topk;
    {
      std::istringstream ts(f_topk);
      std::string x;
      while (std::getline(ts, x, ',')) topk.push_back(std::stoi(x));
    }
    std::vector<double> row;
    {
      std::istringstream ps(f_probs);
      std::string x;
      while (std::getline(ps, x, ',')) row.push_back(std::stod(x));
    }
    if (tok == 0) {
      flush();
      RoutingRecord r;
      r.language = lang;
      r.layer = layer;
      r.doc = doc;
      r.k = topk.size();
      out.push_back(std::move(r));
      experts = row.size();
    }
    if (out.empty() || row.size() != experts) throw InputError("routing trace rows out of order in " + path.string());
    out.back().topk.insert(out.back().topk.end(), topk.begin(), topk.end());
    probs.insert(probs.end(), row.begin(), row.end());
  }
  flush();
  return out;
}

std::vector<std::uint64_t> snapshot_schedule(std::uint64_t total_steps, double fraction) {
  std::set<std::uint64_t> steps{0, total_steps};
  if (fraction > 0.0 && total_steps > 0) {
    for (int i = 1; static_cast<double>(i) * fraction < 1.0; ++i) {
      steps.insert(static_cast<std::uint64_t>(std::llround(static_cast<double>(i) * fraction * static_cast<double>(total_steps))));
    }
  }
  return {steps.begin(), steps.end()};
}

}  // namespace moelab
