#pragma once
// Independent reference implementations used by the unit tests and the
// acceptance runner. Deliberately naive: high precision, brute force.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "moelab/model.hpp"
#include "moelab/rng.hpp"
#include "moelab/selection.hpp"
#include "moelab/telemetry.hpp"

namespace oracle {

using hp = boost::multiprecision::cpp_bin_float_50;

inline double entropy(const std::vector<double>& q) {
  hp h = 0;
  for (double v : q) {
    if (v > 0) h -= hp(v) * log(hp(v));
  }
  return static_cast<double>(h);
}

inline double jsd(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<hp> m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = (hp(a[i]) + hp(b[i])) / 2;
  hp s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 0) s += hp(a[i]) * log(hp(a[i]) / m[i]);
    if (b[i] > 0) s += hp(b[i]) * log(hp(b[i]) / m[i]);
  }
  return static_cast<double>(s / 2);
}

// Average ranks by counting: rank = #less + (#equal + 1) / 2.
inline std::vector<hp> ranks(const std::vector<double>& x) {
  std::vector<hp> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double y : x) {
      less += y < x[i];
      equal += y == x[i];
    }
    r[i] = hp(less) + (hp(equal) + 1) / 2;
  }
  return r;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const hp n = hp(x.size());
  hp mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  hp sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return static_cast<double>(sxy / sqrt(sxx * syy));
}

inline std::vector<double> doc_usage(const moelab::RoutingRecord& r) {
  std::vector<double> q(r.experts());
  for (std::size_t e = 0; e < r.experts(); ++e) {
    hp s = 0;
    for (std::size_t t = 0; t < r.tokens(); ++t) s += hp(r.probs.at(t, e));
    q[e] = static_cast<double>(s / hp(r.tokens()));
  }
  return q;
}

inline std::vector<double> lang_usage(const std::vector<std::vector<double>>& docs) {
  std::vector<double> q(docs.front().size());
  for (std::size_t e = 0; e < q.size(); ++e) {
    hp s = 0;
    for (const auto& d : docs) s += hp(d[e]);
    q[e] = static_cast<double>(s / hp(docs.size()));
  }
  return q;
}

// freq[language][expert] by scanning every token of every record.
inline std::vector<std::vector<double>> activation(const std::vector<moelab::RoutingRecord>& records, std::size_t layer,
                                                   const std::vector<std::string>& languages, std::size_t experts) {
  std::vector<std::vector<double>> f(languages.size(), std::vector<double>(experts, 0.0));
  for (std::size_t li = 0; li < languages.size(); ++li) {
    std::uint64_t tokens = 0;
    std::vector<std::uint64_t> hits(experts, 0);
    for (const auto& r : records) {
      if (r.layer != layer || r.language != languages[li]) continue;
      for (std::size_t t = 0; t < r.tokens(); ++t) {
        ++tokens;
        for (std::size_t e = 0; e < experts; ++e) {
          bool in = false;
          for (std::size_t s = 0; s < r.k; ++s) in = in || r.topk[t * r.k + s] == static_cast<int>(e);
          hits[e] += in;
        }
      }
    }
    for (std::size_t e = 0; e < experts; ++e) f[li][e] = static_cast<double>(hits[e]) / static_cast<double>(tokens);
  }
  return f;
}

struct Gap {
  std::size_t layer, expert;
  std::string dominant;
  double gap;
};

// For each expert: the best language (first listed wins ties) and the gap to
// the best of the rest.
inline std::vector<Gap> gaps(const moelab::ActivationFrequencyTable& t) {
  std::vector<Gap> out;
  for (std::size_t e = 0; e < t.experts(); ++e) {
    std::size_t best = 0;
    for (std::size_t l = 0; l < t.languages.size(); ++l) {
      if (t.freq(l, e) > t.freq(best, e)) best = l;
    }
    double second = -1.0;
    for (std::size_t l = 0; l < t.languages.size(); ++l) {
      if (l != best) second = std::max(second, t.freq(l, e));
    }
    out.push_back({t.layer, e, t.languages[best], t.freq(best, e) - second});
  }
  return out;
}

inline std::map<std::size_t, std::set<std::size_t>> seft(const std::vector<moelab::ActivationFrequencyTable>& tables,
                                                        const std::string& anchor, double alpha,
                                                        const std::vector<std::size_t>& layers) {
  std::map<std::size_t, std::set<std::size_t>> out;
  for (const auto& t : tables) {
    if (std::find(layers.begin(), layers.end(), t.layer) == layers.end()) continue;
    for (const auto& g : gaps(t)) {
      if (g.dominant == anchor && g.gap > alpha) out[g.layer].insert(g.expert);
    }
  }
  return out;
}

// Every expert ranked by (mean frequency desc, id asc) via pairwise counting.
inline std::map<std::size_t, std::set<std::size_t>> shared(const std::vector<moelab::ActivationFrequencyTable>& tables,
                                                          std::size_t k, const std::vector<std::size_t>& layers) {
  std::map<std::size_t, std::set<std::size_t>> out;
  for (const auto& t : tables) {
    if (std::find(layers.begin(), layers.end(), t.layer) == layers.end()) continue;
    std::vector<hp> mean(t.experts(), 0);
    for (std::size_t e = 0; e < t.experts(); ++e) {
      for (std::size_t l = 0; l < t.languages.size(); ++l) mean[e] += hp(t.counts[l][e]) / hp(t.tokens[l]);
      mean[e] /= hp(t.languages.size());
    }
    // Distinct means of count/tokens ratios differ by far more than 1e-30.
    const hp tie("1e-30");
    for (std::size_t e = 0; e < t.experts(); ++e) {
      std::size_t ahead = 0;
      for (std::size_t o = 0; o < t.experts(); ++o) {
        const hp d = mean[o] - mean[e];
        ahead += d > tie || (abs(d) <= tie && o < e);
      }
      if (ahead < k) out[t.layer].insert(e);
    }
  }
  return out;
}

// Trainable elements of a plan counted from the parameter names of a
// checkpoint: selected experts' three matrices plus the router of each layer
// holding one.
inline std::size_t plan_elements(const moelab::ExpertSelectionPlan& plan, const moelab::ParameterSet& params) {
  if (plan.whole_model) return params.total_elements();
  std::size_t n = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    for (const auto& [layer, experts] : plan.experts) {
      if (experts.empty()) continue;
      if (name == moelab::pname::router(layer)) n += params.value(i).size();
      for (const auto& se : experts) {
        if (name.rfind(moelab::pname::expert_prefix(layer, se.expert), 0) == 0) {
          n += params.value(i).size();
        }
      }
    }
  }
  return n;
}

}  // namespace oracle
