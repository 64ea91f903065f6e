#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"
#include "moelab/telemetry.hpp"

namespace fixture {

inline moelab::ModelConfig tiny_model(int layers = 2, int experts = 8, int vocab = 64, int seq = 16) {
  moelab::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 32;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.seq_len = seq;
  c.n_experts = experts;
  c.top_k = 2;
  c.expert_hidden = 32;
  return c;
}

inline std::vector<std::vector<int>> random_sequences(moelab::Rng rng, std::size_t n, std::size_t min_len, std::size_t max_len,
                                                      int vocab) {
  std::vector<std::vector<int>> out(n);
  for (auto& s : out) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    s.push_back(moelab::kBos);
    for (std::size_t i = 1; i < len; ++i) s.push_back(1 + static_cast<int>(rng.below(static_cast<std::size_t>(vocab - 1))));
  }
  return out;
}

// A random probability vector; with `zeros`, some entries are exactly 0.
inline std::vector<double> random_distribution(moelab::Rng& rng, std::size_t n, bool zeros = false) {
  std::vector<double> q(n);
  double s = 0.0;
  for (auto& v : q) {
    v = zeros && rng.uniform() < 0.3 ? 0.0 : -std::log(1.0 - rng.uniform());
    s += v;
  }
  if (s == 0.0) {
    q[0] = 1.0;
    return q;
  }
  for (auto& v : q) v /= s;
  return q;
}

// A routing record with softmax-normalized random rows and top-k derived from
// them (lowest index wins ties).
inline moelab::RoutingRecord random_record(moelab::Rng& rng, const std::string& lang, std::size_t doc, std::size_t layer,
                                           std::size_t tokens, std::size_t experts, std::size_t k) {
  moelab::RoutingRecord r;
  r.language = lang;
  r.doc = doc;
  r.layer = layer;
  r.k = k;
  r.probs = moelab::Tensor({tokens, experts});
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto q = random_distribution(rng, experts);
    for (std::size_t e = 0; e < experts; ++e) r.probs.at(t, e) = q[e];
  }
  r.topk = moelab::topk_indices(r.probs, k);
  return r;
}

inline moelab::ActivationFrequencyTable random_table(moelab::Rng& rng, std::size_t layer, std::size_t languages,
                                                     std::size_t experts, std::size_t k, std::uint64_t tokens = 200) {
  moelab::ActivationFrequencyTable t;
  t.layer = layer;
  t.k = k;
  for (std::size_t l = 0; l < languages; ++l) {
    t.languages.push_back("hr" + std::to_string(l));
    t.tokens.push_back(tokens);
    std::vector<std::uint64_t> row(experts);
    // Coarse counts so exact frequency ties between languages occur.
    for (auto& c : row) c = rng.below(static_cast<std::size_t>(tokens / 10 + 1)) * 10;
    t.counts.push_back(row);
  }
  return t;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("moelab_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
