#include <doctest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "moelab/error.hpp"
#include "moelab/telemetry.hpp"
#include "oracles.hpp"

using namespace moelab;

TEST_CASE("entropy and JSD closed forms") {
  const std::vector<double> uniform(64, 1.0 / 64.0);
  CHECK(std::abs(router_entropy(uniform) - std::log(64.0)) < 1e-12);
  const std::vector<double> one_hot{0.0, 1.0, 0.0};
  CHECK(router_entropy(one_hot) == 0.0);
  Rng rng(1);
  const auto q = fixture::random_distribution(rng, 10, true);
  CHECK(std::abs(pairwise_jsd(q, q)) < 1e-12);
  const std::vector<double> a{0.5, 0.5, 0.0, 0.0}, b{0.0, 0.0, 0.25, 0.75};
  CHECK(std::abs(pairwise_jsd(a, b) - std::log(2.0)) < 1e-12);
}

TEST_CASE("entropy and JSD against high precision") {
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const std::size_t n = 1 + rng.below(32);
    const auto p = fixture::random_distribution(rng, n, i % 2 == 0);
    const auto q = fixture::random_distribution(rng, n, i % 3 == 0);
    CHECK(std::abs(router_entropy(p) - oracle::entropy(p)) < 1e-10);
    const double j = pairwise_jsd(p, q);
    CHECK(std::abs(j - oracle::jsd(p, q)) < 1e-10);
    CHECK(j == pairwise_jsd(q, p));
    CHECK(j >= 0.0);
    CHECK(j <= std::log(2.0) + 1e-15);
  }
}

TEST_CASE("metric input errors") {
  CHECK_THROWS_AS(router_entropy(std::vector<double>{0.5, 0.4}), InputError);
  CHECK_THROWS_AS(router_entropy(std::vector<double>{}), InputError);
  CHECK_THROWS_AS(router_entropy(std::vector<double>{1.5, -0.5}), InputError);
  CHECK_THROWS_AS(pairwise_jsd(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), InputError);
  CHECK_THROWS_AS(spearman_rho(std::vector<double>{1.0}, std::vector<double>{2.0}), InputError);
  CHECK_THROWS_AS(spearman_rho(std::vector<double>{1.0, 2.0}, std::vector<double>{2.0}), InputError);
}

TEST_CASE("spearman examples and oracle") {
  CHECK(*spearman_rho(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(*spearman_rho(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK_FALSE(spearman_rho(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}).has_value());
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const std::size_t n = 2 + rng.below(12);
    std::vector<double> x(n), y(n);
    for (std::size_t j = 0; j < n; ++j) {
      x[j] = static_cast<double>(rng.below(5));
      y[j] = rng.uniform() < 0.5 ? static_cast<double>(rng.below(4)) : rng.normal();
    }
    const auto got = spearman_rho(x, y);
    const auto want = oracle::spearman(x, y);
    REQUIRE(got.has_value() == want.has_value());
    if (got) CHECK(std::abs(*got - *want) < 1e-10);
  }
}

TEST_CASE("usage distributions and activation frequencies against brute force") {
  Rng rng(4);
  std::vector<RoutingRecord> records;
  const std::vector<std::string> langs{"a", "b", "c"};
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t d = 0; d < 5; ++d) {
      for (std::size_t layer = 0; layer < 2; ++layer) {
        records.push_back(fixture::random_record(rng, langs[l], d, layer, 1 + rng.below(20), 6, 2));
      }
    }
  }
  std::vector<std::vector<double>> docs_a;
  std::vector<ExpertUsageDistribution> usage_a;
  for (const auto& r : records) {
    const auto u = doc_usage(r);
    const auto want = oracle::doc_usage(r);
    for (std::size_t e = 0; e < 6; ++e) CHECK(std::abs(u.q[e] - want[e]) < 1e-12);
    if (r.language == "a" && r.layer == 1) {
      docs_a.push_back(u.q);
      usage_a.push_back(u);
    }
  }
  const auto lu = lang_usage(usage_a);
  const auto lw = oracle::lang_usage(docs_a);
  CHECK(lu.owner == "a");
  CHECK(lu.support == 5);
  for (std::size_t e = 0; e < 6; ++e) CHECK(std::abs(lu.q[e] - lw[e]) < 1e-12);

  const auto table = activation_frequencies(records, 1, langs);
  const auto want = oracle::activation(records, 1, langs, 6);
  for (std::size_t l = 0; l < 3; ++l) {
    double total = 0.0;
    for (std::size_t e = 0; e < 6; ++e) {
      CHECK(table.freq(l, e) == want[l][e]);
      total += table.freq(l, e);
    }
    CHECK(total == doctest::Approx(2.0));
  }
  const std::vector<std::string> missing{"a", "zz"};
  CHECK_THROWS_AS(activation_frequencies(records, 1, missing), InputError);
}

TEST_CASE("snapshot of two identical languages has zero JSD between them") {
  const ModelConfig c = fixture::tiny_model();
  const MoeLm model = MoeLm::initialize(c, Rng(1));
  const auto docs = fixture::random_sequences(Rng(2), 6, 5, 12, c.vocab_size);
  const auto other = fixture::random_sequences(Rng(3), 6, 5, 12, c.vocab_size);
  const std::vector<LanguageDocs> corpus{{"x", docs}, {"y", docs}, {"z", other}};
  const RoutingSnapshot s = snapshot(model, corpus, {}, 0);
  REQUIRE(s.layers == std::vector<std::size_t>{0, 1});
  for (std::size_t li = 0; li < 2; ++li) {
    CHECK(s.jsd[li][0][1] == 0.0);
    CHECK(s.jsd[li][0][2] > 0.0);
    CHECK(s.entropy[li][0] == s.entropy[li][1]);
  }
}

TEST_CASE("snapshot does not depend on document packing") {
  const ModelConfig c = fixture::tiny_model();
  const MoeLm model = MoeLm::initialize(c, Rng(1));
  const std::vector<LanguageDocs> corpus{{"x", fixture::random_sequences(Rng(5), 9, 4, 14, c.vocab_size)},
                                         {"y", fixture::random_sequences(Rng(6), 7, 4, 14, c.vocab_size)}};
  const auto a = collect_records(model, corpus, 1);
  const auto b = collect_records(model, corpus, 16);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].topk == b[i].topk);
    for (std::size_t j = 0; j < a[i].probs.size(); ++j) CHECK(a[i].probs[j] == doctest::Approx(b[i].probs[j]).epsilon(1e-12));
  }
}

TEST_CASE("snapshot rejects out-of-vocabulary corpora") {
  const ModelConfig c = fixture::tiny_model();
  const MoeLm model = MoeLm::initialize(c, Rng(1));
  const std::vector<LanguageDocs> corpus{{"x", {{0, 1, c.vocab_size + 3}}}};
  CHECK_THROWS_AS(snapshot(model, corpus, {}, 0), ConfigError);
}

TEST_CASE("routing traces round trip") {
  Rng rng(7);
  std::vector<RoutingRecord> records;
  for (std::size_t d = 0; d < 3; ++d) records.push_back(fixture::random_record(rng, "hr0", d, 1, 4, 5, 2));
  fixture::TempDir dir("trace");
  export_records(dir.path() / "t.tsv", 42, records);
  std::uint64_t step = 0;
  const auto back = import_records(dir.path() / "t.tsv", &step);
  CHECK(step == 42);
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].language == records[i].language);
    CHECK(back[i].topk == records[i].topk);
    CHECK(back[i].probs == records[i].probs);
  }
}

TEST_CASE("snapshot schedule") {
  CHECK(snapshot_schedule(100, 0.1) == std::vector<std::uint64_t>{0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100});
  CHECK(snapshot_schedule(0, 0.1) == std::vector<std::uint64_t>{0});
  const auto s = snapshot_schedule(7, 0.5);
  CHECK(s.front() == 0);
  CHECK(s.back() == 7);
}
