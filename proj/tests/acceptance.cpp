// Acceptance runner: evaluates every acceptance criterion and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.
//
//   acceptance [--preset NAME] [--run-dir DIR] [--only 1,2,...]
//
// Criteria 6-9 run the experiment pipeline for the preset into the run
// directory. A directory left by the same library build with the same
// configuration is resumed; anything else is wiped first.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fixtures.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/optim.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/trainer.hpp"
#include "oracles.hpp"

using namespace moelab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.vocab_size = 32;
  c.seq_len = 12;
  c.n_experts = 8;
  c.top_k = 2;
  c.expert_hidden = 32;
  MoeLm model = MoeLm::initialize(c, Rng(2024));
  // Scale up the routers so the top-k choice is not near a tie and routing
  // carries real signal into the gradient.
  for (std::size_t l = 0; l < 2; ++l) {
    for (double& v : model.params().value(model.params().index(pname::router(l))).values()) v *= 10.0;
  }
  const auto seqs = fixture::random_sequences(Rng(7), 2, 10, 12, c.vocab_size);
  std::vector<bool> all(model.params().size(), true);
  Gradients grads = make_gradients(model.params(), all);
  model.loss(seqs, &grads);
  std::vector<Tensor*> ptrs;
  for (auto& t : model.params().tensors()) ptrs.push_back(&t);
  // Central differences at h = 1e-5 carry roundoff of about eps * |f| / h
  // (~1e-10 here), so entries with |g| below the 1e-5 floor are held to an
  // absolute error of 1e-9 rather than divided by their own magnitude.
  const double floor = 1e-5;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = finite_difference_check([&]() { return model.loss(seqs).loss.total; }, ptrs, grads, 1e-5, floor);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t small = 0;
  for (const auto& g : grads) {
    for (double v : g.values()) small += std::abs(v) < floor;
  }
  const bool pass = r.max_rel_error < 1e-4 && secs < 120.0;
  return {pass, "max relative error " + fmt("%.3e", r.max_rel_error) + " over " + std::to_string(r.checked) +
                    " entries (worst in " + model.params().name(r.worst_tensor) + "; " + std::to_string(small) +
                    " entries under the 1e-5 floor), max abs error " + fmt("%.3e", r.max_abs_error) + ", " +
                    fmt("%.1f", secs) + " s"};
}

Outcome metric_oracles() {
  Rng rng(77);
  const int cases = 1000;
  double worst_entropy = 0, worst_jsd = 0, worst_rho = 0, worst_doc = 0, worst_lang = 0, worst_act = 0;
  bool rho_defined_agree = true;
  for (int i = 0; i < cases; ++i) {
    const std::size_t n = 1 + rng.below(64);
    const auto p = fixture::random_distribution(rng, n, i % 2 == 0);
    const auto q = fixture::random_distribution(rng, n, i % 3 == 0);
    worst_entropy = std::max(worst_entropy, std::abs(router_entropy(p) - oracle::entropy(p)));
    worst_jsd = std::max(worst_jsd, std::abs(pairwise_jsd(p, q) - oracle::jsd(p, q)));

    const std::size_t m = 2 + rng.below(15);
    std::vector<double> x(m), y(m);
    for (std::size_t j = 0; j < m; ++j) {
      x[j] = i % 4 == 0 ? static_cast<double>(rng.below(4)) : rng.normal();
      y[j] = i % 5 == 0 ? static_cast<double>(rng.below(3)) : rng.normal();
    }
    const auto got = spearman_rho(x, y);
    const auto want = oracle::spearman(x, y);
    rho_defined_agree = rho_defined_agree && got.has_value() == want.has_value();
    if (got && want) worst_rho = std::max(worst_rho, std::abs(*got - *want));

    const std::size_t experts = 2 + rng.below(15), k = 1 + rng.below(std::min<std::size_t>(experts, 3));
    std::vector<RoutingRecord> records;
    const std::vector<std::string> langs{"a", "b"};
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t d = 0; d < 1 + rng.below(4); ++d) {
        records.push_back(fixture::random_record(rng, langs[l], d, 0, 1 + rng.below(12), experts, k));
      }
    }
    std::vector<ExpertUsageDistribution> usage;
    std::vector<std::vector<double>> raw;
    for (const auto& r : records) {
      const auto u = doc_usage(r);
      const auto w = oracle::doc_usage(r);
      for (std::size_t e = 0; e < experts; ++e) worst_doc = std::max(worst_doc, std::abs(u.q[e] - w[e]));
      if (r.language == "a") {
        usage.push_back(u);
        raw.push_back(w);
      }
    }
    const auto lu = lang_usage(usage);
    const auto lw = oracle::lang_usage(raw);
    for (std::size_t e = 0; e < experts; ++e) worst_lang = std::max(worst_lang, std::abs(lu.q[e] - lw[e]));
    const auto table = activation_frequencies(records, 0, langs);
    const auto aw = oracle::activation(records, 0, langs, experts);
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t e = 0; e < experts; ++e) worst_act = std::max(worst_act, std::abs(table.freq(l, e) - aw[l][e]));
    }
  }
  const std::vector<double> uniform(64, 1.0 / 64.0);
  const double a_uniform = std::abs(router_entropy(uniform) - std::log(64.0));
  Rng r2(5);
  const auto d = fixture::random_distribution(r2, 16, true);
  const double a_same = std::abs(pairwise_jsd(d, d));
  const std::vector<double> left{0.3, 0.7, 0.0, 0.0}, right{0.0, 0.0, 0.9, 0.1};
  const double a_disjoint = std::abs(pairwise_jsd(left, right) - std::log(2.0));

  const double worst = std::max({worst_entropy, worst_jsd, worst_rho, worst_doc, worst_lang, worst_act});
  const bool pass = worst < 1e-10 && rho_defined_agree && a_uniform < 1e-12 && a_same < 1e-12 && a_disjoint < 1e-12;
  return {pass, std::to_string(cases) + " cases per metric; max |err| entropy " + fmt("%.1e", worst_entropy) + ", jsd " +
                    fmt("%.1e", worst_jsd) + ", spearman " + fmt("%.1e", worst_rho) + ", doc_usage " + fmt("%.1e", worst_doc) +
                    ", lang_usage " + fmt("%.1e", worst_lang) + ", activation " + fmt("%.1e", worst_act) +
                    "; anchors ln64 " + fmt("%.1e", a_uniform) + ", identical " + fmt("%.1e", a_same) + ", disjoint " +
                    fmt("%.1e", a_disjoint)};
}

Outcome aux_anchors() {
  MoeLayerTrace tr;
  tr.k = 2;
  const std::size_t e = 8, n = 64;
  tr.probs = Tensor({n, e}, 1.0 / static_cast<double>(e));
  for (std::size_t t = 0; t < n; ++t) {
    tr.topk.push_back(static_cast<int>((2 * t) % e));
    tr.topk.push_back(static_cast<int>((2 * t + 1) % e));
  }
  const double lb = load_balance_loss(tr);
  Tape tape;
  const double z = router_z_loss(tape.constant(Tensor({10, 4}, 0.0))).value().item();
  const double want_z = std::pow(std::log(4.0), 2);
  const bool pass = std::abs(lb - 1.0) <= 1e-9 && std::abs(z - want_z) <= 1e-9;
  return {pass, "load balance " + fmt("%.15f", lb) + ", z-loss " + fmt("%.15f", z) + " vs (ln 4)^2 " + fmt("%.15f", want_z)};
}

Outcome frozen_exactness() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 32;
  c.n_heads = 2;
  c.vocab_size = 64;
  c.seq_len = 16;
  c.n_experts = 16;
  c.top_k = 2;
  c.expert_hidden = 32;
  const Checkpoint base = make_checkpoint(MoeLm::initialize(c, Rng(3)));
  const MoeLm model(base.config, base.params);
  std::vector<LanguageDocs> langs;
  for (int l = 0; l < 3; ++l) {
    langs.push_back({"hr" + std::to_string(l), fixture::random_sequences(Rng(10 + l), 20, 8, 16, c.vocab_size)});
  }
  const RoutingSnapshot snap = snapshot(model, langs, {}, 0);
  SelectionInputs in;
  in.target = "lr0";
  in.anchor = "hr1";
  in.alpha = 0.0;
  in.k_shared = 3;
  in.tables = snap.activation;
  in.base_seft = assemble_plan(Strategy::SEFT, in, c);
  in.seed = 4;
  const std::vector<LanguageDocs> target{{"lr0", fixture::random_sequences(Rng(99), 40, 8, 16, c.vocab_size)}};
  RunConfig rc;
  rc.optim.lr = 1e-3;
  rc.batch_size = 2;
  rc.token_budget = 101 * 2 * 15;
  rc.seed = 1;

  bool pass = true;
  std::string detail;
  for (Strategy s : {Strategy::SEFT, Strategy::SSFT, Strategy::RANDOM_SEFT, Strategy::SEFT_TOP20, Strategy::AEFT}) {
    const ExpertSelectionPlan plan = assemble_plan(s, in, c);
    const TrainableMask mask = build_mask(plan, base);
    const TrainResult res = adapt(base, mask, target, rc);
    std::size_t frozen_ok = 0, frozen = 0, moved = 0, trainable = 0;
    for (std::size_t i = 0; i < base.params.size(); ++i) {
      const bool same = bit_equal(base.params.value(i), res.checkpoint.params.value(i));
      if (mask.trainable[i]) {
        ++trainable;
        moved += !same;
      } else {
        ++frozen;
        frozen_ok += same;
      }
    }
    const std::size_t oracle_count = oracle::plan_elements(plan, base.params);
    const bool ok = res.steps >= 100 && frozen_ok == frozen && moved == trainable && trainable > 0 &&
                    mask.trainable_elements == oracle_count && plan.trainable_params == oracle_count;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + to_string(s) + " " + std::to_string(res.steps) + " steps, frozen " +
              std::to_string(frozen_ok) + "/" + std::to_string(frozen) + " identical, params " +
              std::to_string(mask.trainable_elements) + "=" + std::to_string(oracle_count);
  }
  return {pass, detail};
}

Outcome selection_fidelity() {
  Rng rng(55);
  std::size_t mismatches = 0, cases = 0;
  for (int trial = 0; trial < 1000; ++trial, ++cases) {
    const std::size_t e = 4 + rng.below(29), langs = 2 + rng.below(6), layers = 1 + rng.below(4);
    std::vector<ActivationFrequencyTable> tables;
    for (std::size_t l = 0; l < layers; ++l) tables.push_back(fixture::random_table(rng, l, langs, e, 2));
    for (const auto& t : tables) {
      const auto got = compute_gaps(t);
      const auto want = oracle::gaps(t);
      for (std::size_t i = 0; i < got.size(); ++i) {
        mismatches += got[i].dominant != want[i].dominant || got[i].gap != want[i].gap || got[i].expert != want[i].expert;
      }
    }
    std::vector<std::size_t> sel{layers - 1};
    if (layers > 1 && rng.uniform() < 0.5) sel.insert(sel.begin(), layers - 2);
    const std::string anchor = "hr" + std::to_string(rng.below(langs));
    const double alpha = rng.uniform() * 0.3;
    const auto plan = select_seft(compute_gaps(tables), anchor, alpha, sel, e);
    std::map<std::size_t, std::set<std::size_t>> got;
    for (const auto& [l, v] : plan.experts) {
      for (const auto& s : v) got[l].insert(s.expert);
    }
    mismatches += got != oracle::seft(tables, anchor, alpha, sel);
    const std::size_t k = rng.below(e + 1);
    const auto shared = select_shared(tables, k, sel);
    const auto want = oracle::shared(tables, k, sel);
    for (std::size_t l : sel) {
      const std::set<std::size_t> s(shared.at(l).begin(), shared.at(l).end());
      mismatches += s != (want.count(l) ? want.at(l) : std::set<std::size_t>{});
    }
  }

  std::size_t monotone_violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ActivationFrequencyTable> tables{fixture::random_table(rng, 0, 5, 16, 2), fixture::random_table(rng, 1, 5, 16, 2)};
    const auto gaps = compute_gaps(tables);
    std::map<std::size_t, std::set<std::size_t>> prev;
    for (int a = 0; a <= 100; ++a) {
      const auto plan = select_seft(gaps, "hr0", a / 100.0, {0, 1}, 16);
      std::map<std::size_t, std::set<std::size_t>> cur;
      for (const auto& [l, v] : plan.experts) {
        for (const auto& s : v) cur[l].insert(s.expert);
      }
      if (a > 0) {
        for (const auto& [l, s] : cur) {
          for (std::size_t x : s) monotone_violations += prev[l].count(x) == 0;
        }
      }
      prev = cur;
    }
  }

  ModelConfig c;
  std::size_t byte_diffs = 0;
  for (int trial = 0; trial < 100; ++trial) {
    SelectionInputs in;
    in.target = "lr0";
    in.anchor = "hr" + std::to_string(rng.below(5));
    in.alpha = rng.uniform() * 0.1;
    in.k_shared = 0;
    for (std::size_t l = 0; l < 4; ++l) in.tables.push_back(fixture::random_table(rng, l, 5, 16, 2));
    byte_diffs += serialize_plan(assemble_plan(Strategy::SSFT, in, c)) != serialize_plan(assemble_plan(Strategy::SEFT, in, c));
  }
  const bool pass = mismatches == 0 && monotone_violations == 0 && byte_diffs == 0;
  return {pass, std::to_string(cases) + " random tables: " + std::to_string(mismatches) + " oracle mismatches; " +
                    "alpha monotonicity on 100 tables: " + std::to_string(monotone_violations) + " violations; " +
                    "SSFT(k=0) vs SEFT: " + std::to_string(byte_diffs) + "/100 byte differences"};
}

// ---------------------------------------------------------------------------
// Experiment-backed criteria

struct Experiment {
  Pipeline pipeline;
  double seconds = 0.0;
};

// The experiment depends only on the library, so the acceptance runner itself
// can change without invalidating a finished run.
std::string library_fingerprint() {
  const std::string bytes = slurp(MOELAB_LIBRARY);
  return std::to_string(std::hash<std::string>{}(bytes)) + ":" + std::to_string(bytes.size());
}

Experiment run_experiment(const std::string& preset, const fs::path& root) {
  PipelineConfig cfg = resolve_config(preset);
  const std::string stamp = library_fingerprint() + "\n" + pipeline_to_json(cfg).dump() + "\n";
  const fs::path stamp_file = root / "acceptance.stamp";
  if (fs::exists(root) && (!fs::exists(stamp_file) || slurp(stamp_file) != stamp)) {
    std::cout << "[acceptance] discarding stale run directory " << root << std::endl;
    fs::remove_all(root);
  }
  fs::create_directories(root);
  {
    std::ofstream(stamp_file, std::ios::binary) << stamp;
  }
  Experiment ex{Pipeline{cfg, RunDir{root}, true, &std::cout}};
  const auto t0 = std::chrono::steady_clock::now();
  {
    RunLock lock(root);
    cmd_repro(ex.pipeline);
  }
  ex.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return ex;
}

Outcome jsd_overlap(const Experiment& ex) {
  std::vector<double> rhos;
  std::string detail;
  for (std::uint64_t s : ex.pipeline.config.pretrain_seeds) {
    const json a = read_json(ex.pipeline.dir.analysis(s) / "analysis.json");
    const json& rho = a.at("spearman_final");
    const double v = rho.is_null() ? std::nan("") : rho.get<double>();
    rhos.push_back(v);
    detail += (detail.empty() ? "" : ", ") + ("seed " + std::to_string(s) + " rho " + fmt("%.3f", v));
  }
  const double med = median(rhos);
  return {rhos.size() >= 3 && med <= -0.3, "final-layer JSD vs overlap Spearman, median " + fmt("%.3f", med) + " (" + detail + ")"};
}

Outcome layer_trend(const Experiment& ex) {
  std::vector<double> first, last;
  std::string detail;
  for (std::uint64_t s : ex.pipeline.config.pretrain_seeds) {
    const json a = read_json(ex.pipeline.dir.analysis(s) / "analysis.json");
    first.push_back(a.at("mean_jsd_first").get<double>());
    last.push_back(a.at("mean_jsd_final").get<double>());
    detail += (detail.empty() ? "" : ", ") + ("seed " + std::to_string(s) + " " + fmt("%.4f", first.back()) + " -> " +
                                              fmt("%.4f", last.back()));
  }
  const double mf = median(first), ml = median(last);
  return {first.size() >= 3 && ml > mf,
          "median mean pairwise JSD first layer " + fmt("%.4f", mf) + ", final layer " + fmt("%.4f", ml) + " (" + detail + ")"};
}

Outcome strategy_ordering(const Experiment& ex) {
  const json summary = load_summary(ex.pipeline.dir);
  std::map<std::string, std::map<std::string, double>> med;
  std::map<std::string, std::size_t> seeds;
  for (const auto& row : summary.at("rows")) {
    med[row.at("target").get<std::string>()][row.at("strategy").get<std::string>()] = row.at("median_test_ppl").get<double>();
    if (row.contains("test_ppl")) seeds[row.at("target").get<std::string>()] = row.at("test_ppl").size();
  }
  bool pass = med.size() == 3;
  std::string detail;
  for (const auto& [target, m] : med) {
    const double seft = m.at("SEFT"), rnd = m.at("RANDOM_SEFT"), ssft = m.at("SSFT");
    const bool ok = seft <= rnd && ssft <= seft && seeds[target] >= 5;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + target + ": SSFT " + fmt("%.3f", ssft) + " SEFT " + fmt("%.3f", seft) +
              " RANDOM_SEFT " + fmt("%.3f", rnd) + (ok ? "" : " (violated)");
  }
  return {pass, "median test perplexity over " + std::to_string(seeds.empty() ? 0 : seeds.begin()->second) + " seeds; " + detail};
}

Outcome forgetting_asymmetry(const Experiment& ex) {
  const json summary = load_summary(ex.pipeline.dir);
  if (summary.at("forgetting").is_null()) return {false, "no forgetting results"};
  const double full = summary.at("forgetting").at("FULL_FT").at("median_mean_delta").get<double>();
  const double seft = summary.at("forgetting").at("SEFT").at("median_mean_delta").get<double>();
  std::size_t flagged_full = 0, flagged_seft = 0, runs = 0;
  const auto& c = ex.pipeline.config;
  for (const auto& target : ex.pipeline.manifest().ids_with_role("target")) {
    for (std::uint64_t s : c.forgetting.seeds) {
      ++runs;
      for (Strategy st : {Strategy::FULL_FT, Strategy::SEFT}) {
        const EvalReport r = eval_report_from_json(read_json(ex.pipeline.dir.forgetting_dir(target, st, s) / "forgetting.json"));
        for (const auto& e : r.entries) (st == Strategy::FULL_FT ? flagged_full : flagged_seft) += e.flagged;
      }
    }
  }
  return {c.forgetting.seeds.size() >= 3 && full >= seft,
          "median anchor perplexity change FULL_FT " + fmt("%+.4f", full) + " vs SEFT " + fmt("%+.4f", seft) + " over " +
              std::to_string(runs) + " (target, seed) runs; bootstrap-flagged anchors FULL_FT " + std::to_string(flagged_full) +
              ", SEFT " + std::to_string(flagged_seft)};
}

Outcome reproducibility() {
  fixture::TempDir a("accept_repro_a"), b("accept_repro_b");
  const PipelineConfig cfg = resolve_config("tiny");
  cmd_repro(Pipeline{cfg, RunDir{a.path()}, true, nullptr});
  cmd_repro(Pipeline{cfg, RunDir{b.path()}, true, nullptr});
  std::size_t compared = 0, differing = 0, checkpoints = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path());
    const bool table = rel.parent_path() == "eval";
    const bool ckpt = rel.extension() == ".ckpt";
    if (!table && !ckpt) continue;
    ++compared;
    checkpoints += ckpt;
    differing += !fs::exists(b.path() / rel) || slurp(e.path()) != slurp(b.path() / rel);
  }
  return {compared > 0 && checkpoints > 0 && differing == 0,
          "tiny preset twice: " + std::to_string(compared) + " summary tables and checkpoints compared (" +
              std::to_string(checkpoints) + " checkpoints), " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::string preset = "paper-desk";
  std::string run_dir;
  std::vector<int> only;
  app.add_option("--preset", preset, "pipeline preset for the experiment-backed criteria");
  app.add_option("--run-dir", run_dir, "run directory for the experiment (default ./acceptance_runs/<preset>)");
  app.add_option("--only", only, "subset of criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  if (run_dir.empty()) run_dir = (fs::path("acceptance_runs") / preset).string();
  auto want = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  std::map<int, Outcome> results;
  auto run = [&](int n, const std::function<Outcome()>& fn) {
    if (!want(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      results[n] = fn();
    } catch (const std::exception& e) {
      results[n] = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    results[n].detail += " [" + fmt("%.1f", secs) + " s]";
    std::cout << "criterion " << n << ": " << (results[n].pass ? "PASS" : "FAIL") << " - " << results[n].detail << std::endl;
  };

  run(1, gradient_check);
  run(2, metric_oracles);
  run(3, aux_anchors);
  run(4, frozen_exactness);
  run(5, selection_fidelity);
  if (want(6) || want(7) || want(8) || want(9)) {
    std::optional<Experiment> ex;
    std::string error;
    try {
      ex = run_experiment(preset, run_dir);
      std::cout << "[acceptance] " << preset << " pipeline finished in " << fmt("%.0f", ex->seconds) << " s" << std::endl;
    } catch (const std::exception& e) {
      error = e.what();
    }
    const std::vector<std::pair<int, std::function<Outcome(const Experiment&)>>> backed{
        {6, jsd_overlap}, {7, layer_trend}, {8, strategy_ordering}, {9, forgetting_asymmetry}};
    for (const auto& [n, fn] : backed) {
      run(n, [&, f = fn]() -> Outcome {
        if (!ex) return {false, "pipeline failed: " + error};
        return f(*ex);
      });
    }
  }
  run(10, reproducibility);

  std::cout << "\nsummary\n";
  bool all = true;
  for (const auto& [n, r] : results) {
    std::cout << "criterion " << n << ": " << (r.pass ? "PASS" : "FAIL") << '\n';
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
