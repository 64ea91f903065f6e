#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Relative path -> contents for every regular file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

Pipeline tiny_pipeline(const fs::path& root) {
  return Pipeline{resolve_config("tiny"), RunDir{root}, true, nullptr};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MOELAB_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("presets resolve and validate") {
  for (const auto& name : preset_names()) {
    const PipelineConfig c = resolve_config(name);
    CHECK(c.name == name);
    CHECK(pipeline_from_json(pipeline_to_json(c)).name == name);
    CHECK(pipeline_to_json(pipeline_from_json(pipeline_to_json(c))) == pipeline_to_json(c));
  }
  const PipelineConfig desk = resolve_config("paper-desk");
  CHECK(desk.model.n_layers == 4);
  CHECK(desk.model.n_experts == 16);
  CHECK(desk.model.top_k == 2);
  CHECK(desk.corpus.pretrain_ids.size() == 5);
  CHECK(desk.corpus.targets.size() == 3);
  CHECK_THROWS_AS(resolve_config("no-such-preset"), ConfigError);
}

TEST_CASE("config files patch a preset") {
  fixture::TempDir dir("cfg");
  const fs::path file = dir.path() / "c.json";
  std::ofstream(file) << R"({"preset": "tiny", "name": "patched", "alpha": 0.05, "model": {"n_experts": 4}})";
  const PipelineConfig c = resolve_config(file.string());
  CHECK(c.name == "patched");
  CHECK(c.alpha == 0.05);
  CHECK(c.model.n_experts == 4);
  CHECK(c.model.d_model == 32);

  std::ofstream(file) << R"({"preset": "tiny", "k_shared": 99})";
  CHECK_THROWS_AS(resolve_config(file.string()), ConfigError);
  std::ofstream(file) << R"({"preset": "tiny", "model": {"vocab_size": 256}})";
  CHECK_THROWS_AS(resolve_config(file.string()), ConfigError);
  std::ofstream(file) << R"({"preset": "tiny", "name": "../escape"})";
  CHECK_THROWS_AS(resolve_config(file.string()), ConfigError);
  std::ofstream(file) << "{not json";
  CHECK_THROWS_AS(resolve_config(file.string()), ConfigError);
}

TEST_CASE("overrides are validated") {
  PipelineConfig c = resolve_config("tiny");
  CliOverrides o;
  o.layers = std::vector<std::size_t>{7};
  CHECK_THROWS_AS(apply_overrides(c, o), ConfigError);
  c = resolve_config("tiny");
  o = {};
  o.strategy = "ssft";
  o.alpha = 0.02;
  o.seed = 9;
  apply_overrides(c, o);
  CHECK(c.strategies == std::vector<Strategy>{Strategy::SSFT});
  CHECK(c.pretrain_seeds == std::vector<std::uint64_t>{9});
  CHECK(c.alpha == 0.02);
}

TEST_CASE("run lock rejects a second holder") {
  fixture::TempDir dir("lock");
  {
    RunLock a(dir.path());
    CHECK_THROWS_AS(RunLock(dir.path()), Error);
  }
  CHECK_NOTHROW(RunLock(dir.path()));
}

TEST_CASE("stages check their prerequisites before writing") {
  fixture::TempDir dir("prereq");
  const Pipeline p = tiny_pipeline(dir.path());
  CHECK_THROWS_AS(cmd_pretrain(p, 0), ConfigError);
  CHECK_THROWS_AS(cmd_select(p, all_strategies()), ConfigError);
  CHECK(fs::is_empty(dir.path()));
}

TEST_CASE("tiny repro is reproducible and resumable") {
  fixture::TempDir a("repro_a"), b("repro_b");
  cmd_repro(tiny_pipeline(a.path()));
  const auto first = tree(a.path());
  CHECK(first.count("eval/summary.csv") == 1);
  CHECK(first.count("pretrain/s0/phase2/model.ckpt") == 1);
  CHECK(first.count("analysis/s0/entropy_by_step.csv") == 1);
  CHECK(first.count("analysis/s0/mean_jsd_by_step.csv") == 1);
  CHECK(first.count("analysis/s0/jsd_overlap.csv") == 1);

  // Interrupted after pretraining, then resumed.
  const Pipeline pb = tiny_pipeline(b.path());
  cmd_gen(pb);
  cmd_pretrain(pb, 0);
  cmd_repro(pb);
  CHECK(tree(b.path()) == first);

  // A fresh rerun into the same root reproduces every byte.
  fs::remove_all(a.path());
  fs::create_directories(a.path());
  cmd_repro(tiny_pipeline(a.path()));
  CHECK(tree(a.path()) == first);
}

TEST_CASE("SSFT plan lists both provenance sets") {
  fixture::TempDir dir("ssft");
  Pipeline p = tiny_pipeline(dir.path());
  p.config.alpha = 0.0;
  cmd_gen(p);
  cmd_pretrain(p, 0);
  cmd_analyze(p, 0);
  cmd_select(p, {Strategy::SEFT, Strategy::SSFT});
  const auto ssft = load_plan(p.dir.plan("lr0", Strategy::SSFT, std::nullopt));
  const auto seft = load_plan(p.dir.plan("lr0", Strategy::SEFT, std::nullopt));
  bool shared = false, specific = false;
  for (const auto& [l, v] : ssft.experts) {
    for (const auto& s : v) {
      shared = shared || s.provenance == Provenance::Shared;
      specific = specific || s.provenance == Provenance::LanguageSpecific;
      if (s.provenance == Provenance::LanguageSpecific) CHECK(seft.contains(l, s.expert));
    }
  }
  CHECK(shared);
  CHECK(specific == (seft.total_experts() > 0));
  const std::string text = slurp(p.dir.plan("lr0", Strategy::SSFT, std::nullopt));
  CHECK(text.find("\"shared\"") != std::string::npos);
}

TEST_CASE("eval on explicit checkpoints equals the direct forgetting report") {
  fixture::TempDir dir("evalpair");
  const Pipeline p = tiny_pipeline(dir.path());
  cmd_gen(p);
  cmd_pretrain(p, 0);
  const fs::path before = p.dir.phase_ckpt(0, 1), after = p.dir.phase_ckpt(0, 2);
  const EvalReport via = cmd_eval_pair(p, before, after, "pair");
  const Checkpoint b = load_checkpoint(before), a = load_checkpoint(after);
  std::vector<LanguageDocs> anchors;
  for (const auto& id : p.config.corpus.pretrain_ids) anchors.push_back({id, load_split(p.dir.corpus(), id, "test")});
  const EvalReport direct = forgetting_report(MoeLm(b.config, b.params), MoeLm(a.config, a.params), anchors,
                                              p.config.forgetting.resamples, via.seed);
  CHECK(eval_report_json(via) == eval_report_json(direct));
  CHECK(fs::exists(p.dir.root / "eval" / "pair.csv"));
  CHECK_THROWS_AS(cmd_eval_pair(p, "/nonexistent.ckpt", after, "x"), ConfigError);
}

TEST_CASE("cli exit codes") {
  fixture::TempDir dir("cli");
  const std::string out = (dir.path() / "run").string();
  CHECK(run_cli("gen --config /nonexistent/manifest.json --out " + out) == 2);
  CHECK(run_cli("gen --config tiny --alpha 3 --out " + out) == 2);
  CHECK(run_cli("bogus") == 2);
  CHECK(run_cli("pretrain --config tiny --out " + out) == 2);  // nothing generated yet
  CHECK_FALSE(fs::exists(out));
  CHECK(run_cli("gen --config tiny --quiet --out " + out) == 0);
  const std::string once = slurp(fs::path(out) / "corpus" / "lr0.train.txt");
  CHECK(run_cli("gen --config tiny --quiet --out " + out) == 0);
  CHECK(slurp(fs::path(out) / "corpus" / "lr0.train.txt") == once);
  CHECK(run_cli("repro --config tiny --quiet --out " + out) == 2);  // not clean, no --resume
  {
    RunLock held(out);
    CHECK(run_cli("pretrain --config tiny --quiet --out " + out) == 1);
  }
  CHECK(run_cli("repro --config tiny --quiet --resume --out " + out) == 0);
  CHECK(fs::exists(fs::path(out) / "eval" / "summary.md"));
  CHECK_FALSE(fs::exists(fs::path(out) / "run.lock"));
}
