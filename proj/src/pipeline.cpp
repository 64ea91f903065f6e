#include "moelab/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "moelab/error.hpp"

namespace moelab {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write on " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + " is not valid JSON: " + e.what());
  }
}

bool safe_name(const std::string& s) {
  if (s.empty() || s.size() > 80) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  }) && s != "." && s != "..";
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) { return Rng(seed).split(purpose).next_u64(); }

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void write_step_log(const fs::path& path, const std::vector<StepLog>& log) {
  std::ostringstream ss;
  ss << "step,total,ce,aux,z,grad_norm,tokens\n";
  for (const auto& s : log) {
    ss << s.step << ',' << num17(s.loss.total) << ',' << num17(s.loss.ce) << ',' << num17(s.loss.aux) << ','
       << num17(s.loss.z) << ',' << num17(s.grad_norm) << ',' << s.loss.tokens << '\n';
  }
  write_text(path, ss.str());
}

json table_to_json(const ActivationFrequencyTable& t) {
  return {{"layer", t.layer}, {"k", t.k}, {"languages", t.languages}, {"counts", t.counts}, {"tokens", t.tokens}};
}

ActivationFrequencyTable table_from_json(const json& j) {
  ActivationFrequencyTable t;
  t.layer = j.at("layer").get<std::size_t>();
  t.k = j.at("k").get<std::size_t>();
  t.languages = j.at("languages").get<std::vector<std::string>>();
  t.counts = j.at("counts").get<std::vector<std::vector<std::uint64_t>>>();
  t.tokens = j.at("tokens").get<std::vector<std::uint64_t>>();
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  if (!safe_name(name)) throw ConfigError("experiment name '" + name + "' is not filesystem-safe");
  model.validate();
  corpus.validate();
  phase1.validate();
  phase2.validate();
  adapt.validate();
  if (corpus.vocab_size != model.vocab_size) {
    throw ConfigError("corpus vocab_size (" + std::to_string(corpus.vocab_size) + ") differs from model vocab_size (" +
                      std::to_string(model.vocab_size) + ")");
  }
  if (model.seq_len < 2) throw ConfigError("model seq_len must be at least 2");
  if (std::find(corpus.pretrain_ids.begin(), corpus.pretrain_ids.end(), base_language) == corpus.pretrain_ids.end()) {
    throw ConfigError("base_language '" + base_language + "' is not a pretraining language");
  }
  if (strategies.empty()) throw ConfigError("strategy list is empty");
  if (lr_grid.empty()) throw ConfigError("lr_grid is empty");
  for (double lr : lr_grid) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr_grid entries must be positive");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (k_shared > static_cast<std::size_t>(model.n_experts)) {
    throw ConfigError("k_shared (" + std::to_string(k_shared) + ") exceeds n_experts (" + std::to_string(model.n_experts) + ")");
  }
  for (std::size_t l : layers) {
    if (l >= static_cast<std::size_t>(model.n_layers)) {
      throw ConfigError("layer " + std::to_string(l) + " does not exist (model has " + std::to_string(model.n_layers) + ")");
    }
  }
  if (pretrain_seeds.empty() || adapt_seeds.empty()) throw ConfigError("seed lists must be nonempty");
  if (!(forgetting.lr > 0.0) || !(forgetting.budget_multiplier > 0.0)) {
    throw ConfigError("forgetting lr and budget_multiplier must be positive");
  }
  if (keep_checkpoints != "none" && keep_checkpoints != "primary" && keep_checkpoints != "all") {
    throw ConfigError("keep_checkpoints must be none | primary | all");
  }
}

json pipeline_to_json(const PipelineConfig& c) {
  std::vector<std::string> strategies, fstrategies;
  for (Strategy s : c.strategies) strategies.push_back(to_string(s));
  for (Strategy s : c.forgetting.strategies) fstrategies.push_back(to_string(s));
  return {{"name", c.name},
          {"model", c.model},
          {"corpus", c.corpus},
          {"phase1", c.phase1},
          {"phase2", c.phase2},
          {"adapt", c.adapt},
          {"base_language", c.base_language},
          {"strategies", strategies},
          {"lr_grid", c.lr_grid},
          {"sweep_all_seeds", c.sweep_all_seeds},
          {"alpha", c.alpha},
          {"k_shared", c.k_shared},
          {"layers", c.layers},
          {"pretrain_seeds", c.pretrain_seeds},
          {"adapt_seeds", c.adapt_seeds},
          {"forgetting",
           {{"seeds", c.forgetting.seeds},
            {"budget_multiplier", c.forgetting.budget_multiplier},
            {"lr", c.forgetting.lr},
            {"resamples", c.forgetting.resamples},
            {"strategies", fstrategies}}},
          {"snapshot_docs", c.snapshot_docs},
          {"export_traces", c.export_traces},
          {"keep_checkpoints", c.keep_checkpoints}};
}

PipelineConfig pipeline_from_json(const json& j) {
  try {
    PipelineConfig c;
    c.name = j.value("name", c.name);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("corpus")) c.corpus = j.at("corpus").get<CorpusLayout>();
    if (j.contains("phase1")) c.phase1 = j.at("phase1").get<RunConfig>();
    if (j.contains("phase2")) c.phase2 = j.at("phase2").get<RunConfig>();
    if (j.contains("adapt")) c.adapt = j.at("adapt").get<RunConfig>();
    c.base_language = j.value("base_language", c.base_language);
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j.at("strategies")) c.strategies.push_back(strategy_from_string(s.get<std::string>()));
    }
    c.lr_grid = j.value("lr_grid", c.lr_grid);
    c.sweep_all_seeds = j.value("sweep_all_seeds", c.sweep_all_seeds);
    c.alpha = j.value("alpha", c.alpha);
    c.k_shared = j.value("k_shared", c.k_shared);
    c.layers = j.value("layers", c.layers);
    c.pretrain_seeds = j.value("pretrain_seeds", c.pretrain_seeds);
    c.adapt_seeds = j.value("adapt_seeds", c.adapt_seeds);
    if (j.contains("forgetting")) {
      const json& f = j.at("forgetting");
      c.forgetting.seeds = f.value("seeds", c.forgetting.seeds);
      c.forgetting.budget_multiplier = f.value("budget_multiplier", c.forgetting.budget_multiplier);
      c.forgetting.lr = f.value("lr", c.forgetting.lr);
      c.forgetting.resamples = f.value("resamples", c.forgetting.resamples);
      if (f.contains("strategies")) {
        c.forgetting.strategies.clear();
        for (const auto& s : f.at("strategies")) c.forgetting.strategies.push_back(strategy_from_string(s.get<std::string>()));
      }
    }
    c.snapshot_docs = j.value("snapshot_docs", c.snapshot_docs);
    c.export_traces = j.value("export_traces", c.export_traces);
    c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid pipeline config: ") + e.what());
  }
}

std::vector<std::string> preset_names() { return {"paper-desk", "paper-desk-quick", "tiny"}; }

json preset_json(const std::string& name) {
  PipelineConfig c;
  c.name = name;
  if (name == "paper-desk" || name == "paper-desk-quick") {
    c.corpus.train_docs = 5000;
    c.corpus.target_train_docs = 2000;
    c.corpus.valid_docs = 200;
    c.corpus.test_docs = 200;
    c.phase1.optim.lr = 3e-3;
    c.phase1.batch_size = 16;
    c.phase1.token_budget = 1'000'000;
    c.phase2.optim.lr = 2e-3;
    c.phase2.batch_size = 16;
    c.phase2.token_budget = 4'000'000;
    c.adapt.batch_size = 8;
    c.adapt.token_budget = 250'000;
    if (name == "paper-desk-quick") {
      c.phase1.token_budget = 300'000;
      c.phase2.token_budget = 1'200'000;
      c.adapt.token_budget = 60'000;
      c.sweep_all_seeds = false;
    }
    return pipeline_to_json(c);
  }
  if (name == "tiny") {
    c.model.n_layers = 2;
    c.model.d_model = 32;
    c.model.n_heads = 2;
    c.model.vocab_size = 128;
    c.model.seq_len = 32;
    c.model.n_experts = 8;
    c.model.top_k = 2;
    c.model.expert_hidden = 32;
    c.corpus.vocab_size = 128;
    c.corpus.language_vocab = 24;
    c.corpus.pretrain_ids = {"hr0", "hr1", "hr2"};
    c.corpus.line_overlaps = {0.8, 0.5};
    c.corpus.targets = {{"lr0", "hr1", 0.5}};
    c.corpus.min_doc_len = 8;
    c.corpus.max_doc_len = 31;
    c.corpus.train_docs = 60;
    c.corpus.valid_docs = 10;
    c.corpus.test_docs = 10;
    c.phase1.optim.lr = 3e-3;
    c.phase1.token_budget = 3000;
    c.phase2.optim.lr = 3e-3;
    c.phase2.token_budget = 6000;
    c.adapt.token_budget = 2000;
    c.adapt.batch_size = 4;
    c.lr_grid = {1e-3, 4e-3};
    c.k_shared = 2;
    c.pretrain_seeds = {0};
    c.adapt_seeds = {0, 1};
    c.forgetting.seeds = {0};
    c.forgetting.resamples = 10;
    c.snapshot_docs = 5;
    c.keep_checkpoints = "all";
    return pipeline_to_json(c);
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

PipelineConfig resolve_config(const std::string& spec) {
  const auto names = preset_names();
  json j;
  if (std::find(names.begin(), names.end(), spec) != names.end()) {
    j = preset_json(spec);
  } else {
    if (!fs::is_regular_file(spec)) {
      std::string known;
      for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
      throw ConfigError("config '" + spec + "' is neither a preset (" + known + ") nor a readable file");
    }
    json user;
    try {
      std::ifstream in(spec);
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + spec + "' is not valid JSON: " + e.what());
    }
    if (!user.is_object()) throw ConfigError("config '" + spec + "' must be a JSON object");
    if (user.contains("preset")) {
      j = preset_json(user.at("preset").get<std::string>());
      user.erase("preset");
      j.merge_patch(user);
    } else {
      j = user;
    }
  }
  PipelineConfig c = pipeline_from_json(j);
  c.validate();
  return c;
}

void apply_overrides(PipelineConfig& c, const CliOverrides& o) {
  if (o.seed) {
    c.pretrain_seeds = {*o.seed};
    c.adapt_seeds = {*o.seed};
    c.forgetting.seeds = {*o.seed};
  }
  if (o.strategy) c.strategies = {strategy_from_string(*o.strategy)};
  if (o.alpha) c.alpha = *o.alpha;
  if (o.k_shared) c.k_shared = *o.k_shared;
  if (o.layers) c.layers = *o.layers;
  if (o.lr) c.lr_grid = {*o.lr};
  c.validate();
}

fs::path resolve_run_dir(const PipelineConfig& c, const std::optional<std::string>& out) {
  if (out) return fs::path(*out);
  if (const char* root = std::getenv("MOELAB_OUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / c.name;
  return fs::path("runs") / c.name;
}

std::size_t thread_count() {
  if (const char* t = std::getenv("MOELAB_THREADS"); t != nullptr && *t != '\0') {
    char* end = nullptr;
    const long v = std::strtol(t, &end, 10);
    if (end == t || *end != '\0' || v < 1 || v > 1024) throw ConfigError("MOELAB_THREADS must be an integer in [1, 1024]");
    return static_cast<std::size_t>(v);
  }
  return 1;
}

RunLock::RunLock(const fs::path& dir) : path_(dir / "run.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw Error("run directory " + dir.string() + " is locked by another invocation (" + path_.string() +
                  "); remove the lock file if that run is no longer alive");
    }
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

fs::path RunDir::plan(const std::string& target, Strategy st, std::optional<std::uint64_t> seed) const {
  std::string file = to_string(st);
  if (seed) file += ".s" + std::to_string(*seed);
  return root / "plans" / target / (file + ".json");
}

void Pipeline::note(const std::string& line) const {
  if (log != nullptr) *log << line << std::endl;
}

bool Pipeline::done(const std::string& stage) const { return resume && fs::exists(dir.marker(stage)); }

void Pipeline::mark(const std::string& stage, const json& info) const {
  write_text(dir.marker(stage), (info.is_null() ? json::object() : info).dump() + "\n");
}

std::vector<LanguageDocs> Pipeline::split(const std::vector<std::string>& ids, const std::string& split,
                                          std::size_t limit) const {
  std::vector<LanguageDocs> out;
  for (const auto& id : ids) {
    LanguageDocs ld{id, load_split(dir.corpus(), id, split)};
    if (limit > 0 && ld.docs.size() > limit) ld.docs.resize(limit);
    out.push_back(std::move(ld));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

void require(const Pipeline& p, const std::string& stage, const std::string& hint) {
  if (!fs::exists(p.dir.marker(stage))) {
    throw ConfigError("missing prerequisite stage '" + stage + "' in " + p.dir.root.string() + "; run `" + hint + "` first");
  }
}

MoeLm load_model(const fs::path& path) {
  Checkpoint ck = load_checkpoint(path);
  return MoeLm(ck.config, std::move(ck.params));
}

}  // namespace

CorpusReport cmd_gen(const Pipeline& p) {
  const CorpusManifest m = p.manifest();
  CorpusReport r;
  if (p.done("gen")) {
    p.note("[gen] corpus already present, skipping");
    r.json = read_json(p.dir.corpus() / "overlap_report.json");
    r.ids = r.json.at("order").get<std::vector<std::string>>();
    r.target = r.json.at("target_overlap").get<std::vector<std::vector<double>>>();
    for (const auto& row : r.json.at("achieved_overlap")) {
      std::vector<double> v;
      for (const auto& x : row) v.push_back(x.is_null() ? std::nan("") : x.get<double>());
      r.achieved.push_back(v);
    }
    return r;
  }
  r = emit_corpus(m, p.dir.corpus());
  std::ostringstream table;
  table << "[gen] " << to_string(m.layout.metric) << " overlap (target / achieved):\n";
  for (std::size_t a = 0; a < r.ids.size(); ++a) {
    for (std::size_t b = a + 1; b < r.ids.size(); ++b) {
      table << "  " << r.ids[a] << " - " << r.ids[b] << "  " << fixed(r.target[a][b], 3) << " / " << fixed(r.achieved[a][b], 3)
            << '\n';
    }
  }
  p.note(table.str());
  p.mark("gen", {{"max_abs_deviation", r.json.at("max_abs_deviation")}});
  return r;
}

void cmd_pretrain(const Pipeline& p, std::uint64_t seed) {
  require(p, "gen", "moelab gen");
  const PipelineConfig& c = p.config;
  const auto& ids = c.corpus.pretrain_ids;
  SnapshotSpec snaps{p.split(ids, "valid", c.snapshot_docs), {}};

  for (int phase : {1, 2}) {
    const std::string stage = "pretrain.s" + std::to_string(seed) + ".phase" + std::to_string(phase);
    if (p.done(stage)) {
      p.note("[" + stage + "] done, skipping");
      continue;
    }
    Checkpoint init;
    if (phase == 1) {
      init = make_checkpoint(MoeLm::initialize(c.model, Rng(derive_seed(seed, "init"))));
    } else {
      require(p, "pretrain.s" + std::to_string(seed) + ".phase1", "moelab pretrain");
      init = load_checkpoint(p.dir.phase_ckpt(seed, 1));
    }
    RunConfig rc = phase == 1 ? c.phase1 : c.phase2;
    rc.seed = derive_seed(seed, "phase" + std::to_string(phase));
    const auto train = phase == 1 ? p.split({c.base_language}, "train") : p.split(ids, "train");
    p.note("[" + stage + "] training on " + std::to_string(train.size()) + " language(s), budget " +
           std::to_string(rc.token_budget) + " tokens");
    TrainResult res = pretrain(init, train, rc, &snaps);
    const fs::path out = p.dir.phase_ckpt(seed, phase).parent_path();
    save_checkpoint(p.dir.phase_ckpt(seed, phase), res.checkpoint);
    write_step_log(out / "log.csv", res.log);
    write_snapshot_reports(out / "telemetry", res.snapshots);
    write_text(out / "run.json", json{{"run", rc}, {"steps", res.steps}, {"tokens", res.tokens},
                                      {"final_loss", res.log.empty() ? json(nullptr) : json(res.log.back().loss.total)}}
                                     .dump(2) + "\n");
    p.note("[" + stage + "] " + std::to_string(res.steps) + " steps, final loss " +
           (res.log.empty() ? std::string("n/a") : fixed(res.log.back().loss.total)));
    p.mark(stage);
  }
}

void cmd_analyze(const Pipeline& p, std::uint64_t seed) {
  const std::string stage = "analyze.s" + std::to_string(seed);
  if (p.done(stage)) {
    p.note("[" + stage + "] done, skipping");
    return;
  }
  require(p, "pretrain.s" + std::to_string(seed) + ".phase2", "moelab pretrain");
  const PipelineConfig& c = p.config;
  const auto& ids = c.corpus.pretrain_ids;
  const MoeLm model = load_model(p.dir.phase_ckpt(seed, 2));
  const auto valid = p.split(ids, "valid");
  std::vector<RoutingRecord> records;
  const Checkpoint ck = load_checkpoint(p.dir.phase_ckpt(seed, 2));
  RoutingSnapshot s = snapshot(model, valid, {}, ck.step, &records);
  const fs::path out = p.dir.analysis(seed);
  write_snapshot_reports(out / "final", std::vector<RoutingSnapshot>{s});
  if (c.export_traces) export_records(out / "final" / "routing_trace.tsv", s.step, records);

  // Overlap from the emitted training files.
  const json report = read_json(p.dir.corpus() / "overlap_report.json");
  const auto order = report.at("order").get<std::vector<std::string>>();
  auto overlap = [&](const std::string& a, const std::string& b) {
    const auto ia = std::find(order.begin(), order.end(), a) - order.begin();
    const auto ib = std::find(order.begin(), order.end(), b) - order.begin();
    return report.at("achieved_overlap").at(static_cast<std::size_t>(ia)).at(static_cast<std::size_t>(ib)).get<double>();
  };

  std::ostringstream scatter, trend;
  scatter << "layer,language_a,language_b,overlap,jsd_nats\n";
  trend << "layer,mean_jsd_nats,mean_entropy_nats,spearman_rho\n";
  json by_layer = json::array();
  for (std::size_t li = 0; li < s.layers.size(); ++li) {
    std::vector<double> xs, ys;
    for (std::size_t a = 0; a < ids.size(); ++a) {
      for (std::size_t b = a + 1; b < ids.size(); ++b) {
        xs.push_back(overlap(ids[a], ids[b]));
        ys.push_back(s.jsd[li][a][b]);
        scatter << s.layers[li] << ',' << ids[a] << ',' << ids[b] << ',' << num17(xs.back()) << ',' << num17(ys.back()) << '\n';
      }
    }
    const std::optional<double> rho_opt = xs.size() >= 2 ? spearman_rho(xs, ys) : std::nullopt;
    const json rho = rho_opt ? json(*rho_opt) : json(nullptr);
    double ent = 0.0;
    for (double e : s.entropy[li]) ent += e;
    ent /= static_cast<double>(s.entropy[li].size());
    trend << s.layers[li] << ',' << num17(s.mean_jsd(s.layers[li])) << ',' << num17(ent) << ','
          << (rho.is_null() ? std::string("undefined") : num17(rho.get<double>())) << '\n';
    by_layer.push_back({{"layer", s.layers[li]},
                        {"mean_jsd", s.mean_jsd(s.layers[li])},
                        {"mean_entropy", ent},
                        {"spearman_rho", rho}});
  }
  write_text(out / "jsd_overlap.csv", scatter.str());
  write_text(out / "layer_trend.csv", trend.str());

  // Curves over training from the in-training snapshots of both phases.
  std::ostringstream ent_steps, jsd_steps;
  ent_steps << "phase,step,layer,language,entropy_nats\n";
  jsd_steps << "phase,step,layer,mean_jsd_nats\n";
  for (int phase : {1, 2}) {
    const fs::path snaps = p.dir.phase_ckpt(seed, phase).parent_path() / "telemetry" / "snapshots.json";
    if (!fs::exists(snaps)) continue;
    for (const auto& snap : read_json(snaps)) {
      const auto langs = snap.at("languages").get<std::vector<std::string>>();
      for (const auto& layer : snap.at("layers")) {
        const auto ent = layer.at("entropy").get<std::vector<double>>();
        for (std::size_t i = 0; i < langs.size(); ++i) {
          ent_steps << phase << ',' << snap.at("step").get<std::uint64_t>() << ',' << layer.at("layer").get<std::size_t>() << ','
                    << langs[i] << ',' << num17(ent[i]) << '\n';
        }
        jsd_steps << phase << ',' << snap.at("step").get<std::uint64_t>() << ',' << layer.at("layer").get<std::size_t>() << ','
                  << num17(layer.at("mean_jsd").get<double>()) << '\n';
      }
    }
  }
  write_text(out / "entropy_by_step.csv", ent_steps.str());
  write_text(out / "mean_jsd_by_step.csv", jsd_steps.str());

  json tables = json::array();
  for (const auto& t : s.activation) tables.push_back(table_to_json(t));
  write_text(out / "activation_tables.json", tables.dump() + "\n");

  const std::size_t first = s.layers.front(), last = s.layers.back();
  json summary{{"seed", seed},
               {"step", s.step},
               {"layers", by_layer},
               {"first_layer", first},
               {"final_layer", last},
               {"mean_jsd_first", s.mean_jsd(first)},
               {"mean_jsd_final", s.mean_jsd(last)},
               {"spearman_final", by_layer.back().at("spearman_rho")}};
  write_text(out / "analysis.json", summary.dump(2) + "\n");
  p.note("[" + stage + "] mean JSD first/final layer " + fixed(s.mean_jsd(first), 5) + " / " + fixed(s.mean_jsd(last), 5) +
         ", final-layer Spearman rho vs overlap " +
         (by_layer.back().at("spearman_rho").is_null() ? std::string("undefined")
                                                       : fixed(by_layer.back().at("spearman_rho").get<double>(), 3)));
  p.mark(stage);
}

void cmd_select(const Pipeline& p, const std::vector<Strategy>& strategies) {
  const PipelineConfig& c = p.config;
  const std::uint64_t seed = c.primary_seed();
  require(p, "analyze.s" + std::to_string(seed), "moelab analyze");
  if (p.done("select")) {
    p.note("[select] done, skipping");
    return;
  }
  std::vector<ActivationFrequencyTable> tables;
  for (const auto& t : read_json(p.dir.analysis(seed) / "activation_tables.json")) tables.push_back(table_from_json(t));
  const CorpusManifest m = p.manifest();
  for (const auto& target : m.ids_with_role("target")) {
    SelectionInputs in;
    in.target = target;
    in.anchor = m.anchors.at(target);
    in.alpha = c.alpha;
    in.k_shared = c.k_shared;
    in.layers = c.selection_layers();
    in.tables = tables;
    in.shared_languages = c.corpus.pretrain_ids;
    in.gap_source = "valid split, pretrain seed " + std::to_string(seed);
    const ExpertSelectionPlan seft = assemble_plan(Strategy::SEFT, in, c.model);
    in.base_seft = seft;
    for (Strategy st : strategies) {
      if (st == Strategy::RANDOM_SEFT) {
        for (std::uint64_t s : c.adapt_seeds) {
          in.seed = s;
          save_plan(p.dir.plan(target, st, s), assemble_plan(st, in, c.model));
        }
        continue;
      }
      const ExpertSelectionPlan plan = assemble_plan(st, in, c.model);
      save_plan(p.dir.plan(target, st, std::nullopt), plan);
      std::ostringstream counts;
      for (std::size_t l : plan.layers) counts << " L" << l << "=" << plan.count(l);
      p.note("[select] " + target + " (anchor " + in.anchor + ") " + to_string(st) + ":" +
             (plan.whole_model ? std::string(" whole model") : counts.str()) +
             (plan.flagged_empty ? " [flagged: no expert passes alpha]" : "") + ", " +
             std::to_string(plan.trainable_params) + " trainable parameters");
    }
  }
  p.mark("select");
}

namespace {

struct AdaptOutcome {
  SweepResult sweep;
  Checkpoint best;
};

}  // namespace

void cmd_adapt(const Pipeline& p, const std::vector<Strategy>& strategies, std::optional<double> fixed_lr) {
  const PipelineConfig& c = p.config;
  require(p, "select", "moelab select");
  const std::uint64_t primary = c.primary_seed();
  const fs::path base_path = p.dir.phase_ckpt(primary, 2);
  const Checkpoint base = load_checkpoint(base_path);
  const CorpusManifest m = p.manifest();
  const std::size_t threads = thread_count();

  for (const auto& target : m.ids_with_role("target")) {
    const auto train = p.split({target}, "train");
    const auto valid = p.split({target}, "valid");
    const auto test = p.split({target}, "test");
    for (Strategy st : strategies) {
      for (std::size_t si = 0; si < c.adapt_seeds.size(); ++si) {
        const std::uint64_t seed = c.adapt_seeds[si];
        const std::string stage = "adapt." + target + "." + to_string(st) + ".s" + std::to_string(seed);
        if (p.done(stage)) {
          p.note("[" + stage + "] done, skipping");
          continue;
        }
        const fs::path plan_path = p.dir.plan(target, st, st == Strategy::RANDOM_SEFT ? std::optional(seed) : std::nullopt);
        if (!fs::exists(plan_path)) throw ConfigError("missing plan " + plan_path.string() + "; run `moelab select` first");
        const ExpertSelectionPlan plan = load_plan(plan_path);
        const TrainableMask mask = build_mask(plan, base);

        std::vector<double> grid = c.lr_grid;
        if (fixed_lr) {
          grid = {*fixed_lr};
        } else if (!c.sweep_all_seeds && si > 0) {
          const fs::path lead = p.dir.adapt_dir(target, st, c.adapt_seeds.front()) / "result.json";
          if (!fs::exists(lead)) throw ConfigError("missing " + lead.string() + "; the first adaptation seed sweeps first");
          grid = {read_json(lead).at("best_lr").get<double>()};
        }
        RunConfig rc = c.adapt;
        rc.seed = derive_seed(seed, "adapt");

        std::vector<SweepRow> rows(grid.size());
        std::vector<std::optional<Checkpoint>> ckpts(grid.size());
        std::mutex mu;
        parallel_for(grid.size(), threads, [&](std::size_t i) {
          RunConfig r = rc;
          r.optim.lr = grid[i];
          SweepRow row;
          row.lr = grid[i];
          try {
            TrainResult res = adapt(base, mask, train, r);
            const MoeLm model(res.checkpoint.config, res.checkpoint.params);
            row.perplexity = eval_perplexity(model, valid).front().perplexity;
            std::lock_guard<std::mutex> lock(mu);
            ckpts[i] = std::move(res.checkpoint);
          } catch (const DivergedError& e) {
            row.note = e.what();
          } catch (const NumericalError& e) {
            row.note = e.what();
          }
          rows[i] = std::move(row);
        });
        const fs::path out = p.dir.adapt_dir(target, st, seed);
        write_sweep_csv(out / "sweep.csv", rows);
        SweepResult sw = select_best(rows);
        const Checkpoint& best = *ckpts[sw.best];

        bool frozen_exact = true;
        for (std::size_t i = 0; i < base.params.size(); ++i) {
          if (!mask.trainable[i] && !bit_equal(base.params.value(i), best.params.value(i))) frozen_exact = false;
        }
        const MoeLm best_model(best.config, best.params);
        const double test_ppl = eval_perplexity(best_model, test).front().perplexity;
        json result{{"target", target},
                    {"anchor", m.anchors.at(target)},
                    {"strategy", to_string(st)},
                    {"seed", seed},
                    {"best_lr", sw.best_lr()},
                    {"valid_ppl", *sw.rows[sw.best].perplexity},
                    {"test_ppl", test_ppl},
                    {"trainable_params", mask.trainable_elements},
                    {"trainable_fraction", mask.trainable_fraction()},
                    {"plan_flagged_empty", plan.flagged_empty},
                    {"frozen_bit_exact", frozen_exact},
                    {"steps", best.step - base.step}};
        const bool keep = c.keep_checkpoints == "all" || (c.keep_checkpoints == "primary" && si == 0);
        if (keep) save_checkpoint(out / "model.ckpt", best);
        write_text(out / "result.json", result.dump(2) + "\n");
        p.note("[" + stage + "] lr " + num17(sw.best_lr()) + ", valid ppl " + fixed(*sw.rows[sw.best].perplexity) +
               ", test ppl " + fixed(test_ppl) + ", trainable " + fixed(100.0 * mask.trainable_fraction(), 2) + "%");
        p.mark(stage);
      }
    }
  }
}

void cmd_forgetting(const Pipeline& p) {
  const PipelineConfig& c = p.config;
  require(p, "select", "moelab select");
  const std::uint64_t primary = c.primary_seed();
  const Checkpoint base = load_checkpoint(p.dir.phase_ckpt(primary, 2));
  const MoeLm base_model(base.config, base.params);
  const CorpusManifest m = p.manifest();
  const auto anchors = p.split(c.corpus.pretrain_ids, "test");
  for (const auto& target : m.ids_with_role("target")) {
    const auto train = p.split({target}, "train");
    for (Strategy st : c.forgetting.strategies) {
      for (std::uint64_t seed : c.forgetting.seeds) {
        const std::string stage = "forget." + target + "." + to_string(st) + ".s" + std::to_string(seed);
        if (p.done(stage)) {
          p.note("[" + stage + "] done, skipping");
          continue;
        }
        const fs::path plan_path = p.dir.plan(target, st, st == Strategy::RANDOM_SEFT ? std::optional(seed) : std::nullopt);
        if (!fs::exists(plan_path)) throw ConfigError("missing plan " + plan_path.string() + "; run `moelab select` first");
        const TrainableMask mask = build_mask(load_plan(plan_path), base);
        RunConfig rc = c.adapt;
        rc.optim.lr = c.forgetting.lr;
        rc.token_budget = static_cast<std::size_t>(std::llround(static_cast<double>(c.adapt.token_budget) * c.forgetting.budget_multiplier));
        rc.seed = derive_seed(seed, "forgetting");
        TrainResult res = adapt(base, mask, train, rc);
        const MoeLm after(res.checkpoint.config, res.checkpoint.params);
        EvalReport rep = forgetting_report(base_model, after, anchors, c.forgetting.resamples, derive_seed(seed, "bootstrap"));
        const fs::path out = p.dir.forgetting_dir(target, st, seed);
        write_eval_report(out, "forgetting", rep);
        double mean_delta = 0.0;
        for (const auto& e : rep.entries) mean_delta += e.delta;
        mean_delta /= static_cast<double>(rep.entries.size());
        p.note("[" + stage + "] mean anchor perplexity change " + fixed(mean_delta));
        p.mark(stage);
      }
    }
  }
}

void cmd_eval(const Pipeline& p) {
  const PipelineConfig& c = p.config;
  const CorpusManifest m = p.manifest();
  const std::uint64_t primary = c.primary_seed();
  require(p, "pretrain.s" + std::to_string(primary) + ".phase2", "moelab pretrain");
  const MoeLm base = load_model(p.dir.phase_ckpt(primary, 2));

  json rows = json::array();
  std::ostringstream csv, md;
  csv << "target,anchor,strategy,median_test_ppl,seeds,test_ppl_per_seed,best_lr_per_seed,trainable_params,trainable_fraction\n";
  md << "| target | anchor | strategy | median test ppl | trainable params | trainable % |\n";
  md << "|---|---|---|---|---|---|\n";
  for (const auto& target : m.ids_with_role("target")) {
    const double base_ppl = eval_perplexity(base, p.split({target}, "test")).front().perplexity;
    md << "| " << target << " | " << m.anchors.at(target) << " | (no adaptation) | " << fixed(base_ppl) << " | 0 | 0.00 |\n";
    csv << target << ',' << m.anchors.at(target) << ",BASE," << num17(base_ppl) << ",0,,,0,0\n";
    rows.push_back({{"target", target}, {"strategy", "BASE"}, {"median_test_ppl", base_ppl}});
    for (Strategy st : c.strategies) {
      std::vector<double> ppl, lrs;
      std::size_t params = 0;
      double frac = 0.0;
      for (std::uint64_t seed : c.adapt_seeds) {
        const fs::path rp = p.dir.adapt_dir(target, st, seed) / "result.json";
        if (!fs::exists(rp)) throw ConfigError("missing adaptation result " + rp.string() + "; run `moelab adapt` first");
        const json r = read_json(rp);
        ppl.push_back(r.at("test_ppl").get<double>());
        lrs.push_back(r.at("best_lr").get<double>());
        params = r.at("trainable_params").get<std::size_t>();
        frac = r.at("trainable_fraction").get<double>();
      }
      const double med = median(ppl);
      std::string per_seed, per_lr;
      for (std::size_t i = 0; i < ppl.size(); ++i) {
        per_seed += (i ? ";" : "") + num17(ppl[i]);
        per_lr += (i ? ";" : "") + num17(lrs[i]);
      }
      csv << target << ',' << m.anchors.at(target) << ',' << to_string(st) << ',' << num17(med) << ',' << ppl.size() << ','
          << per_seed << ',' << per_lr << ',' << params << ',' << num17(frac) << '\n';
      md << "| " << target << " | " << m.anchors.at(target) << " | " << to_string(st) << " | " << fixed(med) << " | " << params
         << " | " << fixed(100.0 * frac, 2) << " |\n";
      rows.push_back({{"target", target},
                      {"strategy", to_string(st)},
                      {"median_test_ppl", med},
                      {"test_ppl", ppl},
                      {"best_lr", lrs},
                      {"trainable_params", params},
                      {"trainable_fraction", frac}});
    }
  }

  // Forgetting: per (target, seed) mean Δppl over anchor languages.
  json forgetting = json::object();
  std::ostringstream fcsv;
  fcsv << "target,strategy,seed,mean_delta_ppl,flagged_languages\n";
  bool have_forgetting = true;
  for (const auto& target : m.ids_with_role("target")) {
    for (Strategy st : c.forgetting.strategies) {
      for (std::uint64_t seed : c.forgetting.seeds) {
        if (!fs::exists(p.dir.forgetting_dir(target, st, seed) / "forgetting.json")) have_forgetting = false;
      }
    }
  }
  if (have_forgetting) {
    for (Strategy st : c.forgetting.strategies) {
      std::vector<double> all;
      json per_target = json::object();
      for (const auto& target : m.ids_with_role("target")) {
        std::vector<double> deltas;
        for (std::uint64_t seed : c.forgetting.seeds) {
          const EvalReport r = eval_report_from_json(read_json(p.dir.forgetting_dir(target, st, seed) / "forgetting.json"));
          double mean = 0.0;
          std::string flagged;
          for (const auto& e : r.entries) {
            mean += e.delta;
            if (e.flagged) flagged += (flagged.empty() ? "" : ";") + e.language;
          }
          mean /= static_cast<double>(r.entries.size());
          deltas.push_back(mean);
          all.push_back(mean);
          fcsv << target << ',' << to_string(st) << ',' << seed << ',' << num17(mean) << ',' << flagged << '\n';
        }
        per_target[target] = median(deltas);
      }
      forgetting[to_string(st)] = {{"median_mean_delta", median(all)}, {"per_target", per_target}};
    }
    write_text(p.dir.root / "eval" / "forgetting_summary.csv", fcsv.str());
    md << "\nAnchor-language perplexity change after extended adaptation (median over targets and seeds):\n\n";
    md << "| strategy | median mean delta ppl |\n|---|---|\n";
    for (Strategy st : c.forgetting.strategies) {
      md << "| " << to_string(st) << " | " << fixed(forgetting[to_string(st)].at("median_mean_delta").get<double>()) << " |\n";
    }
  }
  json summary{{"rows", rows}, {"forgetting", have_forgetting ? forgetting : json(nullptr)}};
  write_text(p.dir.root / "eval" / "summary.csv", csv.str());
  write_text(p.dir.root / "eval" / "summary.md", md.str());
  write_text(p.dir.root / "eval" / "summary.json", summary.dump(2) + "\n");
  p.note(md.str());
}

EvalReport cmd_eval_pair(const Pipeline& p, const fs::path& before, const fs::path& after, const std::string& stem) {
  if (!fs::is_regular_file(before)) throw ConfigError("checkpoint " + before.string() + " does not exist");
  if (!fs::is_regular_file(after)) throw ConfigError("checkpoint " + after.string() + " does not exist");
  if (!safe_name(stem)) throw ConfigError("report name '" + stem + "' is not filesystem-safe");
  require(p, "gen", "moelab gen");
  const MoeLm b = load_model(before), a = load_model(after);
  const auto anchors = p.split(p.config.corpus.pretrain_ids, "test");
  EvalReport r = forgetting_report(b, a, anchors, p.config.forgetting.resamples, derive_seed(0, "bootstrap"));
  write_eval_report(p.dir.root / "eval", stem, r);
  std::ostringstream ss;
  ss << "[eval] language, before, after, delta, bootstrap std, flagged\n";
  for (const auto& e : r.entries) {
    ss << "  " << e.language << ", " << fixed(e.before) << ", " << fixed(e.after) << ", " << fixed(e.delta) << ", "
       << fixed(e.before_std) << ", " << (e.flagged ? "yes" : "no") << '\n';
  }
  for (const auto& w : r.warnings) ss << "  warning: " << w << '\n';
  p.note(ss.str());
  return r;
}

void cmd_repro(const Pipeline& p) {
  const PipelineConfig& c = p.config;
  const fs::path cfg = p.dir.root / "config.json";
  const std::string resolved = pipeline_to_json(c).dump(2) + "\n";
  if (fs::exists(cfg)) {
    std::ifstream in(cfg);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str() != resolved) {
      throw ConfigError("run directory " + p.dir.root.string() + " was created with a different configuration");
    }
  } else {
    write_text(cfg, resolved);
  }
  const auto stage = [&](const std::string& name, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const DivergedError& e) {
      throw DivergedError("stage '" + name + "' failed: " + e.what(), std::make_shared<const Checkpoint>(e.last_good()), e.step());
    } catch (const Error& e) {
      throw Error("stage '" + name + "' failed: " + e.what());
    }
  };
  stage("gen", [&] { cmd_gen(p); });
  for (std::uint64_t s : c.pretrain_seeds) stage("pretrain.s" + std::to_string(s), [&] { cmd_pretrain(p, s); });
  for (std::uint64_t s : c.pretrain_seeds) stage("analyze.s" + std::to_string(s), [&] { cmd_analyze(p, s); });
  std::vector<Strategy> needed = c.strategies;
  for (Strategy s : c.forgetting.strategies) {
    if (std::find(needed.begin(), needed.end(), s) == needed.end()) needed.push_back(s);
  }
  stage("select", [&] { cmd_select(p, needed); });
  stage("adapt", [&] { cmd_adapt(p, c.strategies); });
  stage("forgetting", [&] { cmd_forgetting(p); });
  stage("eval", [&] { cmd_eval(p); });
}

json load_summary(const RunDir& dir) { return read_json(dir.root / "eval" / "summary.json"); }

}  // namespace moelab
