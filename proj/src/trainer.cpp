#include "moelab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace moelab {

TrainableMask full_mask(const ParameterSet& params) {
  TrainableMask m;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m.names.push_back(params.name(i));
    m.trainable.push_back(true);
    m.trainable_elements += params.value(i).size();
  }
  return m;
}

TrainableMask build_mask(const ExpertSelectionPlan& plan, const Checkpoint& ck, bool freeze_routers) {
  if (plan.whole_model) return full_mask(ck.params);
  plan.validate(ck.config);
  std::vector<bool> on(ck.params.size(), false);
  auto mark = [&](const std::string& name, const std::string& what) {
    auto i = ck.params.find(name);
    if (!i) throw ConfigError("plan/model mismatch: " + what + " has no parameter '" + name + "'");
    on[*i] = true;
  };
  for (const auto& [layer, experts] : plan.experts) {
    if (experts.empty()) continue;
    for (const auto& s : experts) {
      const std::string what = "layer " + std::to_string(layer) + " expert " + std::to_string(s.expert);
      for (const char* part : {"w_gate", "w_up", "w_down"}) mark(pname::expert(layer, s.expert, part), what);
    }
    if (!freeze_routers) mark(pname::router(layer), "layer " + std::to_string(layer) + " router");
  }
  TrainableMask m;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    m.names.push_back(ck.params.name(i));
    m.trainable.push_back(on[i]);
    (on[i] ? m.trainable_elements : m.frozen_elements) += ck.params.value(i).size();
  }
  return m;
}

void RunConfig::validate() const {
  if (!(optim.lr > 0.0) || !std::isfinite(optim.lr)) throw ConfigError("run: learning rate must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("run: Adam betas must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0) || !(optim.weight_decay >= 0.0)) throw ConfigError("run: eps must be positive, weight_decay nonnegative");
  if (batch_size == 0) throw ConfigError("run: batch_size must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("run: grad_clip must be nonnegative");
  if (!(snapshot_fraction >= 0.0 && snapshot_fraction <= 1.0)) throw ConfigError("run: snapshot_fraction must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"lr", c.optim.lr},
                     {"beta1", c.optim.beta1},
                     {"beta2", c.optim.beta2},
                     {"eps", c.optim.eps},
                     {"weight_decay", c.optim.weight_decay},
                     {"token_budget", c.token_budget},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"grad_clip", c.grad_clip},
                     {"snapshot_fraction", c.snapshot_fraction},
                     {"keep_every", c.keep_every},
                     {"save_optimizer", c.save_optimizer}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.optim.lr = j.value("lr", d.optim.lr);
  c.optim.beta1 = j.value("beta1", d.optim.beta1);
  c.optim.beta2 = j.value("beta2", d.optim.beta2);
  c.optim.eps = j.value("eps", d.optim.eps);
  c.optim.weight_decay = j.value("weight_decay", d.optim.weight_decay);
  c.token_budget = j.value("token_budget", d.token_budget);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.snapshot_fraction = j.value("snapshot_fraction", d.snapshot_fraction);
  c.keep_every = j.value("keep_every", d.keep_every);
  c.save_optimizer = j.value("save_optimizer", d.save_optimizer);
}

std::vector<std::vector<DocRef>> plan_batches(std::span<const LanguageDocs> corpus, std::size_t token_budget,
                                              std::size_t batch_size, std::size_t seq_len, std::uint64_t seed) {
  std::vector<std::vector<DocRef>> batches;
  if (token_budget == 0) return batches;
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  struct Walker {
    std::size_t lang;
    std::vector<std::size_t> usable;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    std::uint64_t epoch = 0;
  };
  Rng rng = Rng(seed).split("batches");
  std::vector<Walker> walkers;
  for (std::size_t l = 0; l < corpus.size(); ++l) {
    Walker w{l, {}, {}};
    for (std::size_t d = 0; d < corpus[l].docs.size(); ++d) {
      if (corpus[l].docs[d].size() >= 2) w.usable.push_back(d);
    }
    if (!w.usable.empty()) walkers.push_back(std::move(w));
  }
  if (walkers.empty()) throw InputError("training corpus has no document with at least one predicted token");

  std::size_t tokens = 0, turn = 0;
  std::vector<DocRef> batch;
  while (tokens < token_budget) {
    Walker& w = walkers[turn++ % walkers.size()];
    if (w.pos == w.order.size()) {
      w.order = w.usable;
      rng.split(corpus[w.lang].id).split(w.epoch++).shuffle(std::span<std::size_t>(w.order));
      w.pos = 0;
    }
    const std::size_t d = w.order[w.pos++];
    batch.push_back({w.lang, d});
    tokens += std::min(corpus[w.lang].docs[d].size(), seq_len) - 1;
    if (batch.size() == batch_size) batches.push_back(std::move(batch)), batch.clear();
  }
  if (!batch.empty()) batches.push_back(std::move(batch));
  return batches;
}

namespace {

std::vector<std::vector<int>> materialize(std::span<const LanguageDocs> corpus, const std::vector<DocRef>& refs,
                                          std::size_t seq_len) {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(refs.size());
  for (const DocRef& r : refs) {
    const Document& d = corpus[r.language].docs[r.doc];
    seqs.emplace_back(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(d.size(), seq_len)));
  }
  return seqs;
}

}  // namespace

TrainResult train(const Checkpoint& init, const TrainableMask& mask, std::span<const LanguageDocs> corpus,
                  const RunConfig& config, const SnapshotSpec* snapshots) {
  config.validate();
  if (mask.trainable.size() != init.params.size()) {
    throw ConfigError("trainable mask covers " + std::to_string(mask.trainable.size()) + " tensors; the checkpoint has " +
                      std::to_string(init.params.size()));
  }
  for (std::size_t i = 0; i < mask.names.size(); ++i) {
    if (mask.names[i] != init.params.name(i)) throw ConfigError("trainable mask does not match parameter '" + init.params.name(i) + "'");
  }
  const auto seq_len = static_cast<std::size_t>(init.config.seq_len);
  const auto batches = plan_batches(corpus, config.token_budget, config.batch_size, seq_len, config.seed);

  TrainResult res;
  res.checkpoint = init;
  if (batches.empty() || !mask.any()) return res;

  MoeLm model(init.config, init.params);
  ParameterSet& params = model.params();
  Gradients grads = make_gradients(params, mask.trainable);
  std::vector<Tensor*> live;
  for (Tensor& g : grads) {
    if (!g.empty()) live.push_back(&g);
  }
  OptimizerState opt = OptimizerState::create(config.optim, params.tensors(), mask.trainable);
  auto last_good = std::make_shared<const Checkpoint>(init);

  std::set<std::uint64_t> schedule;
  if (snapshots != nullptr) {
    for (auto s : snapshot_schedule(batches.size(), config.snapshot_fraction)) schedule.insert(s);
  }
  auto take_snapshot = [&](std::uint64_t s) {
    if (schedule.count(s)) res.snapshots.push_back(snapshot(model, snapshots->corpus, snapshots->layers, init.step + s));
  };

  for (std::uint64_t s = 0; s < batches.size(); ++s) {
    take_snapshot(s);
    const auto seqs = materialize(corpus, batches[s], seq_len);
    zero_gradients(grads);
    StepLog log;
    log.step = init.step + s + 1;
    try {
      log.loss = model.loss(seqs, &grads).loss;
      double sq = 0.0;
      for (Tensor* g : live) {
        for (double v : g->values()) sq += v * v;
      }
      log.grad_norm = std::sqrt(sq);
      if (!std::isfinite(log.grad_norm)) throw NumericalError("non-finite gradient norm");
      if (config.grad_clip > 0.0 && log.grad_norm > config.grad_clip) {
        const double f = config.grad_clip / log.grad_norm;
        for (Tensor* g : live) {
          for (double& v : g->values()) v *= f;
        }
      }
      adamw_step(params.tensors(), grads, opt);
    } catch (const NumericalError& e) {
      throw DivergedError("training diverged at step " + std::to_string(init.step + s + 1) + ": " + e.what() +
                              " (last good checkpoint at step " + std::to_string(last_good->step) + ")",
                          last_good, init.step + s + 1);
    }
    res.tokens += log.loss.tokens;
    res.log.push_back(log);
    if (config.keep_every > 0 && (s + 1) % config.keep_every == 0) {
      last_good = std::make_shared<const Checkpoint>(Checkpoint{init.config, params, init.step + s + 1, std::nullopt});
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask.trainable[i] && !params.value(i).all_finite()) {
      throw DivergedError("training produced non-finite parameter '" + params.name(i) + "'", last_good,
                          init.step + batches.size());
    }
  }
  take_snapshot(batches.size());
  res.steps = batches.size();
  res.checkpoint = Checkpoint{init.config, params, init.step + batches.size(), std::nullopt};
  if (config.save_optimizer) res.checkpoint.optimizer = std::move(opt);
  return res;
}

TrainResult pretrain(const Checkpoint& init, std::span<const LanguageDocs> corpus, const RunConfig& config,
                     const SnapshotSpec* snapshots) {
  return train(init, full_mask(init.params), corpus, config, snapshots);
}

TrainResult adapt(const Checkpoint& ck, const TrainableMask& mask, std::span<const LanguageDocs> target,
                  const RunConfig& config) {
  return train(ck, mask, target, config, nullptr);
}

std::vector<LanguagePerplexity> eval_perplexity(const MoeLm& model, std::span<const LanguageDocs> corpus,
                                                std::size_t batch_docs) {
  const auto seq_len = static_cast<std::size_t>(model.config().seq_len);
  batch_docs = std::max<std::size_t>(1, batch_docs);
  std::vector<LanguagePerplexity> out;
  for (const LanguageDocs& lang : corpus) {
    LanguagePerplexity lp;
    lp.language = lang.id;
    std::vector<std::vector<int>> seqs;
    for (const Document& d : lang.docs) {
      for (int t : d) {
        if (t < 0 || t >= model.config().vocab_size) {
          throw ConfigError("evaluation language '" + lang.id + "' uses token " + std::to_string(t) +
                            " outside the model vocabulary of " + std::to_string(model.config().vocab_size));
        }
      }
      if (d.size() >= 2) seqs.emplace_back(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(d.size(), seq_len)));
    }
    if (seqs.empty()) throw InputError("evaluation split for '" + lang.id + "' is empty");
    double total = 0.0;
    for (std::size_t start = 0; start < seqs.size(); start += batch_docs) {
      const std::size_t end = std::min(seqs.size(), start + batch_docs);
      const auto nll = model.token_nlls(std::span<const std::vector<int>>(seqs).subspan(start, end - start));
      for (const auto& doc : nll) {
        const double s = std::accumulate(doc.begin(), doc.end(), 0.0);
        lp.doc_nll.push_back(s);
        lp.doc_tokens.push_back(doc.size());
        lp.tokens += doc.size();
        total += s;
      }
    }
    lp.mean_nll = total / static_cast<double>(lp.tokens);
    lp.perplexity = std::exp(lp.mean_nll);
    out.push_back(std::move(lp));
  }
  return out;
}

const std::vector<double>& default_lr_grid() {
  static const std::vector<double> grid{1e-5, 1e-4, 4e-4, 1e-3, 4e-3};
  return grid;
}

SweepResult select_best(std::vector<SweepRow> rows) {
  if (rows.empty()) throw ConfigError("sweep grid is empty");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].perplexity) continue;
    if (!best) {
      best = i;
      continue;
    }
    const double a = *rows[i].perplexity, b = *rows[*best].perplexity;
    if (a < b || (a == b && rows[i].lr < rows[*best].lr)) best = i;
  }
  if (!best) throw SweepError("every sweep run diverged", std::move(rows));
  return SweepResult{std::move(rows), *best};
}

SweepResult sweep(std::span<const double> grid, const std::function<double(double)>& run) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<SweepRow> rows;
  for (double lr : grid) {
    SweepRow row;
    row.lr = lr;
    try {
      const double ppl = run(lr);
      if (std::isfinite(ppl)) {
        row.perplexity = ppl;
      } else {
        row.note = "non-finite perplexity";
      }
    } catch (const DivergedError& e) {
      row.note = e.what();
    } catch (const NumericalError& e) {
      row.note = e.what();
    }
    rows.push_back(std::move(row));
  }
  return select_best(std::move(rows));
}

namespace {
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}
}  // namespace

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write sweep table " + path.string());
  out << "lr,perplexity,status,note\n";
  for (const auto& r : rows) {
    out << num(r.lr) << ',' << (r.perplexity ? num(*r.perplexity) : "") << ',' << (r.perplexity ? "ok" : "diverged") << ','
        << csv_field(r.note) << '\n';
  }
}

double bootstrap_perplexity_std(const LanguagePerplexity& lp, std::size_t resamples, Rng rng) {
  const std::size_t n = lp.doc_nll.size();
  if (resamples < 2 || n == 0) return 0.0;
  std::vector<double> ppl(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    double nll = 0.0;
    std::size_t tok = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t d = rng.below(n);
      nll += lp.doc_nll[d];
      tok += lp.doc_tokens[d];
    }
    ppl[r] = std::exp(nll / static_cast<double>(tok));
  }
  const double mean = std::accumulate(ppl.begin(), ppl.end(), 0.0) / static_cast<double>(resamples);
  double ss = 0.0;
  for (double p : ppl) ss += (p - mean) * (p - mean);
  return std::sqrt(ss / static_cast<double>(resamples - 1));
}

void apply_forgetting_flags(EvalReport& report) {
  report.warnings.erase(std::remove_if(report.warnings.begin(), report.warnings.end(),
                                       [](const std::string& w) { return w.rfind("insufficient resamples", 0) == 0; }),
                        report.warnings.end());
  const bool usable = report.resamples >= 2;
  if (!usable) {
    report.warnings.push_back("insufficient resamples (" + std::to_string(report.resamples) +
                              ") for a standard deviation; no forgetting flags raised");
  }
  for (auto& e : report.entries) {
    e.delta = e.after - e.before;
    e.flagged = usable && e.delta > e.before_std;
  }
}

EvalReport forgetting_report(const MoeLm& before, const MoeLm& after, std::span<const LanguageDocs> anchors,
                             std::size_t resamples, std::uint64_t seed) {
  if (!(before.config() == after.config())) throw ConfigError("forgetting_report: checkpoints have different configs");
  const auto b = eval_perplexity(before, anchors);
  const auto a = eval_perplexity(after, anchors);
  EvalReport r;
  r.resamples = resamples;
  r.seed = seed;
  Rng rng = Rng(seed).split("bootstrap");
  for (std::size_t i = 0; i < b.size(); ++i) {
    ForgettingEntry e;
    e.language = b[i].language;
    e.before = b[i].perplexity;
    e.after = a[i].perplexity;
    e.before_std = bootstrap_perplexity_std(b[i], resamples, rng.split(b[i].language));
    r.entries.push_back(std::move(e));
  }
  apply_forgetting_flags(r);
  return r;
}

nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"language", e.language},
                       {"before", e.before},
                       {"after", e.after},
                       {"delta", e.delta},
                       {"before_std", e.before_std},
                       {"flagged", e.flagged}});
  }
  return {{"resamples", r.resamples}, {"seed", r.seed}, {"warnings", r.warnings}, {"entries", entries}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.resamples = j.at("resamples").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.warnings = j.value("warnings", std::vector<std::string>{});
  for (const auto& e : j.at("entries")) {
    r.entries.push_back({e.at("language").get<std::string>(), e.at("before").get<double>(), e.at("after").get<double>(),
                         e.at("delta").get<double>(), e.at("before_std").get<double>(), e.at("flagged").get<bool>()});
  }
  return r;
}

void write_eval_report(const std::filesystem::path& dir, const std::string& stem, const EvalReport& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / (stem + ".csv"), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report in " + dir.string());
    out << "language,before_ppl,after_ppl,delta,before_std,flagged\n";
    for (const auto& e : r.entries) {
      out << e.language << ',' << num(e.before) << ',' << num(e.after) << ',' << num(e.delta) << ',' << num(e.before_std)
          << ',' << (e.flagged ? 1 : 0) << '\n';
    }
  }
  std::ofstream out(dir / (stem + ".json"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report in " + dir.string());
  out << eval_report_json(r).dump(2) << '\n';
}

}  // namespace moelab
