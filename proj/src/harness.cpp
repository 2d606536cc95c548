#include "reslab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

namespace reslab {

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw DataError("harness: cannot write " + p.string());
  os << text;
}

void append_jsonl(const fs::path& p, const njson& j) {
  std::ofstream os(p, std::ios::app);
  if (!os) throw DataError("harness: cannot write " + p.string());
  os << j.dump() << '\n';
}

std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_csv(const fs::path& p, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream os(p);
  if (!os) throw DataError("harness: cannot write " + p.string());
  for (size_t i = 0; i < header.size(); ++i)
    os << header[i] << (i + 1 < header.size() ? "," : "\n");
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i)
      os << fmt_full(row[i]) << (i + 1 < row.size() ? "," : "\n");
  }
}

std::vector<std::vector<uint32_t>> analysis_windows(const Corpus& corpus,
                                                    int seq_len, int count,
                                                    uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<uint32_t>> out;
  size_t di = 0;
  for (int i = 0; i < count; ++i) {
    for (size_t tries = 0; tries < corpus.domains.size(); ++tries) {
      const auto& d = corpus.domains[di];
      di = (di + 1) % corpus.domains.size();
      if (int64_t(d.tokens.size()) < seq_len) continue;
      uint64_t off = rng() % uint64_t(d.tokens.size() - seq_len + 1);
      out.emplace_back(d.tokens.begin() + off, d.tokens.begin() + off + seq_len);
      break;
    }
  }
  if (out.empty()) throw DataError("harness: no domain long enough to analyze");
  return out;
}

template <typename T>
void emit_report(const fs::path& report_dir, const ExperimentConfig& cfg,
                 const ModelParams<T>& params, const Corpus& corpus) {
  fs::create_directories(report_dir);
  const auto& mc = cfg.model;
  int n = mc.n_layers;
  int seq = std::min(mc.max_seq, cfg.train.seq_len);
  auto windows = analysis_windows(corpus, seq + 1, cfg.analysis.sample_sequences,
                                  cfg.seed + 7);

  // accumulated per-layer statistics over the sampled windows
  std::vector<double> entropy(n, 0.0), v1_sim(n, 0.0), pair_sim(n, 0.0);
  std::vector<double> value_norm(n, 0.0), hidden_norm(n, 0.0);
  std::vector<double> pca_count(n, 0.0);
  Mat layer_sim;
  std::vector<std::vector<double>> importance_rows;
  int used = 0;
  {
    NoGrad ng;
    for (const auto& w : windows) {
      std::vector<uint32_t> inputs(w.begin(), w.end() - 1);
      auto r = model_forward<T>(inputs, params, {true, false});
      for (int i = 0; i < n; ++i) {
        const auto& layer = r.trace.layers[i];
        // cross-layer attention widens A; blended site residuals can leave
        // the rows non-stochastic. Skip the importance stats in those modes.
        if (layer.attn_avg.cols == layer.attn_avg.rows && !layer.negative_attn) {
          try {
            auto imp = token_importance(layer.attn_avg);
            entropy[i] += attention_entropy(imp);
            if (used == 0 && i + 1 == n) importance_rows.push_back(imp);
          } catch (const DataError&) {
            // non-stochastic rows (blended site residuals): no importance stat
          }
        }
        v1_sim[i] +=
            value_similarity(r.trace.layers[0].v_post, layer.v_post).mean_cosine;
        pair_sim[i] += token_pair_similarity(layer.v_post).mean_cosine;
        auto pr = pca_core_features(layer.h, cfg.analysis.pca_threshold);
        pca_count[i] += pr.count;
      }
      auto vn = state_norms(r.trace, StateKind::Value, 0);
      auto hn = state_norms(r.trace, StateKind::Hidden, 0);
      for (int i = 0; i < n; ++i) {
        value_norm[i] += vn[i];
        hidden_norm[i] += hn[i];
      }
      if (used == 0) layer_sim = layer_similarity_matrix(r.trace);
      ++used;
    }
  }
  for (int i = 0; i < n; ++i) {
    entropy[i] /= used;
    v1_sim[i] /= used;
    pair_sim[i] /= used;
    value_norm[i] /= used;
    hidden_norm[i] /= used;
    pca_count[i] /= used;
  }

  // attention-parameter grad norms from one backward pass
  {
    auto probe_params = params;
    probe_params.zero_grad();
    const auto& w = windows[0];
    std::vector<uint32_t> inputs(w.begin(), w.end() - 1);
    std::vector<uint32_t> targets(w.begin() + 1, w.end());
    auto loss = cross_entropy(model_forward<T>(inputs, probe_params).logits,
                              targets);
    backward(loss);
    auto rows = grad_norm_probe(probe_params);
    std::vector<std::vector<double>> csv;
    for (const auto& r : rows)
      csv.push_back({double(r.layer), r.wq, r.wk, r.wv, r.wo});
    write_csv(report_dir / "fig4_left.csv", {"layer", "wq", "wk", "wv", "wo"},
              csv);
  }

  {
    std::vector<std::vector<double>> csv;
    for (int i = 0; i < n; ++i) csv.push_back({double(i + 1), entropy[i]});
    write_csv(report_dir / "fig10_left.csv", {"layer", "entropy"}, csv);
  }
  {
    std::vector<std::vector<double>> csv;
    for (int i = 0; i < n; ++i) csv.push_back({double(i + 1), v1_sim[i]});
    write_csv(report_dir / "fig9_left.csv", {"layer", "v1_cosine"}, csv);
    csv.clear();
    for (int i = 0; i < n; ++i) csv.push_back({double(i + 1), pair_sim[i]});
    write_csv(report_dir / "fig9_right.csv", {"layer", "token_pair_cosine"}, csv);
  }
  {
    std::vector<std::vector<double>> csv;
    for (int i = 0; i < layer_sim.rows; ++i) {
      std::vector<double> row;
      row.push_back(i);
      for (int j = 0; j < layer_sim.cols; ++j) row.push_back(layer_sim(i, j));
      csv.push_back(row);
    }
    std::vector<std::string> header = {"state"};
    for (int j = 0; j < layer_sim.cols; ++j)
      header.push_back("h" + std::to_string(j));
    write_csv(report_dir / "fig7.csv", header, csv);
  }
  {
    std::vector<std::vector<double>> csv;
    for (int i = 0; i < n; ++i)
      csv.push_back({double(i + 1), value_norm[i], hidden_norm[i]});
    write_csv(report_dir / "fig11.csv",
              {"layer", "value_norm_tok0", "hidden_norm_tok0"}, csv);
  }
  {
    std::vector<std::vector<double>> csv;
    for (int i = 0; i < n; ++i) csv.push_back({double(i + 1), pca_count[i]});
    write_csv(report_dir / "fig12_right.csv", {"layer", "core_features"}, csv);
  }
  if (!importance_rows.empty()) {
    std::vector<std::vector<double>> csv;
    for (size_t j = 0; j < importance_rows[0].size(); ++j)
      csv.push_back({double(j), importance_rows[0][j]});
    write_csv(report_dir / "importance_last_layer.csv",
              {"position", "importance"}, csv);
  }
  {
    auto snap = lambda_snapshot(params);
    if (!snap.empty()) {
      std::vector<std::vector<double>> csv;
      for (const auto& r : snap)
        csv.push_back({double(r.layer), r.lambda1, r.lambda2,
                       r.ratio_defined ? 1.0 : 0.0, r.ratio});
      write_csv(report_dir / "fig6.csv",
                {"layer", "lambda1", "lambda2", "ratio_defined", "ratio"}, csv);
    }
    auto dm = dense_lambda_snapshot(params);
    if (!dm.empty()) {
      njson j = dm;
      write_text(report_dir / "dense_lambda.json", j.dump(2) + "\n");
    }
  }

  auto kv = kv_cache_size(mc);
  njson summary;
  summary["name"] = cfg.name;
  summary["parameters"] = params.count();
  summary["kv_elements_per_token"] = kv.elements_per_token;
  summary["kv_ratio_vs_mha"] = kv.ratio_vs_mha;
  summary["sampled_windows"] = used;
  summary["mean_entropy"] = entropy;
  summary["mean_v1_cosine"] = v1_sim;
  summary["pca_core_features"] = pca_count;
  write_text(report_dir / "analysis.json", summary.dump(2) + "\n");
}

template <typename T>
RunSummary run_impl(const ExperimentConfig& cfg, const RunOptions& opts,
                    const fs::path& dir, bool resuming) {
  Corpus corpus = build_corpus(cfg.corpus, cfg.model.vocab);
  corpus.validate(cfg.model.vocab);

  auto state = TrainState<T>::init(cfg.model, cfg.train, cfg.seed);
  fs::path ck_dir = dir / "checkpoints";
  fs::create_directories(ck_dir);
  fs::path latest = ck_dir / "latest.bin";
  if (resuming) {
    if (!fs::exists(latest))
      throw DataError("harness: --resume but no checkpoint at " +
                      latest.string());
    checkpoint_load(state, latest.string());
  }

  MetricsWriter metrics((dir / "metrics.jsonl").string());
  fs::path eval_path = dir / "eval.jsonl";
  RunSummary summary;
  summary.run_dir = dir.string();
  summary.best_valid_loss = std::numeric_limits<double>::infinity();

  int stop_at = cfg.train.total_steps;
  if (opts.step_limit) stop_at = std::min(stop_at, *opts.step_limit);
  bool partial = stop_at < cfg.train.total_steps;

  auto t0 = std::chrono::steady_clock::now();
  while (state.step < stop_at) {
    auto batch = sample_batch(corpus, cfg.train, state.rng);
    StepResult r;
    try {
      r = train_step(state, batch, cfg.train);
    } catch (const NumericError&) {
      checkpoint_save(state, (ck_dir / "last_good.bin").string());
      throw;
    }
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
    metrics.log(state.step, r.lr, r.loss, r.grad_norm, state.tokens_seen, ms);
    summary.final_train_loss = r.loss;

    if (state.step % cfg.train.eval_interval == 0 ||
        state.step == cfg.train.total_steps) {
      double v = evaluate(state.params, corpus, cfg.train, cfg.seed + 99);
      summary.final_valid_loss = v;
      summary.best_valid_loss = std::min(summary.best_valid_loss, v);
      njson j;
      j["step"] = state.step;
      j["valid_loss"] = v;
      append_jsonl(eval_path, j);
      checkpoint_save(state, latest.string());
    }
  }
  checkpoint_save(state, latest.string());
  summary.steps = state.step;
  if (summary.final_valid_loss == 0 && summary.steps > 0) {
    double v = evaluate(state.params, corpus, cfg.train, cfg.seed + 99);
    summary.final_valid_loss = v;
    summary.best_valid_loss = std::min(summary.best_valid_loss, v);
  }

  if (cfg.analysis.enabled && !partial)
    emit_report(dir / "report", cfg, state.params, corpus);

  njson j;
  j["steps"] = summary.steps;
  j["final_train_loss"] = summary.final_train_loss;
  j["final_valid_loss"] = summary.final_valid_loss;
  j["best_valid_loss"] = summary.best_valid_loss;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  return summary;
}

}  // namespace

Corpus build_corpus(const CorpusConfig& cfg, int vocab) {
  cfg.validate();
  Corpus c;
  if (!cfg.sources.empty()) {
    for (const auto& s : cfg.sources) {
      auto f = read_tokens(s.path);
      if (int(f.vocab) > vocab)
        throw DataError("corpus: file " + s.path + " has vocab " +
                        std::to_string(f.vocab) + " above model vocab " +
                        std::to_string(vocab));
      c.domains.push_back({s.name, std::move(f.tokens), s.weight});
    }
    return c;
  }
  if (cfg.synthetic == "mixture")
    return gen_mixture(cfg.synthetic_tokens, cfg.synthetic_seed);
  if (cfg.synthetic == "markov") {
    c.domains.push_back(
        {"markov",
         gen_markov(cfg.synthetic_tokens,
                    default_markov_chain(cfg.synthetic_seed + 17, 8),
                    cfg.synthetic_seed),
         1.0});
    return c;
  }
  c.domains.push_back({"repeat",
                       gen_repeat(cfg.synthetic_tokens, cfg.repeat_period,
                                  cfg.synthetic_seed, vocab),
                       1.0});
  return c;
}

RunSummary run_experiment(ExperimentConfig cfg, const RunOptions& opts) {
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.precision) cfg.precision = *opts.precision;
  if (opts.out_dir) cfg.out_dir = *opts.out_dir;
  cfg.validate();

  fs::path dir = fs::path(cfg.out_dir) / cfg.name;
  bool exists = fs::exists(dir);
  if (exists && !opts.resume && !opts.force)
    throw ConfigError("harness: run directory " + dir.string() +
                      " already exists (use --resume or --force)");
  if (exists && opts.force && !opts.resume) {
    fs::remove_all(dir);
    exists = false;
  }
  fs::create_directories(dir);
  write_text(dir / "config.lock", serialize_config(cfg));

  if (cfg.precision == "f32")
    return run_impl<float>(cfg, opts, dir, exists && opts.resume);
  return run_impl<double>(cfg, opts, dir, exists && opts.resume);
}

std::vector<double> read_metric_series(const std::string& path,
                                       const std::string& field) {
  std::ifstream is(path);
  if (!is) throw DataError("harness: cannot open " + path);
  std::vector<double> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = njson::parse(line, nullptr, false);
    if (j.is_discarded())
      throw DataError("harness: malformed JSONL line in " + path);
    if (!j.contains(field))
      throw DataError("harness: field " + field + " missing in " + path);
    out.push_back(j.at(field).get<double>());
  }
  return out;
}

CompareResult compare_runs(const std::vector<std::string>& run_dirs,
                           const std::string& out_dir, int smooth_window,
                           int regress_last) {
  if (run_dirs.size() < 2)
    throw UsageError("compare: need at least two run directories");
  CompareResult res;
  std::vector<std::vector<double>> train_series;
  for (const auto& rd : run_dirs) {
    res.runs.push_back(rd);
    train_series.push_back(
        read_metric_series((fs::path(rd) / "metrics.jsonl").string(),
                           "train_loss"));
    auto valid = read_metric_series((fs::path(rd) / "eval.jsonl").string(),
                                    "valid_loss");
    if (valid.empty()) throw DataError("compare: no eval records in " + rd);
    res.final_valid.push_back(valid.back());
    res.best_valid.push_back(*std::min_element(valid.begin(), valid.end()));
  }
  size_t len = train_series[0].size();
  for (const auto& s : train_series)
    if (s.size() != len)
      throw DataError("compare: runs have different metric lengths");
  if (len == 0) throw DataError("compare: empty metric streams");

  // first run = early leader, second = the curve expected to catch up
  res.critical = critical_point(train_series[0], train_series[1], smooth_window,
                                regress_last);

  fs::create_directories(out_dir);
  // deltas of each run against the first, raw and smoothed alike
  std::vector<std::string> header = {"step"};
  for (size_t r = 1; r < run_dirs.size(); ++r) {
    std::string base = "delta_run" + std::to_string(r);
    header.push_back(base);
    header.push_back(base + "_smoothed");
  }
  std::vector<std::vector<double>> smoothed;
  for (const auto& s : train_series)
    smoothed.push_back(trailing_mean(s, smooth_window));
  std::vector<std::vector<double>> rows;
  for (size_t i = 0; i < len; ++i) {
    std::vector<double> row = {double(i)};
    for (size_t r = 1; r < run_dirs.size(); ++r) {
      row.push_back(train_series[r][i] - train_series[0][i]);
      row.push_back(smoothed[r][i] - smoothed[0][i]);
    }
    rows.push_back(row);
  }
  write_csv(fs::path(out_dir) / "compare.csv", header, rows);

  njson j;
  j["runs"] = res.runs;
  j["final_valid"] = res.final_valid;
  j["best_valid"] = res.best_valid;
  j["critical"] = {{"crossed", res.critical.crossed},
                   {"step", res.critical.step},
                   {"extrapolated", res.critical.extrapolated},
                   {"predicted_step", res.critical.predicted_step}};
  write_text(fs::path(out_dir) / "compare.json", j.dump(2) + "\n");
  return res;
}

void analyze_run(const std::string& run_dir) {
  fs::path dir(run_dir);
  auto cfg = load_config((dir / "config.lock").string());
  cfg.validate();
  Corpus corpus = build_corpus(cfg.corpus, cfg.model.vocab);
  fs::path latest = dir / "checkpoints" / "latest.bin";
  if (!fs::exists(latest))
    throw DataError("analyze: no checkpoint at " + latest.string());
  if (cfg.precision == "f32") {
    auto state = TrainState<float>::init(cfg.model, cfg.train, cfg.seed);
    checkpoint_load(state, latest.string());
    emit_report(dir / "report", cfg, state.params, corpus);
  } else {
    auto state = TrainState<double>::init(cfg.model, cfg.train, cfg.seed);
    checkpoint_load(state, latest.string());
    emit_report(dir / "report", cfg, state.params, corpus);
  }
}

}  // namespace reslab
