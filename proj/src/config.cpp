#include "reslab/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace reslab {

namespace {

using json = nlohmann::ordered_json;

void check_keys(const json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!j.is_object())
    throw ConfigError("config: " + (path.empty() ? "root" : path) +
                      " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown field " +
                        (path.empty() ? it.key() : path + "." + it.key()));
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename E>
E enum_from(const json& j, const std::string& path, const char* key,
            const std::vector<std::pair<std::string, E>>& table, E fallback) {
  if (!j.contains(key)) return fallback;
  std::string s = j.at(key).get<std::string>();
  for (const auto& [name, v] : table)
    if (name == s) return v;
  std::string opts;
  for (const auto& [name, v] : table) opts += (opts.empty() ? "" : ", ") + name;
  throw ConfigError("config: " + path + "." + key + " must be one of {" + opts +
                    "}, got \"" + s + "\"");
}

template <typename E>
std::string enum_to(E v, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, e] : table)
    if (e == v) return name;
  throw UsageError("config: unmapped enum value");
}

const std::vector<std::pair<std::string, ResidualKind>> kResidualKinds = {
    {"vanilla", ResidualKind::Vanilla},
    {"neutreno", ResidualKind::Neutreno},
    {"denseformer", ResidualKind::Denseformer},
    {"resformer", ResidualKind::Resformer},
    {"svformer", ResidualKind::Svformer},
    {"site-ablation", ResidualKind::SiteAblation},
};
const std::vector<std::pair<std::string, ResformerVariant>> kVariants = {
    {"identity", ResformerVariant::Identity},
    {"constant", ResformerVariant::Constant},
    {"learnable", ResformerVariant::Learnable},
    {"learnable-plus", ResformerVariant::LearnablePlus},
    {"sparse", ResformerVariant::Sparse},
    {"dense", ResformerVariant::Dense},
};
const std::vector<std::pair<std::string, ResidualSite>> kSites = {
    {"query", ResidualSite::Query},
    {"key", ResidualSite::Key},
    {"attention", ResidualSite::Attention},
    {"hidden", ResidualSite::Hidden},
};
const std::vector<std::pair<std::string, ResidualMapping>> kMappings = {
    {"shared-attention", ResidualMapping::SharedAttention},
    {"identity-map", ResidualMapping::IdentityMap},
    {"cross-layer-attention", ResidualMapping::CrossLayerAttention},
};
const std::vector<std::pair<std::string, LayoutKind>> kLayouts = {
    {"mha", LayoutKind::MHA},
    {"gqa", LayoutKind::GQA},
    {"cla", LayoutKind::CLA},
    {"svformer", LayoutKind::SVFormer},
};
const std::vector<std::pair<std::string, ClaShared>> kClaShared = {
    {"keys", ClaShared::Keys},
    {"values", ClaShared::Values},
    {"keys-values", ClaShared::KeysValues},
};

ResidualSpec parse_residual(const json& j, const std::string& path) {
  check_keys(j, path,
             {"kind", "neutreno_lambda", "variant", "lambda1", "lambda2",
              "target_layers", "dense_matrix", "dense_learnable", "mapping",
              "rescale", "site", "site_lambda1", "site_lambda2"});
  ResidualSpec r;
  r.kind = enum_from(j, path, "kind", kResidualKinds, r.kind);
  read(j, "neutreno_lambda", r.neutreno_lambda);
  r.variant = enum_from(j, path, "variant", kVariants, r.variant);
  read(j, "lambda1", r.lambda1);
  read(j, "lambda2", r.lambda2);
  read(j, "target_layers", r.target_layers);
  read(j, "dense_matrix", r.dense_matrix);
  read(j, "dense_learnable", r.dense_learnable);
  r.mapping = enum_from(j, path, "mapping", kMappings, r.mapping);
  read(j, "rescale", r.rescale);
  r.site = enum_from(j, path, "site", kSites, r.site);
  read(j, "site_lambda1", r.site_lambda1);
  read(j, "site_lambda2", r.site_lambda2);
  return r;
}

json residual_json(const ResidualSpec& r) {
  json j;
  j["kind"] = enum_to(r.kind, kResidualKinds);
  j["neutreno_lambda"] = r.neutreno_lambda;
  j["variant"] = enum_to(r.variant, kVariants);
  j["lambda1"] = r.lambda1;
  j["lambda2"] = r.lambda2;
  j["target_layers"] = r.target_layers;
  j["dense_matrix"] = r.dense_matrix;
  j["dense_learnable"] = r.dense_learnable;
  j["mapping"] = enum_to(r.mapping, kMappings);
  j["rescale"] = r.rescale;
  j["site"] = enum_to(r.site, kSites);
  j["site_lambda1"] = r.site_lambda1;
  j["site_lambda2"] = r.site_lambda2;
  return j;
}

ModelConfig parse_model(const json& j, const std::string& path) {
  check_keys(j, path,
             {"n_layers", "n_heads", "n_kv_heads", "hidden", "ffn", "vocab",
              "max_seq", "rope_base", "norm_eps", "tie_embeddings", "layout",
              "residual", "hidden_residual_start"});
  ModelConfig m;
  read(j, "n_layers", m.n_layers);
  read(j, "n_heads", m.n_heads);
  read(j, "n_kv_heads", m.n_kv_heads);
  read(j, "hidden", m.hidden);
  read(j, "ffn", m.ffn);
  read(j, "vocab", m.vocab);
  read(j, "max_seq", m.max_seq);
  read(j, "rope_base", m.rope_base);
  read(j, "norm_eps", m.norm_eps);
  read(j, "tie_embeddings", m.tie_embeddings);
  if (j.contains("layout")) {
    const json& l = j.at("layout");
    std::string lp = path + ".layout";
    check_keys(l, lp, {"kind", "group", "period", "shared"});
    m.layout.kind = enum_from(l, lp, "kind", kLayouts, m.layout.kind);
    read(l, "group", m.layout.group);
    read(l, "period", m.layout.period);
    m.layout.shared = enum_from(l, lp, "shared", kClaShared, m.layout.shared);
  }
  if (j.contains("residual"))
    m.residual = parse_residual(j.at("residual"), path + ".residual");
  read(j, "hidden_residual_start", m.hidden_residual_start);
  return m;
}

json model_json(const ModelConfig& m) {
  json j;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["n_kv_heads"] = m.n_kv_heads;
  j["hidden"] = m.hidden;
  j["ffn"] = m.ffn;
  j["vocab"] = m.vocab;
  j["max_seq"] = m.max_seq;
  j["rope_base"] = m.rope_base;
  j["norm_eps"] = m.norm_eps;
  j["tie_embeddings"] = m.tie_embeddings;
  j["layout"] = {{"kind", enum_to(m.layout.kind, kLayouts)},
                 {"group", m.layout.group},
                 {"period", m.layout.period},
                 {"shared", enum_to(m.layout.shared, kClaShared)}};
  j["residual"] = residual_json(m.residual);
  j["hidden_residual_start"] = m.hidden_residual_start;
  return j;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  check_keys(j, path,
             {"peak_lr", "initial_lr", "final_lr_fraction", "warmup_steps",
              "total_steps", "beta1", "beta2", "eps", "weight_decay",
              "grad_clip_norm", "batch_tokens", "seq_len", "seed",
              "eval_interval", "eval_fraction", "eval_windows"});
  TrainConfig t;
  read(j, "peak_lr", t.peak_lr);
  read(j, "initial_lr", t.initial_lr);
  read(j, "final_lr_fraction", t.final_lr_fraction);
  read(j, "warmup_steps", t.warmup_steps);
  read(j, "total_steps", t.total_steps);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "eps", t.eps);
  read(j, "weight_decay", t.weight_decay);
  read(j, "grad_clip_norm", t.grad_clip_norm);
  read(j, "batch_tokens", t.batch_tokens);
  read(j, "seq_len", t.seq_len);
  read(j, "seed", t.seed);
  read(j, "eval_interval", t.eval_interval);
  read(j, "eval_fraction", t.eval_fraction);
  read(j, "eval_windows", t.eval_windows);
  return t;
}

json train_json(const TrainConfig& t) {
  json j;
  j["peak_lr"] = t.peak_lr;
  j["initial_lr"] = t.initial_lr;
  j["final_lr_fraction"] = t.final_lr_fraction;
  j["warmup_steps"] = t.warmup_steps;
  j["total_steps"] = t.total_steps;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["weight_decay"] = t.weight_decay;
  j["grad_clip_norm"] = t.grad_clip_norm;
  j["batch_tokens"] = t.batch_tokens;
  j["seq_len"] = t.seq_len;
  j["seed"] = t.seed;
  j["eval_interval"] = t.eval_interval;
  j["eval_fraction"] = t.eval_fraction;
  j["eval_windows"] = t.eval_windows;
  return j;
}

CorpusConfig parse_corpus(const json& j, const std::string& path) {
  check_keys(j, path,
             {"sources", "synthetic", "synthetic_tokens", "synthetic_seed",
              "repeat_period"});
  CorpusConfig c;
  if (j.contains("sources")) {
    for (size_t i = 0; i < j.at("sources").size(); ++i) {
      const json& s = j.at("sources")[i];
      std::string sp = path + ".sources[" + std::to_string(i) + "]";
      check_keys(s, sp, {"name", "path", "weight"});
      CorpusSource src;
      read(s, "name", src.name);
      read(s, "path", src.path);
      read(s, "weight", src.weight);
      c.sources.push_back(std::move(src));
    }
  }
  read(j, "synthetic", c.synthetic);
  read(j, "synthetic_tokens", c.synthetic_tokens);
  read(j, "synthetic_seed", c.synthetic_seed);
  read(j, "repeat_period", c.repeat_period);
  return c;
}

json corpus_json(const CorpusConfig& c) {
  json j;
  j["sources"] = json::array();
  for (const auto& s : c.sources)
    j["sources"].push_back(
        {{"name", s.name}, {"path", s.path}, {"weight", s.weight}});
  j["synthetic"] = c.synthetic;
  j["synthetic_tokens"] = c.synthetic_tokens;
  j["synthetic_seed"] = c.synthetic_seed;
  j["repeat_period"] = c.repeat_period;
  return j;
}

AnalysisConfig parse_analysis(const json& j, const std::string& path) {
  check_keys(j, path,
             {"enabled", "sample_sequences", "pca_threshold", "critical_window",
              "regress_last"});
  AnalysisConfig a;
  read(j, "enabled", a.enabled);
  read(j, "sample_sequences", a.sample_sequences);
  read(j, "pca_threshold", a.pca_threshold);
  read(j, "critical_window", a.critical_window);
  read(j, "regress_last", a.regress_last);
  return a;
}

json analysis_json(const AnalysisConfig& a) {
  json j;
  j["enabled"] = a.enabled;
  j["sample_sequences"] = a.sample_sequences;
  j["pca_threshold"] = a.pca_threshold;
  j["critical_window"] = a.critical_window;
  j["regress_last"] = a.regress_last;
  return j;
}

}  // namespace

void CorpusConfig::validate() const {
  if (!synthetic.empty() && synthetic != "mixture" && synthetic != "markov" &&
      synthetic != "repeat")
    throw ConfigError("corpus.synthetic must be mixture, markov, or repeat");
  if (synthetic.empty() && sources.empty())
    throw ConfigError("corpus: needs sources or a synthetic generator");
  if (!sources.empty()) {
    double sum = 0;
    for (const auto& s : sources) {
      if (s.weight < 0)
        throw ConfigError("corpus.sources: negative weight for " + s.name);
      sum += s.weight;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("corpus.sources: weights sum to " +
                        std::to_string(sum) + ", expected 1");
  }
  if (synthetic_tokens < 1)
    throw ConfigError("corpus.synthetic_tokens must be positive");
}

void ExperimentConfig::validate() const {
  if (precision != "f32" && precision != "f64")
    throw ConfigError("config: precision must be f32 or f64");
  if (name.empty()) throw ConfigError("config: name must not be empty");
  model.validate();
  train.validate();
  corpus.validate();
  if (analysis.pca_threshold <= 0 || analysis.pca_threshold > 1)
    throw ConfigError("analysis.pca_threshold outside (0, 1]");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, "",
             {"name", "precision", "seed", "out_dir", "model", "train",
              "corpus", "analysis"});
  ExperimentConfig c;
  read(j, "name", c.name);
  read(j, "precision", c.precision);
  read(j, "seed", c.seed);
  read(j, "out_dir", c.out_dir);
  if (j.contains("model")) c.model = parse_model(j.at("model"), "model");
  if (j.contains("train")) c.train = parse_train(j.at("train"), "train");
  if (j.contains("corpus")) c.corpus = parse_corpus(j.at("corpus"), "corpus");
  if (j.contains("analysis"))
    c.analysis = parse_analysis(j.at("analysis"), "analysis");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["precision"] = cfg.precision;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["model"] = model_json(cfg.model);
  j["train"] = train_json(cfg.train);
  j["corpus"] = corpus_json(cfg.corpus);
  j["analysis"] = analysis_json(cfg.analysis);
  return j.dump(2) + "\n";
}

namespace {

ModelConfig shape_82m() {
  ModelConfig m;
  m.n_layers = 8;
  m.n_heads = 8;
  m.n_kv_heads = 8;
  m.hidden = 512;
  m.ffn = 1792;
  m.vocab = kByteVocab;
  m.max_seq = 512;
  return m;
}

ExperimentConfig base_preset(const std::string& name, ModelConfig m) {
  ExperimentConfig c;
  c.name = name;
  c.model = std::move(m);
  c.corpus.synthetic = "mixture";
  return c;
}

}  // namespace

ExperimentConfig preset_config(const std::string& name) {
  // model shapes
  if (name == "2M-model") {
    ModelConfig m;
    m.n_layers = 4;
    m.n_heads = 2;
    m.n_kv_heads = 2;
    m.hidden = 16;
    m.ffn = 56;
    m.vocab = kByteVocab;
    m.max_seq = 128;
    return base_preset(name, m);
  }
  if (name == "82M-model") return base_preset(name, shape_82m());
  if (name == "180M-model") {
    ModelConfig m;
    m.n_layers = 12;
    m.n_heads = 12;
    m.n_kv_heads = 12;
    m.hidden = 768;
    m.ffn = 2688;
    m.vocab = kByteVocab;
    m.max_seq = 512;
    return base_preset(name, m);
  }
  if (name == "468M-model") {
    ModelConfig m;
    m.n_layers = 24;
    m.n_heads = 16;
    m.n_kv_heads = 16;
    m.hidden = 1024;
    m.ffn = 3584;
    m.vocab = kByteVocab;
    m.max_seq = 512;
    return base_preset(name, m);
  }

  // residual-policy rows on the 8-layer shape
  if (name == "table2-vanilla") return base_preset(name, shape_82m());
  if (name == "table2-denseformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Denseformer;
    return c;
  }
  if (name == "table2-neutreno") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Neutreno;
    c.model.residual.neutreno_lambda = 0.4;
    return c;
  }
  if (name == "table2-identity-resformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Identity;
    c.model.residual.lambda1 = 0.5;
    c.model.residual.lambda2 = 0.5;
    return c;
  }
  if (name == "table2-dense-resformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Dense;
    c.model.residual.dense_learnable = true;
    return c;
  }
  if (name == "table2-learnable-resformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Learnable;
    c.model.residual.lambda1 = 0.5;
    c.model.residual.lambda2 = 0.5;
    return c;
  }
  if (name == "table2-constant-resformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Constant;
    c.model.residual.lambda1 = 2.0;
    c.model.residual.lambda2 = 1.0;
    return c;
  }
  if (name == "table2-sparse-resformer") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Sparse;
    c.model.residual.target_layers = {6, 7, 8};
    c.model.residual.lambda1 = 1.0;
    c.model.residual.lambda2 = 0.0;
    return c;
  }
  if (name == "table2-sparse-resformer-lambda5") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::Sparse;
    c.model.residual.target_layers = {6, 7, 8};
    c.model.residual.lambda1 = 5.0;
    c.model.residual.lambda2 = 1.0;
    return c;
  }
  if (name == "table2-resformer-plus") {
    auto c = base_preset(name, shape_82m());
    c.model.residual.kind = ResidualKind::Resformer;
    c.model.residual.variant = ResformerVariant::LearnablePlus;
    return c;
  }

  // KV-efficient layouts on the 8-layer shape
  if (name == "table10-gqa2") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::GQA;
    c.model.layout.group = 2;
    c.model.n_kv_heads = 4;
    return c;
  }
  if (name == "table10-gqa8") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::GQA;
    c.model.layout.group = 8;
    c.model.n_kv_heads = 1;
    return c;
  }
  if (name == "table10-cla2") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::CLA;
    c.model.layout.period = 2;
    c.model.layout.shared = ClaShared::KeysValues;
    return c;
  }
  if (name == "table10-cla2-gqa4") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::CLA;
    c.model.layout.period = 2;
    c.model.layout.shared = ClaShared::KeysValues;
    c.model.n_kv_heads = 2;  // GQA4 on top of CLA2
    return c;
  }
  if (name == "table10-svformer") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::SVFormer;
    return c;
  }
  if (name == "table10-svformer-gqa4") {
    auto c = base_preset(name, shape_82m());
    c.model.layout.kind = LayoutKind::SVFormer;
    c.model.n_kv_heads = 2;
    return c;
  }

  // the two warmup schedules used across the experiment suites
  if (name == "warmup-120") {
    auto c = base_preset(name, shape_82m());
    c.train.warmup_steps = 120;
    return c;
  }
  if (name == "warmup-1200") {
    auto c = base_preset(name, shape_82m());
    c.train.warmup_steps = 1200;
    c.train.total_steps = 10000;
    return c;
  }

  throw ConfigError("config: unknown preset \"" + name + "\"");
}

std::vector<std::string> preset_names() {
  return {"2M-model",
          "82M-model",
          "180M-model",
          "468M-model",
          "table2-vanilla",
          "table2-denseformer",
          "table2-neutreno",
          "table2-identity-resformer",
          "table2-dense-resformer",
          "table2-learnable-resformer",
          "table2-constant-resformer",
          "table2-sparse-resformer",
          "table2-sparse-resformer-lambda5",
          "table2-resformer-plus",
          "table10-gqa2",
          "table10-gqa8",
          "table10-cla2",
          "table10-cla2-gqa4",
          "table10-svformer",
          "table10-svformer-gqa4",
          "warmup-120",
          "warmup-1200"};
}

}  // namespace reslab
