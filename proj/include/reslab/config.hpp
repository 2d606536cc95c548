// Declarative experiment configs: JSON parsing with strict field checking,
// serialization, and named presets for the standard model shapes, residual
// policies, and KV-sharing layouts.

#pragma once

#include <string>
#include <vector>

#include "reslab/model.hpp"
#include "reslab/trainer.hpp"

namespace reslab {

struct CorpusSource {
  std::string name;
  std::string path;  // token file; empty for synthetic domains
  double weight = 0;
};

struct CorpusConfig {
  // Either explicit token-file sources or a named synthetic generator.
  std::vector<CorpusSource> sources;
  std::string synthetic;  // "", "mixture", "markov", "repeat"
  int64_t synthetic_tokens = 65536;
  uint64_t synthetic_seed = 0;
  int repeat_period = 16;

  void validate() const;
};

struct AnalysisConfig {
  bool enabled = true;
  int sample_sequences = 100;
  double pca_threshold = 0.99;
  int critical_window = 10;
  int regress_last = 1000;
};

struct ExperimentConfig {
  std::string name = "run";
  std::string precision = "f64";  // "f32" or "f64"
  uint64_t seed = 0;
  std::string out_dir = "runs";
  ModelConfig model;
  TrainConfig train;
  CorpusConfig corpus;
  AnalysisConfig analysis;

  void validate() const;
};

// Strict JSON: unknown fields are rejected with their full path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

// Named presets for the standard tables; throws ConfigError for unknown names.
ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace reslab
