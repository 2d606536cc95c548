// Experiment runner: executes a config end to end (corpus, training,
// checkpoints, metrics, analysis report), compares finished runs, and
// re-analyzes stored checkpoints.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reslab/analysis.hpp"
#include "reslab/config.hpp"

namespace reslab {

struct RunOptions {
  bool resume = false;
  bool force = false;
  std::optional<uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::string> out_dir;
  // Stop this session once the global step reaches the cap, leaving a
  // checkpoint to resume from. The schedule still follows total_steps.
  std::optional<int> step_limit;
};

struct RunSummary {
  std::string run_dir;
  int steps = 0;
  double final_train_loss = 0;
  double final_valid_loss = 0;
  double best_valid_loss = 0;
};

// Full pipeline. The run directory is out_dir/name; an existing directory is
// refused unless --resume continues it or --force replaces it.
RunSummary run_experiment(ExperimentConfig cfg, const RunOptions& opts = {});

struct CompareResult {
  std::vector<std::string> runs;
  std::vector<double> final_valid;
  std::vector<double> best_valid;
  CriticalPointResult critical;  // second run vs the first
};

// Reads each run's metric streams, emits deltas against the first run plus a
// crossing estimate, and writes compare.json / compare.csv under out_dir.
CompareResult compare_runs(const std::vector<std::string>& run_dirs,
                           const std::string& out_dir, int smooth_window = 10,
                           int regress_last = 1000);

// Rebuilds the analysis report from a finished run's checkpoint.
void analyze_run(const std::string& run_dir);

// Materializes the corpus a config describes (token files or synthetic).
Corpus build_corpus(const CorpusConfig& cfg, int vocab);

// Reads one numeric field from every line of a JSONL metrics file.
std::vector<double> read_metric_series(const std::string& path,
                                       const std::string& field);

}  // namespace reslab
