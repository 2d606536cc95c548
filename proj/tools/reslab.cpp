// Command-line front end: config-driven training runs, run comparison,
// corpus generation, checkpoint analysis, and config validation.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "reslab/harness.hpp"

namespace fs = std::filesystem;
using namespace reslab;

namespace {

ExperimentConfig resolve_config(const std::string& config_path,
                                const std::string& preset) {
  if (!config_path.empty() && !preset.empty())
    throw ConfigError("cli: pass either --config or --preset, not both");
  if (!config_path.empty()) return load_config(config_path);
  if (!preset.empty()) return preset_config(preset);
  throw ConfigError("cli: --config or --preset is required");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer residual-policy laboratory"};
  app.require_subcommand(1);

  std::string config_path, preset, out_dir, precision;
  bool resume = false, force = false;
  uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Experiment config file (JSON)");
    cmd->add_option("--preset", preset, "Named preset configuration");
    cmd->add_option("--out", out_dir, "Output directory override");
    cmd->add_option("--precision", precision, "Float width: f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--seed", seed, "Seed override")
        ->each([&](const std::string&) { seed_set = true; });
  };

  auto* cmd_run = app.add_subcommand("run", "Train a model from a config");
  add_common(cmd_run);
  cmd_run->add_flag("--resume", resume, "Continue from the latest checkpoint");
  cmd_run->add_flag("--force", force, "Replace an existing run directory");

  std::vector<std::string> cmp_dirs;
  std::string cmp_out = "compare";
  int cmp_window = 10, cmp_regress = 1000;
  auto* cmd_cmp = app.add_subcommand("compare", "Compare finished runs");
  cmd_cmp->add_option("runs", cmp_dirs, "Run directories (first = reference)")
      ->required()
      ->expected(-2);
  cmd_cmp->add_option("--out", cmp_out, "Comparison output directory");
  cmd_cmp->add_option("--window", cmp_window, "Smoothing window");
  cmd_cmp->add_option("--regress-last", cmp_regress,
                      "Points used for crossing extrapolation");

  std::string gen_kind = "mixture", gen_out = "corpus";
  int64_t gen_tokens = 65536;
  uint64_t gen_seed = 0;
  int gen_period = 16;
  auto* cmd_gen = app.add_subcommand("gen-corpus", "Write synthetic token files");
  cmd_gen->add_option("--kind", gen_kind, "repeat, markov, or mixture")
      ->check(CLI::IsMember({"repeat", "markov", "mixture"}));
  cmd_gen->add_option("--tokens", gen_tokens, "Tokens per domain");
  cmd_gen->add_option("--seed", gen_seed, "Generator seed");
  cmd_gen->add_option("--period", gen_period, "Repeat-kind period");
  cmd_gen->add_option("--out", gen_out, "Output directory");

  std::string analyze_dir;
  auto* cmd_an = app.add_subcommand("analyze", "Rebuild a run's report");
  cmd_an->add_option("run", analyze_dir, "Run directory")->required();

  auto* cmd_val = app.add_subcommand("validate-config", "Check a config");
  add_common(cmd_val);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(cmd_run)) {
      auto cfg = resolve_config(config_path, preset);
      RunOptions opts;
      opts.resume = resume;
      opts.force = force;
      if (seed_set) opts.seed = seed;
      if (!precision.empty()) opts.precision = precision;
      if (!out_dir.empty()) opts.out_dir = out_dir;
      auto s = run_experiment(cfg, opts);
      std::cout << "run " << s.run_dir << " finished: steps " << s.steps
                << ", train loss " << s.final_train_loss << ", valid loss "
                << s.final_valid_loss << "\n";
    } else if (app.got_subcommand(cmd_cmp)) {
      auto r = compare_runs(cmp_dirs, cmp_out, cmp_window, cmp_regress);
      for (size_t i = 0; i < r.runs.size(); ++i)
        std::cout << r.runs[i] << ": final " << r.final_valid[i] << ", best "
                  << r.best_valid[i] << "\n";
      if (r.critical.crossed)
        std::cout << "critical point: step " << r.critical.step << "\n";
      else if (r.critical.extrapolated)
        std::cout << "critical point: not crossed, predicted step "
                  << r.critical.predicted_step << "\n";
      else
        std::cout << "critical point: not crossed\n";
    } else if (app.got_subcommand(cmd_gen)) {
      fs::create_directories(gen_out);
      if (gen_kind == "mixture") {
        auto mix = gen_mixture(gen_tokens, gen_seed);
        for (const auto& d : mix.domains) {
          auto path = (fs::path(gen_out) / (d.name + ".tok")).string();
          write_tokens(path, d.tokens, kByteVocab);
          std::cout << path << " weight " << d.weight << " tokens "
                    << d.tokens.size() << "\n";
        }
      } else {
        std::vector<uint32_t> toks =
            gen_kind == "repeat"
                ? gen_repeat(gen_tokens, gen_period, gen_seed, kByteVocab)
                : gen_markov(gen_tokens, default_markov_chain(gen_seed + 17, 8),
                             gen_seed);
        auto path = (fs::path(gen_out) / (gen_kind + ".tok")).string();
        write_tokens(path, toks, kByteVocab);
        std::cout << path << " tokens " << toks.size() << "\n";
      }
    } else if (app.got_subcommand(cmd_an)) {
      analyze_run(analyze_dir);
      std::cout << "report written under " << analyze_dir << "/report\n";
    } else if (app.got_subcommand(cmd_val)) {
      auto cfg = resolve_config(config_path, preset);
      if (!precision.empty()) cfg.precision = precision;
      cfg.validate();
      std::cout << "config ok: " << cfg.name << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
