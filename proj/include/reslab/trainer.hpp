// Training loop: AdamW with decoupled decay, linear warmup + cosine decay,
// gradient clipping, domain-weighted batch sampling, checkpoints, metrics.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "reslab/corpus.hpp"
#include "reslab/model.hpp"

namespace reslab {

struct TrainConfig {
  double peak_lr = 6e-4;
  double initial_lr = 1e-7;
  double final_lr_fraction = 0.1;
  int warmup_steps = 120;
  int total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  int64_t batch_tokens = 2048;
  int seq_len = 128;
  uint64_t seed = 0;
  int eval_interval = 100;
  double eval_fraction = 0.1;  // held-out tail share per domain
  int eval_windows = 8;        // windows per domain per evaluation

  int batch_rows() const { return int(batch_tokens / seq_len); }

  void validate() const {
    if (warmup_steps < 0 || warmup_steps > total_steps)
      throw ConfigError("train: warmup_steps outside 0..total_steps");
    if (final_lr_fraction <= 0 || final_lr_fraction > 1)
      throw ConfigError("train: final_lr_fraction outside (0, 1]");
    if (seq_len < 1) throw ConfigError("train: seq_len must be >= 1");
    if (batch_tokens % seq_len != 0)
      throw ConfigError("train: batch_tokens not divisible by seq_len");
    if (grad_clip_norm <= 0)
      throw ConfigError("train: grad_clip_norm must be positive");
    if (eval_fraction <= 0 || eval_fraction >= 1)
      throw ConfigError("train: eval_fraction outside (0, 1)");
  }
};

inline double lr_at_step(const TrainConfig& cfg, int t) {
  if (t < 0 || t > cfg.total_steps)
    throw UsageError("lr_at_step: step " + std::to_string(t) + " outside 0.." +
                     std::to_string(cfg.total_steps));
  if (t <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.peak_lr;
    double f = double(t) / cfg.warmup_steps;
    return cfg.initial_lr + f * (cfg.peak_lr - cfg.initial_lr);
  }
  double final_lr = cfg.final_lr_fraction * cfg.peak_lr;
  int span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return final_lr;
  double p = double(t - cfg.warmup_steps) / span;
  return final_lr + (cfg.peak_lr - final_lr) * 0.5 * (1.0 + std::cos(M_PI * p));
}

// ---- optimizer ----

template <typename T>
struct OptState {
  std::vector<std::vector<T>> m, v;
  int64_t step = 0;  // number of applied updates (bias-correction counter)

  static OptState init(const ModelParams<T>& params) {
    OptState s;
    for (const auto& p : params.params) {
      s.m.emplace_back(p.t.size(), T(0));
      s.v.emplace_back(p.t.size(), T(0));
    }
    return s;
  }
};

// Global L2 clip across all parameter gradients; returns the observed norm.
template <typename T>
double clip_grad_norm(ModelParams<T>& params, double max_norm) {
  if (max_norm <= 0) throw UsageError("clip_grad_norm: max_norm must be positive");
  double sq = 0;
  for (const auto& p : params.params) {
    if (!p.t.has_grad()) continue;
    for (T g : p.t.grad()) sq += double(g) * double(g);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (auto& p : params.params) {
      if (!p.t.has_grad()) continue;
      for (T& g : p.t.grad()) g = static_cast<T>(double(g) * s);
    }
  }
  return norm;
}

template <typename T>
void adamw_step(ModelParams<T>& params, OptState<T>& opt, double lr,
                const TrainConfig& cfg) {
  for (size_t i = 0; i < params.params.size(); ++i) {
    auto& p = params.params[i];
    if (!p.t.has_grad()) continue;
    for (T g : p.t.grad())
      if (!std::isfinite(double(g)))
        throw NumericError("adamw_step: non-finite gradient in " + p.name);
  }
  opt.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(opt.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(opt.step));
  for (size_t i = 0; i < params.params.size(); ++i) {
    auto& p = params.params[i];
    auto& th = p.t.data();
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    const bool has_g = p.t.has_grad();
    for (size_t j = 0; j < th.size(); ++j) {
      double g = has_g ? double(p.t.grad()[j]) : 0.0;
      double mj = cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * g;
      double vj = cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double upd = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      double w = double(th[j]) - lr * upd;
      if (p.weight_decay) w -= lr * cfg.weight_decay * double(th[j]);
      th[j] = static_cast<T>(w);
    }
  }
}

// ---- batches ----

// Rows of seq_len + 1 ids: positions 0..L-1 feed the model, 1..L are targets.
inline std::vector<std::vector<uint32_t>> sample_batch(const Corpus& corpus,
                                                       const TrainConfig& cfg,
                                                       std::mt19937_64& rng) {
  std::vector<double> cum;
  double acc = 0;
  for (const auto& d : corpus.domains) {
    acc += d.weight;
    cum.push_back(acc);
  }
  if (cum.empty() || std::abs(acc - 1.0) > 1e-9)
    throw ConfigError("sample_batch: corpus weights must sum to 1");
  const int64_t window = cfg.seq_len + 1;
  std::vector<std::vector<uint32_t>> rows;
  for (int r = 0; r < cfg.batch_rows(); ++r) {
    double u = double(rng() >> 11) * 0x1.0p-53;
    size_t di = cum.size() - 1;
    for (size_t i = 0; i < cum.size(); ++i)
      if (u < cum[i]) {
        di = i;
        break;
      }
    const auto& d = corpus.domains[di];
    if (int64_t(d.tokens.size()) < window)
      throw DataError("sample_batch: domain " + d.name + " shorter than " +
                      std::to_string(window) + " tokens");
    uint64_t span = d.tokens.size() - window + 1;
    uint64_t off = rng() % span;
    rows.emplace_back(d.tokens.begin() + off, d.tokens.begin() + off + window);
  }
  return rows;
}

// ---- train state and steps ----

template <typename T>
struct TrainState {
  ModelParams<T> params;
  OptState<T> opt;
  int step = 0;
  int64_t tokens_seen = 0;
  std::mt19937_64 rng;

  static TrainState init(const ModelConfig& mc, const TrainConfig& tc,
                         uint64_t seed) {
    TrainState s;
    s.params = init_params<T>(mc, seed);
    s.opt = OptState<T>::init(s.params);
    s.rng.seed(seed ^ 0x9e3779b97f4a7c15ULL);
    return s;
  }
};

struct StepResult {
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

template <typename T>
StepResult train_step(TrainState<T>& state,
                      const std::vector<std::vector<uint32_t>>& batch,
                      const TrainConfig& cfg) {
  if (state.step >= cfg.total_steps)
    throw UsageError("train_step: step " + std::to_string(state.step) +
                     " at or past total_steps");
  if (batch.empty()) throw DataError("train_step: empty batch");
  double lr = lr_at_step(cfg, state.step);
  state.params.zero_grad();

  Tensor<T> total;
  for (const auto& row : batch) {
    std::vector<uint32_t> inputs(row.begin(), row.end() - 1);
    std::vector<uint32_t> targets(row.begin() + 1, row.end());
    auto r = model_forward<T>(inputs, state.params);
    Tensor<T> loss = cross_entropy(r.logits, targets);
    total = total.defined() ? add(total, loss) : loss;
  }
  Tensor<T> mean_loss = scale(total, 1.0 / double(batch.size()));
  double loss = static_cast<double>(mean_loss.data()[0]);
  if (!std::isfinite(loss))
    throw NumericError("train_step: non-finite loss at step " +
                       std::to_string(state.step) + " (lr " + std::to_string(lr) +
                       ")");
  backward(mean_loss);
  double gnorm = clip_grad_norm(state.params, cfg.grad_clip_norm);
  adamw_step(state.params, state.opt, lr, cfg);
  state.step += 1;
  state.tokens_seen += int64_t(batch.size()) * int64_t(batch[0].size() - 1);
  return {loss, lr, gnorm};
}

// Macro-averaged validation loss on each domain's held-out tail: per-domain
// mean over fixed seeded windows, then a uniform average across domains.
template <typename T>
double evaluate(const ModelParams<T>& params, const Corpus& corpus,
                const TrainConfig& cfg, uint64_t eval_seed = 1234) {
  NoGrad ng;
  const int64_t window = cfg.seq_len + 1;
  double sum = 0;
  int counted = 0;
  for (const auto& d : corpus.domains) {
    int64_t tail = int64_t(double(d.tokens.size()) * cfg.eval_fraction);
    if (tail < window) continue;
    int64_t start = int64_t(d.tokens.size()) - tail;
    std::mt19937_64 rng(eval_seed);
    double dsum = 0;
    for (int w = 0; w < cfg.eval_windows; ++w) {
      uint64_t off = start + rng() % uint64_t(tail - window + 1);
      std::vector<uint32_t> inputs(d.tokens.begin() + off,
                                   d.tokens.begin() + off + cfg.seq_len);
      std::vector<uint32_t> targets(d.tokens.begin() + off + 1,
                                    d.tokens.begin() + off + window);
      auto r = model_forward<T>(inputs, params);
      dsum += static_cast<double>(cross_entropy(r.logits, targets).data()[0]);
    }
    sum += dsum / cfg.eval_windows;
    counted += 1;
  }
  if (counted == 0) throw DataError("evaluate: no domain has a usable tail");
  return sum / counted;
}

// ---- checkpoints ----

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void ck_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void ck_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t ck_ru32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t ck_ru64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void ck_str(std::ostream& os, const std::string& s) {
  ck_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}
inline std::string ck_rstr(std::istream& is) {
  uint32_t n = ck_ru32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

template <typename T>
void ck_vec(std::ostream& os, const std::vector<T>& v) {
  ck_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           std::streamsize(v.size() * sizeof(T)));
}
template <typename T>
void ck_rvec(std::istream& is, std::vector<T>& v, const std::string& name) {
  uint64_t n = ck_ru64(is);
  if (n != v.size())
    throw DataError("checkpoint: tensor " + name + " has " + std::to_string(n) +
                    " elements, model expects " + std::to_string(v.size()));
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(T)));
}

}  // namespace detail

template <typename T>
void checkpoint_save(const TrainState<T>& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint_save: cannot open " + path);
  os.write("RCK1", 4);
  detail::ck_u32(os, kCheckpointVersion);
  detail::ck_u32(os, uint32_t(sizeof(T)));
  detail::ck_u64(os, uint64_t(state.step));
  detail::ck_u64(os, uint64_t(state.tokens_seen));
  detail::ck_u64(os, uint64_t(state.opt.step));
  std::ostringstream rs;
  rs << state.rng;
  detail::ck_str(os, rs.str());
  detail::ck_u32(os, uint32_t(state.params.params.size()));
  for (size_t i = 0; i < state.params.params.size(); ++i) {
    const auto& p = state.params.params[i];
    detail::ck_str(os, p.name);
    detail::ck_vec(os, p.t.data());
    detail::ck_vec(os, state.opt.m[i]);
    detail::ck_vec(os, state.opt.v[i]);
  }
  if (!os) throw DataError("checkpoint_save: write failed for " + path);
}

// Loads into a state already initialized from the same configs; tensor names
// and shapes must line up with the stored stream.
template <typename T>
void checkpoint_load(TrainState<T>& state, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint_load: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RCK1", 4) != 0)
    throw DataError("checkpoint_load: bad magic in " + path);
  uint32_t version = detail::ck_ru32(is);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint_load: incompatible version " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  uint32_t prec = detail::ck_ru32(is);
  if (prec != sizeof(T))
    throw DataError("checkpoint_load: stored precision " + std::to_string(prec) +
                    " bytes, runtime uses " + std::to_string(sizeof(T)));
  state.step = int(detail::ck_ru64(is));
  state.tokens_seen = int64_t(detail::ck_ru64(is));
  state.opt.step = int64_t(detail::ck_ru64(is));
  std::istringstream rs(detail::ck_rstr(is));
  rs >> state.rng;
  uint32_t n = detail::ck_ru32(is);
  if (n != state.params.params.size())
    throw DataError("checkpoint_load: stored " + std::to_string(n) +
                    " tensors, model has " +
                    std::to_string(state.params.params.size()));
  for (size_t i = 0; i < n; ++i) {
    std::string name = detail::ck_rstr(is);
    auto& p = state.params.params[i];
    if (name != p.name)
      throw DataError("checkpoint_load: tensor " + std::to_string(i) + " is " +
                      name + ", model expects " + p.name);
    detail::ck_rvec(is, p.t.data(), name);
    detail::ck_rvec(is, state.opt.m[i], name);
    detail::ck_rvec(is, state.opt.v[i], name);
  }
  if (!is) throw DataError("checkpoint_load: truncated file " + path);
}

// ---- metrics ----

// One JSON object per line; floats at full round-trip precision.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path)
      : os_(path, std::ios::app) {
    if (!os_) throw DataError("metrics: cannot open " + path);
  }

  void log(int step, double lr, double train_loss, double grad_norm,
           int64_t tokens_seen, int64_t wall_ms) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%d,\"lr\":%.17g,\"train_loss\":%.17g,"
                  "\"grad_norm\":%.17g,\"tokens_seen\":%lld,\"wall_ms\":%lld}",
                  step, lr, train_loss, grad_norm,
                  static_cast<long long>(tokens_seen),
                  static_cast<long long>(wall_ms));
    os_ << buf << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

}  // namespace reslab
