// Measurement instruments over captured traces and loss curves: attention
// importance and entropy, state norms, similarity probes, PCA feature
// counts, ablation sweeps, and loss-curve crossing detection.

#pragma once

#include <string>
#include <vector>

#include "reslab/mat.hpp"
#include "reslab/trainer.hpp"

namespace reslab {

// Mean received attention per key position: a_i = (1/l) sum_rows A[row, i].
// A must be causal and row-stochastic within 1e-5.
std::vector<double> token_importance(const Mat& A);

// Shannon entropy in nats of a normalized to sum 1; zero entries contribute 0.
double attention_entropy(const std::vector<double>& a);

enum class StateKind { Value, Hidden };

// L2 norm of the chosen state at one token position, for every layer.
std::vector<double> state_norms(const LayerTrace& trace, StateKind which,
                                int position);

struct SimilarityResult {
  double mean_cosine = 0;
  int zero_rows = 0;
  int rows_used = 0;
};

// Row-wise cosine between two equal-shape matrices, averaged over positions.
SimilarityResult value_similarity(const Mat& ref, const Mat& layer);

// Mean pairwise cosine between distinct rows of one matrix.
SimilarityResult token_pair_similarity(const Mat& v);

// (N+1)x(N+1) mean per-token cosine between hidden states H_0..H_N.
Mat layer_similarity_matrix(const LayerTrace& trace);

struct PcaResult {
  int count = 0;
  bool no_variance = false;
};

// Smallest k whose top-k eigenvalues of the centered covariance explain
// `threshold` of the variance.
PcaResult pca_core_features(const Mat& h, double threshold = 0.99);

struct CriticalPointResult {
  bool crossed = false;
  int step = 0;  // first index from which b stays strictly below a
  bool extrapolated = false;
  double predicted_step = 0;  // regression root when the series never cross
};

// Loss-curve crossing: a is the early leader, b the curve expected to catch
// up. Both series are smoothed by a trailing mean of `window` points. When b
// never overtakes within the data, a linear fit of the last `regress_last`
// gap points predicts the crossing if the gap is closing.
CriticalPointResult critical_point(const std::vector<double>& loss_a,
                                   const std::vector<double>& loss_b,
                                   int window = 10, int regress_last = 1000);

std::vector<double> trailing_mean(const std::vector<double>& x, int window);

// Held-out loss with the last k attention or MLP branches bypassed. Index 0
// of the result is the unablated baseline; entry k corresponds to dropping k
// modules from the back. Layer 1 is never ablated, so k_max <= N - 1.
template <typename T>
std::vector<double> ablation_sweep(const ModelParams<T>& params,
                                   const Corpus& corpus, const TrainConfig& cfg,
                                   AblationKind kind, int k_max,
                                   uint64_t eval_seed = 1234) {
  if (k_max < 0 || k_max > params.config.n_layers - 1)
    throw UsageError("ablation_sweep: k_max must be in 0..N-1");
  NoGrad ng;
  const int64_t window = cfg.seq_len + 1;
  std::vector<double> losses;
  for (int k = 0; k <= k_max; ++k) {
    AblationSpec ab{k == 0 ? AblationKind::None : kind, k};
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
        auto r = model_forward<T>(inputs, params, {}, ab);
        dsum += static_cast<double>(cross_entropy(r.logits, targets).data()[0]);
      }
      sum += dsum / cfg.eval_windows;
      counted += 1;
    }
    if (counted == 0) throw DataError("ablation_sweep: no usable eval tail");
    losses.push_back(sum / counted);
  }
  return losses;
}

}  // namespace reslab
