#include "reslab/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace reslab {

namespace {

double row_dot(const Mat& a, const Mat& b, int ra, int rb) {
  double s = 0;
  for (int j = 0; j < a.cols; ++j) s += a(ra, j) * b(rb, j);
  return s;
}

double row_norm(const Mat& m, int r) { return std::sqrt(row_dot(m, m, r, r)); }

// Symmetric Jacobi eigenvalue sweep; returns eigenvalues, unordered.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        double theta = (a[q * n + q] - a[p * n + p]) / (2 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1));
        double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (int i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

}  // namespace

std::vector<double> token_importance(const Mat& A) {
  int l = A.rows;
  if (l < 1 || A.cols != l)
    throw ShapeError("token_importance: attention matrix must be square");
  for (int i = 0; i < l; ++i) {
    double s = 0;
    for (int j = 0; j < l; ++j) {
      if (A(i, j) < -1e-12)
        throw DataError("token_importance: negative attention weight at row " +
                        std::to_string(i));
      if (j > i && std::abs(A(i, j)) > 1e-12)
        throw DataError("token_importance: nonzero weight above the diagonal");
      s += A(i, j);
    }
    if (std::abs(s - 1.0) > 1e-5)
      throw DataError("token_importance: row " + std::to_string(i) +
                      " sums to " + std::to_string(s));
  }
  std::vector<double> a(l, 0.0);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) a[j] += A(i, j);
  for (auto& v : a) v /= l;
  return a;
}

double attention_entropy(const std::vector<double>& a) {
  double sum = 0;
  for (double v : a) {
    if (v < 0) throw DataError("attention_entropy: negative entry");
    sum += v;
  }
  if (sum <= 0) throw DataError("attention_entropy: all-zero importance vector");
  double e = 0;
  for (double v : a) {
    double p = v / sum;
    if (p > 0) e -= p * std::log(p);
  }
  return e;
}

std::vector<double> state_norms(const LayerTrace& trace, StateKind which,
                                int position) {
  std::vector<double> out;
  for (const auto& layer : trace.layers) {
    const Mat& m = which == StateKind::Value ? layer.v_post : layer.h;
    if (position < 0 || position >= m.rows)
      throw UsageError("state_norms: position " + std::to_string(position) +
                       " outside 0.." + std::to_string(m.rows - 1));
    out.push_back(row_norm(m, position));
  }
  return out;
}

SimilarityResult value_similarity(const Mat& ref, const Mat& layer) {
  if (ref.rows != layer.rows || ref.cols != layer.cols)
    throw ShapeError("value_similarity: shape mismatch");
  SimilarityResult r;
  double sum = 0;
  for (int i = 0; i < ref.rows; ++i) {
    double na = row_norm(ref, i), nb = row_norm(layer, i);
    if (na == 0 || nb == 0) {
      r.zero_rows += 1;
      continue;
    }
    sum += row_dot(ref, layer, i, i) / (na * nb);
    r.rows_used += 1;
  }
  if (r.rows_used > 0) r.mean_cosine = sum / r.rows_used;
  return r;
}

SimilarityResult token_pair_similarity(const Mat& v) {
  SimilarityResult r;
  double sum = 0;
  for (int i = 0; i < v.rows; ++i) {
    double ni = row_norm(v, i);
    if (ni == 0) {
      r.zero_rows += 1;
      continue;
    }
    for (int j = i + 1; j < v.rows; ++j) {
      double nj = row_norm(v, j);
      if (nj == 0) continue;
      sum += row_dot(v, v, i, j) / (ni * nj);
      r.rows_used += 1;
    }
  }
  if (r.rows_used > 0) r.mean_cosine = sum / r.rows_used;
  return r;
}

Mat layer_similarity_matrix(const LayerTrace& trace) {
  std::vector<const Mat*> states;
  states.push_back(&trace.h0);
  for (const auto& layer : trace.layers) states.push_back(&layer.h);
  int n = int(states.size());
  if (n < 2 || trace.h0.rows < 1)
    throw UsageError("layer_similarity_matrix: trace has no hidden states");
  Mat out(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = a; b < n; ++b) {
      double sum = 0;
      int used = 0;
      for (int i = 0; i < states[a]->rows; ++i) {
        double na = row_norm(*states[a], i), nb = row_norm(*states[b], i);
        if (na == 0 && nb == 0) {
          sum += 1.0;  // identical zero states
          ++used;
        } else if (na == 0 || nb == 0) {
          ++used;
        } else {
          sum += row_dot(*states[a], *states[b], i, i) / (na * nb);
          ++used;
        }
      }
      out(a, b) = out(b, a) = sum / used;
    }
  return out;
}

PcaResult pca_core_features(const Mat& h, double threshold) {
  if (h.rows < 2) throw UsageError("pca_core_features: need at least 2 rows");
  if (threshold <= 0 || threshold > 1)
    throw UsageError("pca_core_features: threshold outside (0, 1]");
  int n = h.rows, d = h.cols;
  std::vector<double> mean(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[j] += h(i, j);
  for (auto& m : mean) m /= n;

  std::vector<double> cov(size_t(d) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      double ca = h(i, a) - mean[a];
      for (int b = a; b < d; ++b)
        cov[size_t(a) * d + b] += ca * (h(i, b) - mean[b]);
    }
  double total = 0;
  for (int a = 0; a < d; ++a) {
    for (int b = 0; b < a; ++b) cov[size_t(a) * d + b] = cov[size_t(b) * d + a];
    total += cov[size_t(a) * d + a];
  }
  if (total < 1e-18 * n) return {0, true};

  auto ev = jacobi_eigenvalues(cov, d);
  std::sort(ev.begin(), ev.end(), std::greater<double>());
  double acc = 0;
  for (int k = 0; k < d; ++k) {
    acc += std::max(ev[k], 0.0);
    if (acc / total >= threshold - 1e-12) return {k + 1, false};
  }
  return {d, false};
}

std::vector<double> trailing_mean(const std::vector<double>& x, int window) {
  if (window < 1) throw UsageError("trailing_mean: window must be >= 1");
  std::vector<double> out(x.size());
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= size_t(window)) acc -= x[i - window];
    out[i] = acc / double(std::min<size_t>(i + 1, window));
  }
  return out;
}

CriticalPointResult critical_point(const std::vector<double>& loss_a,
                                   const std::vector<double>& loss_b,
                                   int window, int regress_last) {
  if (loss_a.size() != loss_b.size())
    throw UsageError("critical_point: series lengths differ");
  if (loss_a.empty()) throw UsageError("critical_point: empty series");
  auto sa = trailing_mean(loss_a, window);
  auto sb = trailing_mean(loss_b, window);
  int n = int(sa.size());

  // First index from which b stays strictly below a. Strictness makes a
  // self-comparison report "not crossed" instead of a crossing at step 0.
  int t = n;
  for (int i = n - 1; i >= 0; --i) {
    if (sb[i] < sa[i])
      t = i;
    else
      break;
  }
  CriticalPointResult r;
  if (t < n) {
    r.crossed = true;
    r.step = t;
    return r;
  }

  // Not crossed: fit gap = b - a over the last m points, predict the root.
  int m = std::min<int>(regress_last, n);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = n - m; i < n; ++i) {
    double x = i, y = sb[i] - sa[i];
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double denom = m * sxx - sx * sx;
  if (m >= 2 && std::abs(denom) > 1e-30) {
    double slope = (m * sxy - sx * sy) / denom;
    double intercept = (sy - slope * sx) / m;
    if (slope < 0) {
      r.extrapolated = true;
      r.predicted_step = -intercept / slope;
    }
  }
  return r;
}

}  // namespace reslab
