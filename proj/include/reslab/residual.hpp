// Residual-topology math: the value-residual family, NeuTRENO and
// DenseFormer adjustments, site ablations, residual mappings, and
// post-residual re-scaling.

#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "reslab/tensor.hpp"

namespace reslab {

enum class ResidualKind {
  Vanilla,
  Neutreno,
  Denseformer,
  Resformer,
  Svformer,  // accepted in specs; resolved into the attention layout
  SiteAblation,
};

enum class ResformerVariant {
  Identity,
  Constant,
  Learnable,
  LearnablePlus,
  Sparse,
  Dense,
};

enum class ResidualSite { Query, Key, Attention, Hidden };

enum class ResidualMapping { SharedAttention, IdentityMap, CrossLayerAttention };

struct ResidualSpec {
  ResidualKind kind = ResidualKind::Vanilla;

  // neutreno: fixed, non-trainable
  double neutreno_lambda = 0.4;

  // resformer family
  ResformerVariant variant = ResformerVariant::Identity;
  double lambda1 = 0.5;
  double lambda2 = 0.5;                  // constants, or learnable inits
  std::vector<int> target_layers;        // sparse: 1-based, subset of 2..N
  std::vector<std::vector<double>> dense_matrix;  // row n-1 holds lambda_{n,1..n}
  bool dense_learnable = false;
  ResidualMapping mapping = ResidualMapping::SharedAttention;
  bool rescale = false;

  // site ablation
  ResidualSite site = ResidualSite::Hidden;
  double site_lambda1 = 0.5;
  double site_lambda2 = 0.5;

  bool learnable() const {
    if (kind == ResidualKind::Denseformer) return true;
    if (kind != ResidualKind::Resformer) return false;
    return variant == ResformerVariant::Learnable ||
           variant == ResformerVariant::LearnablePlus ||
           (variant == ResformerVariant::Dense && dense_learnable);
  }

  // True when layer n (1-based) mixes V1 into its value.
  bool value_residual_at(int n) const {
    if (kind != ResidualKind::Resformer || n < 2) return false;
    if (mapping != ResidualMapping::SharedAttention) return false;
    if (variant == ResformerVariant::Sparse) {
      for (int t : target_layers)
        if (t == n) return true;
      return false;
    }
    return true;
  }

  // True when layer n's own W^V is omitted (pure V1 replacement).
  bool omits_wv(int n) const {
    if (kind != ResidualKind::Resformer) return false;
    if (variant != ResformerVariant::Sparse) return false;
    if (!value_residual_at(n)) return false;
    return lambda2 == 0.0;
  }

  void validate(int n_layers) const;
};

inline void ResidualSpec::validate(int n_layers) const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  switch (kind) {
    case ResidualKind::Resformer:
      if (!std::isfinite(lambda1) || !std::isfinite(lambda2))
        fail("residual.resformer: lambda constants must be finite");
      if (variant == ResformerVariant::Sparse) {
        for (int t : target_layers) {
          if (t < 2 || t > n_layers)
            fail("residual.resformer: sparse target layer " + std::to_string(t) +
                 " outside 2.." + std::to_string(n_layers));
        }
        if (target_layers.empty())
          fail("residual.resformer: sparse variant needs target_layers");
      }
      if (variant == ResformerVariant::Dense) {
        if (!dense_matrix.empty()) {
          if (static_cast<int>(dense_matrix.size()) != n_layers)
            fail("residual.resformer: dense matrix needs one row per layer");
          for (int n = 1; n <= n_layers; ++n) {
            const auto& row = dense_matrix[n - 1];
            if (static_cast<int>(row.size()) != n)
              fail("residual.resformer: dense row " + std::to_string(n) +
                   " must have " + std::to_string(n) + " entries");
          }
          // Coefficients on earlier values at layer 1 would be acausal.
          if (n_layers >= 1 && !dense_matrix[0].empty() &&
              dense_matrix[0][0] == 0.0)
            fail("residual.resformer: lambda_{1,1} must be nonzero");
        }
      }
      if (variant != ResformerVariant::Sparse && variant != ResformerVariant::Dense) {
        // lambda1 applies from layer 2 on; a layer-1 V1 mix is the identity,
        // so nothing to reject here.
      }
      break;
    case ResidualKind::Neutreno:
      if (!std::isfinite(neutreno_lambda))
        fail("residual.neutreno: lambda must be finite");
      break;
    case ResidualKind::SiteAblation:
      if (!std::isfinite(site_lambda1) || !std::isfinite(site_lambda2))
        fail("residual.site: lambda constants must be finite");
      break;
    default:
      break;
  }
}

// A residual coefficient: either a fixed constant or a trainable scalar.
template <typename T>
struct LambdaRef {
  bool learnable = false;
  double c = 0.0;
  Tensor<T> t;

  static LambdaRef constant(double v) { return {false, v, {}}; }
  static LambdaRef trainable(Tensor<T> p) { return {true, 0.0, std::move(p)}; }

  double value() const { return learnable ? static_cast<double>(t.data()[0]) : c; }

  Tensor<T> apply(const Tensor<T>& x) const {
    return learnable ? scalar_mul(t, x) : scale(x, c);
  }
};

// Eq-5 value mix: V'_n = l1*V1 + l2*(H_{n-1} W^V_n). `v_own` is the layer's
// own projection; undefined when the layer omits W^V.
template <typename T>
Tensor<T> resformer_value(int layer, const Tensor<T>& v1, const Tensor<T>& v_own,
                          const LambdaRef<T>& l1, const LambdaRef<T>& l2) {
  if (layer < 2 && l1.value() != 0.0 && !l1.learnable)
    throw ConfigError("residual.resformer: lambda1 must be 0 at layer 1");
  if (!v_own.defined()) return l1.apply(v1);
  return add(l1.apply(v1), l2.apply(v_own));
}

// Learnable-Plus init: lambda_{n,1} = scale * softmax(lambda')_n with scale
// initialized to N. Plain math used by tests and init_params.
inline std::vector<double> learnable_plus_init(int n_layers,
                                               const std::vector<double>& lambda_prime,
                                               double lambda_scale) {
  if (static_cast<int>(lambda_prime.size()) != n_layers)
    throw ConfigError("learnable_plus_init: lambda' must have one entry per layer");
  double mx = lambda_prime[0];
  for (double v : lambda_prime) mx = std::max(mx, v);
  double z = 0;
  std::vector<double> out(n_layers);
  for (int i = 0; i < n_layers; ++i) {
    out[i] = std::exp(lambda_prime[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v = lambda_scale * v / z;
  return out;
}

// Live reparameterization of the same quantity inside the graph.
template <typename T>
Tensor<T> learnable_plus_lambda1(const Tensor<T>& lambda_prime,
                                 const Tensor<T>& lambda_scale, int layer) {
  return scalar_mul(lambda_scale, at(softmax_vec(lambda_prime), layer - 1));
}

// Dense-ResFormer: V'_n = row_n * own projection + sum_{i<n} row_i * V_i.
// The bank holds each earlier layer's pre-residual projection.
template <typename T>
Tensor<T> dense_resformer_value(int layer, const std::vector<Tensor<T>>& value_bank,
                                const Tensor<T>& v_own,
                                const std::vector<LambdaRef<T>>& row) {
  if (static_cast<int>(row.size()) != layer)
    throw UsageError("dense_resformer_value: row length " +
                     std::to_string(row.size()) + " for layer " +
                     std::to_string(layer));
  if (static_cast<int>(value_bank.size()) < layer - 1)
    throw UsageError("dense_resformer_value: value bank missing entries");
  Tensor<T> acc = row[layer - 1].apply(v_own);
  for (int i = 0; i < layer - 1; ++i)
    acc = add(acc, row[i].apply(value_bank[i]));
  return acc;
}

// Eq-3: U'_n = U_n + lambda (V1 - V_n). lambda fixed, non-trainable.
template <typename T>
Tensor<T> neutreno_adjust(const Tensor<T>& u, const Tensor<T>& v1,
                          const Tensor<T>& vn, double lambda) {
  return add(u, scale(sub(v1, vn), lambda));
}

// Eq-4: H_n = row_n * block output + sum_{i<n} row_i * H_i, bank = {H_0..}.
template <typename T>
Tensor<T> denseformer_combine(const Tensor<T>& block_out,
                              const std::vector<Tensor<T>>& hidden_bank,
                              const Tensor<T>& lambda_row) {
  int64_t n = static_cast<int64_t>(hidden_bank.size());
  if (lambda_row.size() != n + 1)
    throw UsageError("denseformer_combine: row length " +
                     std::to_string(lambda_row.size()) + " for " +
                     std::to_string(n) + " banked states");
  Tensor<T> acc = scalar_mul(at(lambda_row, n), block_out);
  for (int64_t i = 0; i < n; ++i)
    acc = add(acc, scalar_mul(at(lambda_row, i), hidden_bank[i]));
  return acc;
}

// Generic two-term blend used at the query/key/attention/hidden sites.
template <typename T>
Tensor<T> site_residual(const Tensor<T>& x1, const Tensor<T>& xn, double l1,
                        double l2) {
  return add(scale(x1, l1), scale(xn, l2));
}

// Cross-layer attention mapping: softmax over concatenated per-head scores
// [Q K_n^T ; Q K_1^T]/sqrt(d_h), output = weights * concat(V_n, V_1).
template <typename T>
Tensor<T> cross_layer_attention(const Tensor<T>& q, const Tensor<T>& k,
                                const Tensor<T>& v, const Tensor<T>& k1,
                                const Tensor<T>& v1) {
  if (k1.shape() != k.shape() || v1.shape() != v.shape())
    throw ShapeError("cross_layer_attention: mismatched layer-1 shapes");
  double inv = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  Tensor<T> scores =
      concat_cols<T>({scale(matmul_nt(q, k), inv), scale(matmul_nt(q, k1), inv)});
  Tensor<T> w = concat_causal_softmax(scores);
  return matmul(w, concat_rows<T>({v, v1}));
}

// Identity mapping: add V1 straight onto the attention output.
template <typename T>
Tensor<T> identity_map_residual(const Tensor<T>& u, const Tensor<T>& v1) {
  return add(u, v1);
}

// Post-residual re-scaling: blend then restore V_n's per-row norm.
template <typename T>
Tensor<T> rescale_post_residual(const Tensor<T>& v1, const Tensor<T>& vn,
                                const LambdaRef<T>& l1, const LambdaRef<T>& l2,
                                int* zero_rows = nullptr) {
  Tensor<T> mix = add(l1.apply(v1), l2.apply(vn));
  return rescale_rows(mix, vn, zero_rows);
}

template <typename T>
Tensor<T> rescale_post_residual(const Tensor<T>& v1, const Tensor<T>& vn,
                                double l1, double l2, int* zero_rows = nullptr) {
  return rescale_post_residual(v1, vn, LambdaRef<T>::constant(l1),
                               LambdaRef<T>::constant(l2), zero_rows);
}

}  // namespace reslab
