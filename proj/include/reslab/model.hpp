// Decoder-only transformer with pluggable residual policies and KV-sharing
// layouts, per-layer trace capture, and KV-cache accounting.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reslab/mat.hpp"
#include "reslab/residual.hpp"
#include "reslab/tensor.hpp"

namespace reslab {

enum class LayoutKind { MHA, GQA, CLA, SVFormer };
enum class ClaShared { Keys, Values, KeysValues };

struct AttentionLayout {
  LayoutKind kind = LayoutKind::MHA;
  int group = 1;   // GQA: query heads per kv head
  int period = 2;  // CLA
  ClaShared shared = ClaShared::KeysValues;

  // 1-based layer whose keys/values layer n consumes.
  int key_source(int n) const {
    if (kind == LayoutKind::CLA &&
        (shared == ClaShared::Keys || shared == ClaShared::KeysValues))
      return n - ((n - 1) % period);
    return n;
  }
  int value_source(int n) const {
    if (kind == LayoutKind::SVFormer) return n >= 2 ? 1 : n;
    if (kind == LayoutKind::CLA &&
        (shared == ClaShared::Values || shared == ClaShared::KeysValues))
      return n - ((n - 1) % period);
    return n;
  }
  bool computes_k(int n) const { return key_source(n) == n; }
  bool computes_v(int n) const { return value_source(n) == n; }
};

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int n_kv_heads = 2;
  int hidden = 16;
  int ffn = 56;
  int vocab = 259;
  int max_seq = 64;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  bool tie_embeddings = false;
  AttentionLayout layout;
  ResidualSpec residual;
  int hidden_residual_start = 0;  // layers n <= s drop the +H_{n-1} skip

  int head_dim() const { return hidden / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }

  void validate() const {
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (hidden % n_heads != 0)
      throw ConfigError("model: hidden not divisible by n_heads");
    if (n_heads % n_kv_heads != 0)
      throw ConfigError("model: n_heads not divisible by n_kv_heads");
    if (head_dim() % 2 != 0)
      throw ConfigError("model: head dim must be even for rotary embedding");
    if (hidden_residual_start < 0 || hidden_residual_start > n_layers)
      throw ConfigError("model: hidden_residual_start outside 0..N");
    if (layout.kind == LayoutKind::GQA && n_kv_heads * layout.group != n_heads)
      throw ConfigError("model: GQA group inconsistent with n_kv_heads");
    if (layout.kind != LayoutKind::GQA && layout.group != 1 &&
        n_kv_heads == n_heads)
      throw ConfigError("model: layout group set without GQA");
    if (layout.kind == LayoutKind::CLA && layout.period < 1)
      throw ConfigError("model: CLA period must be >= 1");
    if (residual.kind == ResidualKind::Svformer &&
        layout.kind != LayoutKind::SVFormer)
      throw ConfigError("model: residual kind svformer requires svformer layout");
    if ((residual.kind == ResidualKind::Neutreno ||
         (residual.kind == ResidualKind::Resformer &&
          residual.mapping == ResidualMapping::IdentityMap)) &&
        kv_dim() != hidden)
      throw ConfigError("model: full-width value residual requires kv width = hidden");
    if (residual.kind == ResidualKind::Resformer && layout.kind == LayoutKind::SVFormer)
      throw ConfigError("model: value residual and svformer are mutually exclusive");
    residual.validate(n_layers);
  }
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm, wq, wk, wv, wo;
  Tensor<T> mlp_norm, w_gate, w_up, w_down;
  Tensor<T> res_lambda1, res_lambda2;  // learnable resformer scalars
  Tensor<T> dense_row;                 // learnable dense-resformer coefficients
  Tensor<T> df_row;                    // denseformer row, length n+1
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> t;
  bool weight_decay = true;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> embedding, final_norm, lm_head;
  Tensor<T> lambda_prime, lambda_scale;  // learnable-plus reparameterization
  std::vector<LayerParams<T>> layers;
  std::vector<Param<T>> params;  // declaration order; checkpoint order

  int64_t count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.t.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params) p.t.zero_grad();
  }
  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

namespace detail {

template <typename T>
Tensor<T> draw_matrix(std::mt19937_64& rng, int64_t in, int64_t out) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
  std::vector<T> v(in * out);
  for (auto& e : v) e = static_cast<T>(dist(rng));
  Tensor<T> t = Tensor<T>::from({in, out}, std::move(v), true);
  return t;
}

}  // namespace detail

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> P;
  P.config = cfg;
  auto reg = [&P](const std::string& name, Tensor<T> t, bool decay = true) {
    t.set_requires_grad(true);
    t.set_name(name);
    P.params.push_back({name, t, decay});
    return t;
  };

  // Embedding rows scaled by 1/sqrt(hidden).
  {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(cfg.hidden)));
    std::vector<T> v(int64_t(cfg.vocab) * cfg.hidden);
    for (auto& e : v) e = static_cast<T>(dist(rng));
    P.embedding = reg("embedding",
                      Tensor<T>::from({cfg.vocab, cfg.hidden}, std::move(v)));
  }

  const auto& R = cfg.residual;
  for (int n = 1; n <= cfg.n_layers; ++n) {
    LayerParams<T> L;
    std::string pfx = "layer" + std::to_string(n) + ".";
    L.attn_norm = reg(pfx + "attn_norm", Tensor<T>::full({cfg.hidden}, T(1)), false);
    L.wq = reg(pfx + "wq", detail::draw_matrix<T>(rng, cfg.hidden, cfg.hidden));
    if (cfg.layout.computes_k(n))
      L.wk = reg(pfx + "wk", detail::draw_matrix<T>(rng, cfg.hidden, cfg.kv_dim()));
    if (cfg.layout.computes_v(n) && !R.omits_wv(n))
      L.wv = reg(pfx + "wv", detail::draw_matrix<T>(rng, cfg.hidden, cfg.kv_dim()));
    L.wo = reg(pfx + "wo", detail::draw_matrix<T>(rng, cfg.hidden, cfg.hidden));
    L.mlp_norm = reg(pfx + "mlp_norm", Tensor<T>::full({cfg.hidden}, T(1)), false);
    L.w_gate = reg(pfx + "w_gate", detail::draw_matrix<T>(rng, cfg.hidden, cfg.ffn));
    L.w_up = reg(pfx + "w_up", detail::draw_matrix<T>(rng, cfg.hidden, cfg.ffn));
    L.w_down = reg(pfx + "w_down", detail::draw_matrix<T>(rng, cfg.ffn, cfg.hidden));

    if (R.kind == ResidualKind::Resformer && n >= 2) {
      if (R.variant == ResformerVariant::Learnable) {
        L.res_lambda1 = reg(pfx + "res_lambda1",
                            Tensor<T>::scalar(static_cast<T>(R.lambda1)), false);
        L.res_lambda2 = reg(pfx + "res_lambda2",
                            Tensor<T>::scalar(static_cast<T>(R.lambda2)), false);
      } else if (R.variant == ResformerVariant::LearnablePlus) {
        L.res_lambda2 = reg(pfx + "res_lambda2", Tensor<T>::scalar(T(0.5)), false);
      } else if (R.variant == ResformerVariant::Dense && R.dense_learnable) {
        std::vector<T> row(n, T(1));
        if (!R.dense_matrix.empty())
          for (int i = 0; i < n; ++i)
            row[i] = static_cast<T>(R.dense_matrix[n - 1][i]);
        L.dense_row = reg(pfx + "dense_row", Tensor<T>::from({n}, std::move(row)),
                          false);
      }
    }
    if (R.kind == ResidualKind::Denseformer) {
      std::vector<T> row(n + 1, T(0));
      row[n] = T(1);
      L.df_row = reg(pfx + "df_row", Tensor<T>::from({n + 1}, std::move(row)), false);
    }
    P.layers.push_back(std::move(L));
  }

  if (R.kind == ResidualKind::Resformer &&
      R.variant == ResformerVariant::LearnablePlus) {
    P.lambda_prime =
        reg("res_lambda_prime", Tensor<T>::zeros({cfg.n_layers}), false);
    P.lambda_scale = reg("res_lambda_scale",
                         Tensor<T>::scalar(static_cast<T>(cfg.n_layers)), false);
  }

  P.final_norm = reg("final_norm", Tensor<T>::full({cfg.hidden}, T(1)), false);
  if (!cfg.tie_embeddings)
    P.lm_head = reg("lm_head", detail::draw_matrix<T>(rng, cfg.hidden, cfg.vocab));
  return P;
}

// ---- KV cache accounting ----

struct KvCacheReport {
  double elements_per_token = 0;
  double ratio_vs_mha = 0;
};

inline KvCacheReport kv_cache_size(const ModelConfig& cfg) {
  double elems = 0;
  for (int n = 1; n <= cfg.n_layers; ++n) {
    if (cfg.layout.computes_k(n)) elems += cfg.kv_dim();
    if (cfg.layout.computes_v(n)) elems += cfg.kv_dim();
  }
  double mha = 2.0 * cfg.n_layers * cfg.hidden;
  return {elems, elems / mha};
}

// ---- forward ----

enum class AblationKind { None, Attention, Mlp };
struct AblationSpec {
  AblationKind kind = AblationKind::None;
  int k_from_back = 0;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  LayerTrace trace;
};

namespace detail {

template <typename T>
Mat to_mat(const Tensor<T>& t) {
  Mat m(t.shape()[0], t.shape().size() > 1 ? t.shape()[1] : 1);
  for (size_t i = 0; i < t.data().size(); ++i) m.v[i] = static_cast<double>(t.data()[i]);
  return m;
}

template <typename T>
struct ForwardPass {
  const ModelParams<T>& P;
  const ModelConfig& cfg;
  TraceOptions topt;
  AblationSpec ab;
  LayerTrace trace;

  Tensor<T> h0;
  Tensor<T> v1;                         // layer-1 value (post policy)
  Tensor<T> q1_raw, k1_raw, k1_roped;   // site residual / cross-layer banks
  std::vector<Tensor<T>> a1_heads;      // layer-1 attention per head
  std::vector<Tensor<T>> value_bank;    // pre-residual projections, dense variant
  std::vector<Tensor<T>> hidden_bank;   // H_0.., denseformer
  std::vector<Tensor<T>> k_bank, v_bank;  // per-layer (1-based) for CLA/SVFormer

  ForwardPass(const ModelParams<T>& p, TraceOptions t, AblationSpec a)
      : P(p), cfg(p.config), topt(t), ab(a) {
    k_bank.resize(cfg.n_layers + 1);
    v_bank.resize(cfg.n_layers + 1);
  }

  bool layer_ablated(int n, AblationKind kind) const {
    return ab.kind == kind && ab.k_from_back > 0 && n > cfg.n_layers - ab.k_from_back;
  }

  LambdaRef<T> lambda1_ref(int n) const {
    const auto& R = cfg.residual;
    switch (R.variant) {
      case ResformerVariant::Identity:
        return LambdaRef<T>::constant(0.5);
      case ResformerVariant::Constant:
      case ResformerVariant::Sparse:
        return LambdaRef<T>::constant(R.lambda1);
      case ResformerVariant::Learnable:
        return LambdaRef<T>::trainable(P.layers[n - 1].res_lambda1);
      case ResformerVariant::LearnablePlus:
        return LambdaRef<T>::trainable(
            learnable_plus_lambda1(P.lambda_prime, P.lambda_scale, n));
      default:
        return LambdaRef<T>::constant(0.0);
    }
  }
  LambdaRef<T> lambda2_ref(int n) const {
    const auto& R = cfg.residual;
    switch (R.variant) {
      case ResformerVariant::Identity:
        return LambdaRef<T>::constant(0.5);
      case ResformerVariant::Constant:
      case ResformerVariant::Sparse:
        return LambdaRef<T>::constant(R.lambda2);
      case ResformerVariant::Learnable:
      case ResformerVariant::LearnablePlus:
        return LambdaRef<T>::trainable(P.layers[n - 1].res_lambda2);
      default:
        return LambdaRef<T>::constant(1.0);
    }
  }

  Tensor<T> apply_value_policy(int n, const Tensor<T>& v_own,
                               LayerTraceEntry* te) {
    const auto& R = cfg.residual;
    if (R.kind == ResidualKind::Resformer &&
        R.variant == ResformerVariant::Dense && n >= 2 &&
        R.mapping == ResidualMapping::SharedAttention) {
      std::vector<LambdaRef<T>> row;
      for (int i = 1; i <= n; ++i) {
        if (R.dense_learnable)
          row.push_back(LambdaRef<T>::trainable(at(P.layers[n - 1].dense_row, i - 1)));
        else if (!R.dense_matrix.empty())
          row.push_back(LambdaRef<T>::constant(R.dense_matrix[n - 1][i - 1]));
        else
          row.push_back(LambdaRef<T>::constant(1.0));
      }
      return dense_resformer_value(n, value_bank, v_own, row);
    }
    if (R.value_residual_at(n)) {
      LambdaRef<T> l1 = lambda1_ref(n), l2 = lambda2_ref(n);
      if (R.omits_wv(n)) return l1.apply(v1);
      if (R.rescale) return rescale_post_residual(v1, v_own, l1, l2);
      return resformer_value(n, v1, v_own, l1, l2);
    }
    return v_own;
  }

  Tensor<T> attention(int n, const Tensor<T>& x_normed, LayerTraceEntry* te) {
    const auto& L = P.layers[n - 1];
    const auto& R = cfg.residual;
    int dh = cfg.head_dim();
    int group = cfg.n_heads / cfg.n_kv_heads;

    Tensor<T> q = matmul(x_normed, L.wq);
    if (R.kind == ResidualKind::SiteAblation && R.site == ResidualSite::Query) {
      if (n == 1)
        q1_raw = q;
      else
        q = site_residual(q1_raw, q, R.site_lambda1, R.site_lambda2);
    }

    Tensor<T> k, k_roped;
    if (cfg.layout.computes_k(n)) {
      k = matmul(x_normed, L.wk);
      if (R.kind == ResidualKind::SiteAblation && R.site == ResidualSite::Key) {
        if (n == 1)
          k1_raw = k;
        else
          k = site_residual(k1_raw, k, R.site_lambda1, R.site_lambda2);
      }
      k_roped = rope_apply(k, cfg.n_kv_heads, cfg.rope_base);
      k_bank[n] = k_roped;
    } else {
      k_roped = k_bank[cfg.layout.key_source(n)];
    }
    if (n == 1) k1_roped = k_roped;

    Tensor<T> v_used, v_own;
    if (cfg.layout.computes_v(n)) {
      if (L.wv.defined()) v_own = matmul(x_normed, L.wv);
      v_used = apply_value_policy(n, v_own, te);
      if (R.kind == ResidualKind::Resformer &&
          R.variant == ResformerVariant::Dense)
        value_bank.push_back(v_own);
      v_bank[n] = v_used;
    } else {
      v_used = v_bank[cfg.layout.value_source(n)];
      v_own = v_used;
    }
    if (n == 1) v1 = v_used;

    Tensor<T> q_roped = rope_apply(q, cfg.n_heads, cfg.rope_base);

    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor<T>> heads;
    std::vector<Tensor<T>> a_mats;
    bool cross = R.kind == ResidualKind::Resformer &&
                 R.mapping == ResidualMapping::CrossLayerAttention && n >= 2;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor<T> qh = slice_cols(q_roped, int64_t(h) * dh, int64_t(h + 1) * dh);
      int kvh = h / group;
      Tensor<T> kh = slice_cols(k_roped, int64_t(kvh) * dh, int64_t(kvh + 1) * dh);
      Tensor<T> vh = slice_cols(v_used, int64_t(kvh) * dh, int64_t(kvh + 1) * dh);
      if (cross) {
        Tensor<T> k1h = slice_cols(k1_roped, int64_t(kvh) * dh, int64_t(kvh + 1) * dh);
        Tensor<T> v1h = slice_cols(v1, int64_t(kvh) * dh, int64_t(kvh + 1) * dh);
        Tensor<T> scores = concat_cols<T>(
            {scale(matmul_nt(qh, kh), inv), scale(matmul_nt(qh, k1h), inv)});
        Tensor<T> a = concat_causal_softmax(scores);
        a_mats.push_back(a);
        heads.push_back(matmul(a, concat_rows<T>({vh, v1h})));
      } else {
        Tensor<T> a = causal_softmax(scale(matmul_nt(qh, kh), inv));
        if (R.kind == ResidualKind::SiteAblation &&
            R.site == ResidualSite::Attention) {
          if (n == 1) {
            a1_heads.push_back(a);
          } else {
            a = site_residual(a1_heads[h], a, R.site_lambda1, R.site_lambda2);
            if (te)
              for (T e : a.data())
                if (e < T(0)) {
                  te->negative_attn = true;
                  break;
                }
          }
        }
        a_mats.push_back(a);
        heads.push_back(matmul(a, vh));
      }
    }
    Tensor<T> u = concat_cols(heads);

    if (R.kind == ResidualKind::Resformer &&
        R.mapping == ResidualMapping::IdentityMap && n >= 2)
      u = identity_map_residual(u, v1);
    if (R.kind == ResidualKind::Neutreno && n >= 2)
      u = neutreno_adjust(u, v1, v_used, R.neutreno_lambda);

    if (te) {
      int64_t l = x_normed.shape()[0];
      int64_t acols = a_mats[0].shape()[1];
      Mat avg(l, acols);
      for (const auto& a : a_mats) {
        const auto& d = a.data();
        for (size_t i = 0; i < d.size(); ++i) avg.v[i] += static_cast<double>(d[i]);
      }
      for (auto& e : avg.v) e /= cfg.n_heads;
      te->attn_avg = std::move(avg);
      if (topt.per_head)
        for (const auto& a : a_mats) te->attn_heads.push_back(to_mat(a));
      if (v_own.defined()) te->v_pre = to_mat(v_own);
      te->v_post = to_mat(v_used);
      te->u = to_mat(u);
    }
    return u;
  }

  Tensor<T> block(int n, const Tensor<T>& h_prev, LayerTraceEntry* te) {
    const auto& L = P.layers[n - 1];
    const auto& R = cfg.residual;
    Tensor<T> x = rms_norm(h_prev, L.attn_norm, cfg.norm_eps);
    Tensor<T> hp;
    if (layer_ablated(n, AblationKind::Attention)) {
      hp = n > cfg.hidden_residual_start
               ? h_prev
               : Tensor<T>::zeros(h_prev.shape());
    } else {
      Tensor<T> u = attention(n, x, te);
      Tensor<T> attn_out = matmul(u, L.wo);
      hp = n > cfg.hidden_residual_start ? add(h_prev, attn_out) : attn_out;
    }
    Tensor<T> hn;
    if (layer_ablated(n, AblationKind::Mlp)) {
      hn = hp;
    } else {
      Tensor<T> mlp = swiglu(rms_norm(hp, L.mlp_norm, cfg.norm_eps), L.w_gate,
                             L.w_up, L.w_down);
      hn = add(hp, mlp);
    }
    if (R.kind == ResidualKind::SiteAblation && R.site == ResidualSite::Hidden &&
        n >= 2)
      hn = site_residual(h0, hn, R.site_lambda1, R.site_lambda2);
    if (R.kind == ResidualKind::Denseformer) {
      hn = denseformer_combine(hn, hidden_bank, L.df_row);
      hidden_bank.push_back(hn);
    }
    if (te) te->h = to_mat(hn);
    return hn;
  }

  ForwardResult<T> run(const std::vector<uint32_t>& tokens) {
    int64_t l = static_cast<int64_t>(tokens.size());
    if (l < 1) throw DataError("model_forward: empty input");
    if (l > cfg.max_seq)
      throw DataError("model_forward: input length " + std::to_string(l) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
    h0 = embedding(P.embedding, tokens);
    if (cfg.residual.kind == ResidualKind::Denseformer) hidden_bank.push_back(h0);
    if (topt.capture) {
      trace.tokens = tokens;
      trace.h0 = to_mat(h0);
      trace.layers.resize(cfg.n_layers);
    }
    Tensor<T> h = h0;
    for (int n = 1; n <= cfg.n_layers; ++n)
      h = block(n, h, topt.capture ? &trace.layers[n - 1] : nullptr);
    Tensor<T> xf = rms_norm(h, P.final_norm, cfg.norm_eps);
    Tensor<T> logits = cfg.tie_embeddings ? matmul_nt(xf, P.embedding)
                                          : matmul(xf, P.lm_head);
    return {logits, std::move(trace)};
  }
};

}  // namespace detail

template <typename T>
ForwardResult<T> model_forward(const std::vector<uint32_t>& tokens,
                               const ModelParams<T>& params,
                               TraceOptions topt = {}, AblationSpec ab = {}) {
  if (ab.kind != AblationKind::None &&
      (ab.k_from_back < 0 || ab.k_from_back > params.config.n_layers - 1))
    throw UsageError("module_ablation: k must be in 0..N-1 (layer 1 stays intact)");
  detail::ForwardPass<T> fp(params, topt, ab);
  return fp.run(tokens);
}

// Per-layer attention grad norms (Frobenius) after one backward pass.
struct GradNormRow {
  int layer = 0;
  double wq = 0, wk = 0, wv = 0, wo = 0;
};

template <typename T>
std::vector<GradNormRow> grad_norm_probe(const ModelParams<T>& params) {
  auto frob = [](const Tensor<T>& t) {
    if (!t.defined() || !t.has_grad()) return 0.0;
    double s = 0;
    for (T v : t.grad()) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  };
  std::vector<GradNormRow> rows;
  for (int n = 1; n <= params.config.n_layers; ++n) {
    const auto& L = params.layers[n - 1];
    rows.push_back({n, frob(L.wq), frob(L.wk), frob(L.wv), frob(L.wo)});
  }
  return rows;
}

// Current lambda coefficients, exported for plotting.
struct LambdaSnapshotRow {
  int layer = 0;
  double lambda1 = 0, lambda2 = 0;
  bool ratio_defined = false;
  double ratio = 0;
};

template <typename T>
std::vector<LambdaSnapshotRow> lambda_snapshot(const ModelParams<T>& params) {
  const auto& R = params.config.residual;
  std::vector<LambdaSnapshotRow> rows;
  if (R.kind != ResidualKind::Resformer) return rows;
  std::vector<double> plus_l1;
  if (R.variant == ResformerVariant::LearnablePlus) {
    std::vector<double> lp(params.lambda_prime.data().begin(),
                           params.lambda_prime.data().end());
    plus_l1 = learnable_plus_init(params.config.n_layers, lp,
                                  static_cast<double>(params.lambda_scale.data()[0]));
  }
  for (int n = 2; n <= params.config.n_layers; ++n) {
    LambdaSnapshotRow r;
    r.layer = n;
    switch (R.variant) {
      case ResformerVariant::Identity:
        r.lambda1 = 0.5;
        r.lambda2 = 0.5;
        break;
      case ResformerVariant::Constant:
        r.lambda1 = R.lambda1;
        r.lambda2 = R.lambda2;
        break;
      case ResformerVariant::Sparse:
        r.lambda1 = R.value_residual_at(n) ? R.lambda1 : 0.0;
        r.lambda2 = R.value_residual_at(n) ? R.lambda2 : 1.0;
        break;
      case ResformerVariant::Learnable:
        r.lambda1 = static_cast<double>(params.layers[n - 1].res_lambda1.data()[0]);
        r.lambda2 = static_cast<double>(params.layers[n - 1].res_lambda2.data()[0]);
        break;
      case ResformerVariant::LearnablePlus:
        r.lambda1 = plus_l1[n - 1];
        r.lambda2 = static_cast<double>(params.layers[n - 1].res_lambda2.data()[0]);
        break;
      case ResformerVariant::Dense:
        continue;  // dense matrix exported separately
    }
    r.ratio_defined = r.lambda2 != 0.0;
    if (r.ratio_defined) r.ratio = r.lambda1 / r.lambda2;
    rows.push_back(r);
  }
  return rows;
}

// Dense lambda matrix snapshot (lower-triangular rows).
template <typename T>
std::vector<std::vector<double>> dense_lambda_snapshot(const ModelParams<T>& params) {
  const auto& R = params.config.residual;
  std::vector<std::vector<double>> m;
  if (R.kind != ResidualKind::Resformer || R.variant != ResformerVariant::Dense)
    return m;
  for (int n = 1; n <= params.config.n_layers; ++n) {
    std::vector<double> row(n, 1.0);
    if (R.dense_learnable && n >= 2) {
      const auto& t = params.layers[n - 1].dense_row;
      for (int i = 0; i < n; ++i) row[i] = static_cast<double>(t.data()[i]);
    } else if (!R.dense_matrix.empty()) {
      for (int i = 0; i < n; ++i) row[i] = R.dense_matrix[n - 1][i];
    }
    m.push_back(std::move(row));
  }
  return m;
}

}  // namespace reslab
