#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "reslab/model.hpp"

using namespace reslab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.hidden = 8;
  c.ffn = 16;
  c.vocab = 11;
  c.max_seq = 16;
  return c;
}

std::vector<uint32_t> random_tokens(std::mt19937_64& rng, int l, int vocab) {
  std::vector<uint32_t> t(l);
  for (auto& e : t) e = uint32_t(rng() % vocab);
  return t;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Brute-force masked attention oracle: per-position loops, no tensor ops.
std::vector<double> attention_oracle(const std::vector<double>& q,
                                     const std::vector<double>& k,
                                     const std::vector<double>& v, int l, int d,
                                     int heads) {
  int dh = d / heads;
  std::vector<double> u(l * d, 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < l; ++i) {
      std::vector<double> w(i + 1);
      double mx = -1e300;
      for (int j = 0; j <= i; ++j) {
        double s = 0;
        for (int x = 0; x < dh; ++x)
          s += q[i * d + h * dh + x] * k[j * d + h * dh + x];
        w[j] = s / std::sqrt(double(dh));
        mx = std::max(mx, w[j]);
      }
      double z = 0;
      for (int j = 0; j <= i; ++j) {
        w[j] = std::exp(w[j] - mx);
        z += w[j];
      }
      for (int j = 0; j <= i; ++j)
        for (int x = 0; x < dh; ++x)
          u[i * d + h * dh + x] += (w[j] / z) * v[j * d + h * dh + x];
    }
  }
  return u;
}

}  // namespace

TEST_CASE("init_params determinism and conventions") {
  auto cfg = tiny_config();
  auto a = init_params<double>(cfg, 42);
  auto b = init_params<double>(cfg, 42);
  REQUIRE(a.params.size() == b.params.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].name == b.params[i].name);
    CHECK(a.params[i].t.data() == b.params[i].t.data());  // bitwise
  }
  auto c = init_params<double>(cfg, 43);
  CHECK(a.params[0].t.data() != c.params[0].t.data());

  // gains are ones
  for (double g : a.final_norm.data()) CHECK(g == 1.0);
  for (double g : a.layers[0].attn_norm.data()) CHECK(g == 1.0);

  // smallest published shape: 4 layers, 2 heads, d=16, f=56
  ModelConfig m2;
  m2.n_layers = 4;
  m2.n_heads = 2;
  m2.n_kv_heads = 2;
  m2.hidden = 16;
  m2.ffn = 56;
  m2.vocab = 259;
  m2.max_seq = 128;
  auto p2 = init_params<float>(m2, 1);
  CHECK(p2.count() > 0);
}

TEST_CASE("attention matches brute-force oracle (MHA, vanilla)") {
  std::mt19937_64 rng(7);
  int l = 4, d = 8, heads = 2;
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 1;
  auto P = init_params<double>(cfg, 3);

  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> xv(l * d);
  for (auto& e : xv) e = dist(rng);
  auto x = Tensor<double>::from({l, d}, xv);

  detail::ForwardPass<double> fp(P, {}, {});
  auto u = fp.attention(1, x, nullptr);

  // Oracle path: projections + rope by plain loops, then masked attention.
  auto project = [&](const Tensor<double>& w) {
    std::vector<double> out(l * d, 0.0);
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < d; ++j)
        for (int m = 0; m < d; ++m) out[i * d + j] += xv[i * d + m] * w.data()[m * d + j];
    return out;
  };
  auto rope = [&](std::vector<double> m) {
    int dh = d / heads;
    for (int pos = 0; pos < l; ++pos)
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < dh / 2; ++i) {
          double th = pos * std::pow(10000.0, -2.0 * i / dh);
          double a = m[pos * d + h * dh + 2 * i], b = m[pos * d + h * dh + 2 * i + 1];
          m[pos * d + h * dh + 2 * i] = a * std::cos(th) - b * std::sin(th);
          m[pos * d + h * dh + 2 * i + 1] = a * std::sin(th) + b * std::cos(th);
        }
    return m;
  };
  auto q = rope(project(P.layers[0].wq));
  auto k = rope(project(P.layers[0].wk));
  auto v = project(P.layers[0].wv);
  auto want = attention_oracle(q, k, v, l, d, heads);
  CHECK(max_abs_diff(u.data(), want) < 1e-6);
}

TEST_CASE("svformer single-position attention returns V1") {
  ModelConfig cfg = tiny_config();
  cfg.layout.kind = LayoutKind::SVFormer;
  auto P = init_params<double>(cfg, 5);
  auto r = model_forward<double>({3}, P, {true, false});
  // one-position softmax: A1 = [[1]]
  CHECK(r.trace.layers[0].attn_avg.rows == 1);
  CHECK(r.trace.layers[0].attn_avg.v[0] == doctest::Approx(1.0));
  // layer 2 output U2 = A2 V1 = V1 at l = 1
  CHECK(max_abs_diff(r.trace.layers[1].u.v, r.trace.layers[0].v_post.v) < 1e-12);
}

TEST_CASE("GQA(1) and CLA(period 1) are bitwise MHA") {
  std::mt19937_64 rng(11);
  auto cfg = tiny_config();
  auto P = init_params<double>(cfg, 9);
  auto toks = random_tokens(rng, 6, cfg.vocab);
  auto base = model_forward<double>(toks, P);

  ModelConfig gqa = cfg;
  gqa.layout.kind = LayoutKind::GQA;
  gqa.layout.group = 1;
  auto Pg = init_params<double>(gqa, 9);
  auto rg = model_forward<double>(toks, Pg);
  CHECK(rg.logits.data() == base.logits.data());

  ModelConfig cla = cfg;
  cla.layout.kind = LayoutKind::CLA;
  cla.layout.period = 1;
  auto Pc = init_params<double>(cla, 9);
  auto rc = model_forward<double>(toks, Pc);
  CHECK(rc.logits.data() == base.logits.data());
}

TEST_CASE("degenerate residual variants reproduce vanilla logits") {
  std::mt19937_64 rng(13);
  auto cfg = tiny_config();
  cfg.n_layers = 3;
  auto P = init_params<double>(cfg, 21);

  for (int trial = 0; trial < 10; ++trial) {
    auto toks = random_tokens(rng, 5, cfg.vocab);
    auto base = model_forward<double>(toks, P);

    ModelConfig rf = cfg;
    rf.residual.kind = ResidualKind::Resformer;
    rf.residual.variant = ResformerVariant::Constant;
    rf.residual.lambda1 = 0.0;
    rf.residual.lambda2 = 1.0;
    auto Pr = init_params<double>(rf, 21);
    CHECK(max_abs_diff(model_forward<double>(toks, Pr).logits.data(),
                       base.logits.data()) < 1e-6);

    ModelConfig nt = cfg;
    nt.residual.kind = ResidualKind::Neutreno;
    nt.residual.neutreno_lambda = 0.0;
    auto Pn = init_params<double>(nt, 21);
    CHECK(max_abs_diff(model_forward<double>(toks, Pn).logits.data(),
                       base.logits.data()) < 1e-6);

    ModelConfig df = cfg;
    df.residual.kind = ResidualKind::Denseformer;
    auto Pd = init_params<double>(df, 21);
    CHECK(max_abs_diff(model_forward<double>(toks, Pd).logits.data(),
                       base.logits.data()) < 1e-6);

    ModelConfig dr = cfg;
    dr.residual.kind = ResidualKind::Resformer;
    dr.residual.variant = ResformerVariant::Dense;
    dr.residual.dense_matrix = {{1.0}, {0.0, 1.0}, {0.0, 0.0, 1.0}};
    auto Pdr = init_params<double>(dr, 21);
    CHECK(max_abs_diff(model_forward<double>(toks, Pdr).logits.data(),
                       base.logits.data()) < 1e-6);
  }
}

TEST_CASE("causality under every variant") {
  std::mt19937_64 rng(17);
  std::vector<ModelConfig> cfgs;
  {
    auto v = tiny_config();
    cfgs.push_back(v);
    auto r = v;
    r.residual.kind = ResidualKind::Resformer;
    r.residual.variant = ResformerVariant::Identity;
    cfgs.push_back(r);
    auto s = v;
    s.layout.kind = LayoutKind::SVFormer;
    cfgs.push_back(s);
    auto g = v;
    g.layout.kind = LayoutKind::GQA;
    g.layout.group = 2;
    g.n_kv_heads = 1;
    cfgs.push_back(g);
    auto c = v;
    c.layout.kind = LayoutKind::CLA;
    c.layout.period = 2;
    cfgs.push_back(c);
    auto x = v;
    x.residual.kind = ResidualKind::Resformer;
    x.residual.mapping = ResidualMapping::CrossLayerAttention;
    cfgs.push_back(x);
  }
  for (const auto& cfg : cfgs) {
    auto P = init_params<double>(cfg, 31);
    auto toks = random_tokens(rng, 8, cfg.vocab);
    auto base = model_forward<double>(toks, P);
    int t0 = 4;
    auto perturbed = toks;
    perturbed[6] = (perturbed[6] + 1) % cfg.vocab;
    auto r2 = model_forward<double>(perturbed, P);
    for (int p = 0; p <= t0; ++p)
      for (int j = 0; j < cfg.vocab; ++j)
        CHECK(std::abs(base.logits.data()[p * cfg.vocab + j] -
                       r2.logits.data()[p * cfg.vocab + j]) < 1e-6);
  }
}

TEST_CASE("hidden residual start place") {
  auto cfg = tiny_config();
  std::mt19937_64 rng(19);
  auto toks = random_tokens(rng, 4, cfg.vocab);

  // zeroed attention and MLP weights with s=0: block is the identity
  auto P = init_params<double>(cfg, 23);
  for (auto& p : P.params)
    if (p.name.find("wo") != std::string::npos ||
        p.name.find("w_down") != std::string::npos)
      std::fill(p.t.data().begin(), p.t.data().end(), 0.0);
  auto r = model_forward<double>(toks, P, {true, false});
  CHECK(max_abs_diff(r.trace.layers[1].h.v, r.trace.h0.v) < 1e-12);

  // s = 1: layer 1 is H_1 = Layer_1(H_0) with no +H_0
  ModelConfig cs = cfg;
  cs.hidden_residual_start = 1;
  auto Ps = init_params<double>(cs, 23);
  for (auto& p : Ps.params)
    if (p.name.find("w_down") != std::string::npos)
      std::fill(p.t.data().begin(), p.t.data().end(), 0.0);
  auto rs = model_forward<double>(toks, Ps, {true, false});
  // with zero MLP, H_1 = attn_out only; verify it differs from H_prev + attn_out
  auto Pd = init_params<double>(cfg, 23);
  for (auto& p : Pd.params)
    if (p.name.find("w_down") != std::string::npos)
      std::fill(p.t.data().begin(), p.t.data().end(), 0.0);
  auto rd = model_forward<double>(toks, Pd, {true, false});
  double diff = max_abs_diff(rs.trace.layers[0].h.v, rd.trace.layers[0].h.v);
  CHECK(diff > 1e-9);
  // and H_1(s=1) + H_0 == H_1(s=0)
  std::vector<double> sum(rs.trace.layers[0].h.v.size());
  for (size_t i = 0; i < sum.size(); ++i)
    sum[i] = rs.trace.layers[0].h.v[i] + rs.trace.h0.v[i];
  CHECK(max_abs_diff(sum, rd.trace.layers[0].h.v) < 1e-12);
}

TEST_CASE("kv cache accounting") {
  ModelConfig cfg;
  cfg.n_layers = 24;
  cfg.n_heads = 16;
  cfg.n_kv_heads = 16;
  cfg.hidden = 1024;
  cfg.ffn = 3584;
  cfg.vocab = 50277;
  cfg.max_seq = 2048;

  auto mha = kv_cache_size(cfg);
  CHECK(mha.elements_per_token == 2.0 * 24 * 1024);
  CHECK(mha.ratio_vs_mha == 1.0);

  auto sv = cfg;
  sv.layout.kind = LayoutKind::SVFormer;
  auto rsv = kv_cache_size(sv);
  CHECK(rsv.elements_per_token == doctest::Approx(25.0 * 1024));
  CHECK(rsv.ratio_vs_mha == doctest::Approx(25.0 / 48.0));

  auto svgqa = sv;
  svgqa.layout.kind = LayoutKind::SVFormer;
  svgqa.n_kv_heads = 4;  // GQA4
  auto rs = kv_cache_size(svgqa);
  CHECK(rs.ratio_vs_mha == doctest::Approx(25.0 / 192.0));

  // SVFormer exact ratio (N+1)/(2N)
  for (int N : {2, 8, 24}) {
    auto c = sv;
    c.n_layers = N;
    CHECK(kv_cache_size(c).ratio_vs_mha == doctest::Approx((N + 1.0) / (2.0 * N)));
  }

  auto gqa2 = cfg;
  gqa2.layout.kind = LayoutKind::GQA;
  gqa2.layout.group = 2;
  gqa2.n_kv_heads = 8;
  CHECK(kv_cache_size(gqa2).ratio_vs_mha == doctest::Approx(0.5));

  auto cla2 = cfg;
  cla2.layout.kind = LayoutKind::CLA;
  cla2.layout.period = 2;
  CHECK(kv_cache_size(cla2).ratio_vs_mha == doctest::Approx(0.5));
}

TEST_CASE("trace invariants: row-stochastic lower-triangular attention") {
  auto cfg = tiny_config();
  cfg.residual.kind = ResidualKind::Resformer;
  cfg.residual.variant = ResformerVariant::Identity;
  auto P = init_params<double>(cfg, 77);
  std::mt19937_64 rng(77);
  auto toks = random_tokens(rng, 7, cfg.vocab);
  auto r = model_forward<double>(toks, P, {true, true});
  for (const auto& layer : r.trace.layers) {
    REQUIRE(layer.attn_avg.rows == 7);
    for (int i = 0; i < 7; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) {
        if (j > i) CHECK(layer.attn_avg(i, j) == 0.0);
        s += layer.attn_avg(i, j);
      }
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
    CHECK(layer.attn_heads.size() == 2);
  }
}

TEST_CASE("end-to-end gradients for representative variants") {
  std::mt19937_64 rng(99);
  std::vector<ModelConfig> cfgs;
  {
    auto v = tiny_config();
    cfgs.push_back(v);
    auto lr = v;
    lr.residual.kind = ResidualKind::Resformer;
    lr.residual.variant = ResformerVariant::Learnable;
    cfgs.push_back(lr);
    auto sv = v;
    sv.layout.kind = LayoutKind::SVFormer;
    cfgs.push_back(sv);
  }
  for (const auto& cfg : cfgs) {
    auto P = init_params<double>(cfg, 7);
    auto toks = random_tokens(rng, 5, cfg.vocab);
    std::vector<uint32_t> targets(toks.begin() + 1, toks.end());
    targets.push_back(toks[0]);
    std::vector<Tensor<double>> tensors;
    for (auto& p : P.params) tensors.push_back(p.t);
    auto report = grad_check(
        [&] { return cross_entropy(model_forward<double>(toks, P).logits, targets); },
        tensors, 1e-5, 1e-4);
    if (!report.pass)
      MESSAGE("worst: " << report.worst_name << " err " << report.worst);
    CHECK(report.pass);
  }
}

TEST_CASE("module ablation") {
  auto cfg = tiny_config();
  cfg.n_layers = 3;
  auto P = init_params<double>(cfg, 15);
  std::mt19937_64 rng(15);
  auto toks = random_tokens(rng, 5, cfg.vocab);

  // k = 0 equals plain evaluation bitwise
  auto base = model_forward<double>(toks, P);
  auto k0 = model_forward<double>(toks, P, {}, {AblationKind::Mlp, 0});
  CHECK(k0.logits.data() == base.logits.data());

  // dropping MLPs whose down-projections are zero changes nothing
  auto Pz = init_params<double>(cfg, 15);
  for (auto& p : Pz.params)
    if (p.name.find("w_down") != std::string::npos)
      std::fill(p.t.data().begin(), p.t.data().end(), 0.0);
  auto bz = model_forward<double>(toks, Pz);
  auto az = model_forward<double>(toks, Pz, {}, {AblationKind::Mlp, 2});
  CHECK(max_abs_diff(az.logits.data(), bz.logits.data()) < 1e-12);

  // layer 1 stays intact: k = N is rejected
  CHECK_THROWS_AS(model_forward<double>(toks, P, {}, {AblationKind::Attention, 3}),
                  UsageError);
}

TEST_CASE("grad_norm_probe and lambda_snapshot") {
  auto cfg = tiny_config();
  cfg.residual.kind = ResidualKind::Resformer;
  cfg.residual.variant = ResformerVariant::Learnable;
  auto P = init_params<double>(cfg, 55);
  std::mt19937_64 rng(55);
  auto toks = random_tokens(rng, 6, cfg.vocab);
  std::vector<uint32_t> targets(toks.begin() + 1, toks.end());
  targets.push_back(toks[0]);

  auto loss = cross_entropy(model_forward<double>(toks, P).logits, targets);
  backward(loss);
  auto rows = grad_norm_probe(P);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].wv > 0);
  CHECK(rows[0].wo > 0);

  auto snap = lambda_snapshot(P);
  REQUIRE(snap.size() == 1);  // layers 2..N
  CHECK(snap[0].lambda1 == doctest::Approx(0.5));
  CHECK(snap[0].ratio_defined);
  CHECK(snap[0].ratio == doctest::Approx(1.0));
}

TEST_CASE("errors: overlong input, invalid config") {
  auto cfg = tiny_config();
  auto P = init_params<double>(cfg, 1);
  std::vector<uint32_t> toolong(cfg.max_seq + 1, 0);
  CHECK_THROWS_AS(model_forward<double>(toolong, P), DataError);

  ModelConfig bad = cfg;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelConfig nk = cfg;
  nk.residual.kind = ResidualKind::Neutreno;
  nk.layout.kind = LayoutKind::GQA;
  nk.layout.group = 2;
  nk.n_kv_heads = 1;
  CHECK_THROWS_AS(nk.validate(), ConfigError);
}

TEST_CASE("sparse resformer omits W^V on pure-V1 layers") {
  auto cfg = tiny_config();
  cfg.n_layers = 4;
  cfg.residual.kind = ResidualKind::Resformer;
  cfg.residual.variant = ResformerVariant::Sparse;
  cfg.residual.target_layers = {3, 4};
  cfg.residual.lambda1 = 1.0;
  cfg.residual.lambda2 = 0.0;
  auto P = init_params<double>(cfg, 3);
  CHECK(P.find("layer2.wv") != nullptr);
  CHECK(P.find("layer3.wv") == nullptr);
  CHECK(P.find("layer4.wv") == nullptr);

  std::mt19937_64 rng(3);
  auto toks = random_tokens(rng, 5, cfg.vocab);
  auto r = model_forward<double>(toks, P, {true, false});
  // layers 3,4 use V1 directly
  CHECK(max_abs_diff(r.trace.layers[2].v_post.v, r.trace.layers[0].v_post.v) < 1e-12);
}

TEST_CASE("svformer omits W^V beyond layer 1 and shares V1") {
  auto cfg = tiny_config();
  cfg.n_layers = 3;
  cfg.layout.kind = LayoutKind::SVFormer;
  auto P = init_params<double>(cfg, 8);
  CHECK(P.find("layer1.wv") != nullptr);
  CHECK(P.find("layer2.wv") == nullptr);
  CHECK(P.find("layer3.wv") == nullptr);
}
