#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "reslab/residual.hpp"

using namespace reslab;

namespace {

Tensor<double> rand_mat(std::mt19937_64& rng, int r, int c) {
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> v(r * c);
  for (auto& e : v) e = d(rng);
  return Tensor<double>::from({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("resformer_value identity and constant forms") {
  std::mt19937_64 rng(1);
  auto v = rand_mat(rng, 3, 4);

  // identity variant with equal inputs: 0.5v + 0.5v = v
  auto out = resformer_value(2, v, v, LambdaRef<double>::constant(0.5),
                             LambdaRef<double>::constant(0.5));
  for (int i = 0; i < 12; ++i) CHECK(out.data()[i] == doctest::Approx(v.data()[i]));

  // constant (2, 1): V' = 2 V1 + Vn
  auto v1 = rand_mat(rng, 3, 4);
  auto vn = rand_mat(rng, 3, 4);
  auto c = resformer_value(3, v1, vn, LambdaRef<double>::constant(2.0),
                           LambdaRef<double>::constant(1.0));
  for (int i = 0; i < 12; ++i)
    CHECK(c.data()[i] == doctest::Approx(2 * v1.data()[i] + vn.data()[i]));

  // nonzero lambda1 at layer 1 rejected
  CHECK_THROWS_AS(resformer_value(1, v1, vn, LambdaRef<double>::constant(2.0),
                                  LambdaRef<double>::constant(1.0)),
                  ConfigError);
}

TEST_CASE("resformer_value linearity (superposition)") {
  std::mt19937_64 rng(2);
  auto a1 = rand_mat(rng, 2, 3), a2 = rand_mat(rng, 2, 3);
  auto b1 = rand_mat(rng, 2, 3), b2 = rand_mat(rng, 2, 3);
  auto l1 = LambdaRef<double>::constant(0.7);
  auto l2 = LambdaRef<double>::constant(1.3);
  auto lhs = resformer_value(2, add(a1, a2), add(b1, b2), l1, l2);
  auto rhs = add(resformer_value(2, a1, b1, l1, l2), resformer_value(2, a2, b2, l1, l2));
  for (int i = 0; i < 6; ++i)
    CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-12);
}

TEST_CASE("learnable_plus_init") {
  auto l1 = learnable_plus_init(2, {0, 0}, 2.0);
  CHECK(l1[0] == doctest::Approx(1.0));
  CHECK(l1[1] == doctest::Approx(1.0));

  auto l8 = learnable_plus_init(8, std::vector<double>(8, 0.0), 8.0);
  double s = 0;
  for (double v : l8) {
    CHECK(v == doctest::Approx(1.0));
    s += v;
  }
  CHECK(s == doctest::Approx(8.0));

  auto l3 = learnable_plus_init(3, {std::log(2.0), 0, 0}, 3.0);
  CHECK(l3[0] == doctest::Approx(1.5));
  CHECK(l3[1] == doctest::Approx(0.75));
  CHECK(l3[2] == doctest::Approx(0.75));
}

TEST_CASE("learnable_plus lambda sums to lambda_scale") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int trial = 0; trial < 10; ++trial) {
    int n = 2 + int(rng() % 8);
    std::vector<double> lp(n);
    for (auto& e : lp) e = d(rng);
    double scale = d(rng) + 3;
    auto l = learnable_plus_init(n, lp, scale);
    double s = 0;
    for (double v : l) s += v;
    CHECK(s == doctest::Approx(scale).epsilon(1e-12));
  }
}

TEST_CASE("dense_resformer_value") {
  std::mt19937_64 rng(4);
  auto v1 = rand_mat(rng, 2, 3), v2 = rand_mat(rng, 2, 3), v3 = rand_mat(rng, 2, 3);

  // degenerate row (0,...,0,1) -> vanilla
  auto out = dense_resformer_value<double>(3, {v1, v2}, v3,
                                           {LambdaRef<double>::constant(0),
                                            LambdaRef<double>::constant(0),
                                            LambdaRef<double>::constant(1)});
  for (int i = 0; i < 6; ++i) CHECK(out.data()[i] == v3.data()[i]);

  // all-ones row, n=3 -> V1 + V2 + V3
  auto ones = dense_resformer_value<double>(3, {v1, v2}, v3,
                                            {LambdaRef<double>::constant(1),
                                             LambdaRef<double>::constant(1),
                                             LambdaRef<double>::constant(1)});
  for (int i = 0; i < 6; ++i)
    CHECK(ones.data()[i] ==
          doctest::Approx(v1.data()[i] + v2.data()[i] + v3.data()[i]));

  // n=2 with row (lambda, 1) equals resformer_value with (lambda, 1)
  auto d2 = dense_resformer_value<double>(
      2, {v1}, v2, {LambdaRef<double>::constant(0.8), LambdaRef<double>::constant(1)});
  auto r2 = resformer_value(2, v1, v2, LambdaRef<double>::constant(0.8),
                            LambdaRef<double>::constant(1));
  for (int i = 0; i < 6; ++i) CHECK(d2.data()[i] == doctest::Approx(r2.data()[i]));

  CHECK_THROWS_AS(dense_resformer_value<double>(
                      3, {v1}, v3,
                      {LambdaRef<double>::constant(1), LambdaRef<double>::constant(1),
                       LambdaRef<double>::constant(1)}),
                  UsageError);
}

TEST_CASE("neutreno_adjust") {
  std::mt19937_64 rng(5);
  auto u = rand_mat(rng, 3, 4), v1 = rand_mat(rng, 3, 4), vn = rand_mat(rng, 3, 4);

  auto same = neutreno_adjust(u, v1, vn, 0.0);
  for (int i = 0; i < 12; ++i) CHECK(same.data()[i] == u.data()[i]);

  auto adj = neutreno_adjust(u, v1, vn, 0.4);
  for (int i = 0; i < 12; ++i)
    CHECK(adj.data()[i] ==
          doctest::Approx(u.data()[i] + 0.4 * (v1.data()[i] - vn.data()[i])));

  auto eq = neutreno_adjust(u, v1, v1, 7.3);
  for (int i = 0; i < 12; ++i) CHECK(eq.data()[i] == doctest::Approx(u.data()[i]));
}

TEST_CASE("denseformer_combine") {
  std::mt19937_64 rng(6);
  auto h0 = rand_mat(rng, 2, 3), h1 = rand_mat(rng, 2, 3);
  auto out = rand_mat(rng, 2, 3);

  // init row (0, 0, 1): H_n = block output
  auto init = Tensor<double>::from({3}, {0, 0, 1});
  auto y = denseformer_combine<double>(out, {h0, h1}, init);
  for (int i = 0; i < 6; ++i) CHECK(y.data()[i] == doctest::Approx(out.data()[i]));

  // pure skip to H0 with zero block output
  auto skip = Tensor<double>::from({3}, {1, 0, 0});
  auto z = denseformer_combine<double>(Tensor<double>::zeros({2, 3}), {h0, h1}, skip);
  for (int i = 0; i < 6; ++i) CHECK(z.data()[i] == doctest::Approx(h0.data()[i]));

  // random row vs explicit weighted-sum oracle
  auto row = rand_mat(rng, 3, 1);
  auto rowv = Tensor<double>::from({3}, row.data());
  auto w = denseformer_combine<double>(out, {h0, h1}, rowv);
  for (int i = 0; i < 6; ++i) {
    double want = rowv.data()[0] * h0.data()[i] + rowv.data()[1] * h1.data()[i] +
                  rowv.data()[2] * out.data()[i];
    CHECK(std::abs(w.data()[i] - want) < 1e-12);
  }
}

TEST_CASE("site_residual") {
  std::mt19937_64 rng(7);
  auto x1 = rand_mat(rng, 3, 3), xn = rand_mat(rng, 3, 3);

  // (0, 1) is the identity at any site
  auto id = site_residual(x1, xn, 0.0, 1.0);
  for (int i = 0; i < 9; ++i) CHECK(id.data()[i] == doctest::Approx(xn.data()[i]));

  // hidden-site two-term blend
  auto h = site_residual(x1, xn, 0.5, 0.5);
  for (int i = 0; i < 9; ++i)
    CHECK(h.data()[i] == doctest::Approx(0.5 * x1.data()[i] + 0.5 * xn.data()[i]));

  // convex blend of row-stochastic matrices stays row-stochastic
  auto a1 = causal_softmax(rand_mat(rng, 4, 4));
  auto a2 = causal_softmax(rand_mat(rng, 4, 4));
  auto blend = site_residual(a1, a2, 0.5, 0.5);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += blend.data()[r * 4 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("cross_layer_attention duplication identity") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    int l = 2 + int(rng() % 5), dh = 4;
    auto q = rand_mat(rng, l, dh), k = rand_mat(rng, l, dh), v = rand_mat(rng, l, dh);
    auto u = cross_layer_attention(q, k, v, k, v);
    double inv = 1.0 / std::sqrt(double(dh));
    auto a = causal_softmax(scale(matmul_nt(q, k), inv));
    auto want = matmul(a, v);
    for (int i = 0; i < l * dh; ++i)
      CHECK(std::abs(u.data()[i] - want.data()[i]) < 1e-6);
  }
}

TEST_CASE("cross_layer_attention single position, distinct keys") {
  // l = 1: softmax over two scores times the two values
  auto q = Tensor<double>::from({1, 2}, {1.0, 0.5});
  auto k = Tensor<double>::from({1, 2}, {0.3, -0.2});
  auto k1 = Tensor<double>::from({1, 2}, {-0.6, 0.9});
  auto v = Tensor<double>::from({1, 2}, {1.0, 2.0});
  auto v1 = Tensor<double>::from({1, 2}, {-1.0, 0.5});
  double inv = 1.0 / std::sqrt(2.0);
  double s0 = (1.0 * 0.3 + 0.5 * -0.2) * inv;
  double s1 = (1.0 * -0.6 + 0.5 * 0.9) * inv;
  double e0 = std::exp(s0), e1 = std::exp(s1), z = e0 + e1;
  auto u = cross_layer_attention(q, k, v, k1, v1);
  CHECK(u.data()[0] == doctest::Approx((e0 * 1.0 + e1 * -1.0) / z));
  CHECK(u.data()[1] == doctest::Approx((e0 * 2.0 + e1 * 0.5) / z));

  // duplicated single key: output is the average of the two values
  auto ud = cross_layer_attention(q, k, v, k, v1);
  CHECK(ud.data()[0] == doctest::Approx((1.0 - 1.0) / 2));
}

TEST_CASE("cross_layer_attention weights sum to 1 per row") {
  std::mt19937_64 rng(9);
  int l = 5, dh = 4;
  auto q = rand_mat(rng, l, dh), k = rand_mat(rng, l, dh), k1 = rand_mat(rng, l, dh);
  double inv = 1.0 / std::sqrt(double(dh));
  auto w = concat_causal_softmax(
      concat_cols<double>({scale(matmul_nt(q, k), inv), scale(matmul_nt(q, k1), inv)}));
  for (int r = 0; r < l; ++r) {
    double s = 0;
    for (int j = 0; j < 2 * l; ++j) s += w.data()[r * 2 * l + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("identity_map_residual") {
  std::mt19937_64 rng(10);
  auto u = rand_mat(rng, 3, 4), v1 = rand_mat(rng, 3, 4);
  auto z = Tensor<double>::zeros({3, 4});
  auto a = identity_map_residual(u, z);
  for (int i = 0; i < 12; ++i) CHECK(a.data()[i] == u.data()[i]);
  auto b = identity_map_residual(z, v1);
  for (int i = 0; i < 12; ++i) CHECK(b.data()[i] == v1.data()[i]);
  auto c = identity_map_residual(u, v1);
  for (int i = 0; i < 12; ++i)
    CHECK(c.data()[i] == u.data()[i] + v1.data()[i]);
}

TEST_CASE("rescale_post_residual") {
  std::mt19937_64 rng(11);
  auto vn = rand_mat(rng, 4, 6);

  // V1 = Vn: mixture is Vn, rescale is exact identity
  auto same = rescale_post_residual<double>(vn, vn, 0.5, 0.5);
  for (int i = 0; i < 24; ++i) CHECK(same.data()[i] == doctest::Approx(vn.data()[i]));

  // orthogonal equal-norm pair: mixture norm = ||Vn||/sqrt(2), so scale sqrt(2)
  auto e1 = Tensor<double>::from({1, 2}, {3.0, 0.0});
  auto e2 = Tensor<double>::from({1, 2}, {0.0, 3.0});
  auto y = rescale_post_residual<double>(e1, e2, 0.5, 0.5);
  double n = std::hypot(y.data()[0], y.data()[1]);
  CHECK(n == doctest::Approx(3.0));
  CHECK(y.data()[0] == doctest::Approx(3.0 / std::sqrt(2.0)));

  // defining property: output row norms equal Vn row norms
  auto v1 = rand_mat(rng, 4, 6);
  auto out = rescale_post_residual<double>(v1, vn, 0.3, 0.9);
  for (int r = 0; r < 4; ++r) {
    double no = 0, nv = 0;
    for (int j = 0; j < 6; ++j) {
      no += out.data()[r * 6 + j] * out.data()[r * 6 + j];
      nv += vn.data()[r * 6 + j] * vn.data()[r * 6 + j];
    }
    CHECK(std::abs(std::sqrt(no) - std::sqrt(nv)) < 1e-6);
  }

  // scale-equivariance in Vn's norm
  auto out2 = rescale_post_residual<double>(v1, scale(vn, 2.0), 0.3, 0.9);
  for (int r = 0; r < 4; ++r) {
    double no = 0;
    for (int j = 0; j < 6; ++j) no += out2.data()[r * 6 + j] * out2.data()[r * 6 + j];
    double nv = 0;
    for (int j = 0; j < 6; ++j) nv += vn.data()[r * 6 + j] * vn.data()[r * 6 + j];
    CHECK(std::abs(std::sqrt(no) - 2.0 * std::sqrt(nv)) < 1e-6);
  }
}

TEST_CASE("lambda gradients flow through policies") {
  std::mt19937_64 rng(12);
  auto v1 = rand_mat(rng, 3, 4), vn = rand_mat(rng, 3, 4);
  auto l1 = Tensor<double>::scalar(0.5, true);
  auto l2 = Tensor<double>::scalar(0.5, true);
  auto out = resformer_value(2, v1, vn, LambdaRef<double>::trainable(l1),
                             LambdaRef<double>::trainable(l2));
  backward(sum(out));
  REQUIRE(l1.has_grad());
  REQUIRE(l2.has_grad());
  CHECK(std::isfinite(l1.grad()[0]));
  CHECK(std::isfinite(l2.grad()[0]));

  auto report = grad_check(
      [&] {
        return sum(resformer_value(2, v1, vn, LambdaRef<double>::trainable(l1),
                                   LambdaRef<double>::trainable(l2)));
      },
      {l1, l2}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("residual spec validation") {
  ResidualSpec sparse;
  sparse.kind = ResidualKind::Resformer;
  sparse.variant = ResformerVariant::Sparse;
  sparse.target_layers = {1};
  CHECK_THROWS_AS(sparse.validate(8), ConfigError);
  sparse.target_layers = {6, 7, 8};
  CHECK_NOTHROW(sparse.validate(8));
  CHECK(sparse.value_residual_at(7));
  CHECK_FALSE(sparse.value_residual_at(3));

  sparse.lambda2 = 0.0;
  CHECK(sparse.omits_wv(6));
  CHECK_FALSE(sparse.omits_wv(2));

  ResidualSpec dense;
  dense.kind = ResidualKind::Resformer;
  dense.variant = ResformerVariant::Dense;
  dense.dense_matrix = {{1.0}, {1.0}};  // row 2 wrong length
  CHECK_THROWS_AS(dense.validate(2), ConfigError);
  dense.dense_matrix = {{1.0}, {1.0, 1.0}};
  CHECK_NOTHROW(dense.validate(2));
}
