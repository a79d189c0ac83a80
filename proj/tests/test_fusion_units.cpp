#include <cmath>
#include <numeric>

#include "doctest.h"
#include "han/error.hpp"
#include "han/fusion_units.hpp"
#include "han/rng.hpp"
#include "oracles.hpp"

using namespace han;

namespace {

SeuParams random_seu(std::size_t groups, Rng& rng) {
  return {oracle::random_tensor({groups}, rng, -2, 2), oracle::random_tensor({groups}, rng, -2, 2)};
}

CmeuParams random_cmeu(std::size_t channels, std::size_t inner, Rng& rng) {
  CmeuParams p = make_cmeu_params(channels, inner);
  for (Tensor* t : {&p.norm_scale, &p.norm_shift, &p.wq, &p.wk, &p.wv, &p.wo}) {
    for (double& v : t->values()) v = rng.uniform(-1, 1);
  }
  return p;
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

FeatureMap permute_positions(const FeatureMap& f, const std::vector<std::size_t>& perm) {
  FeatureMap g(f.dims());
  for (std::size_t c = 0; c < f.dim(0); ++c)
    for (std::size_t p = 0; p < perm.size(); ++p) g.channel(c)[perm[p]] = f.channel(c)[p];
  return g;
}

}  // namespace

TEST_CASE("seu_forward examples") {
  const FeatureMap constant = make_feature_map(16, 4, 4, 1.5);
  const SeuParams neutral = make_seu_params(8);
  const FeatureMap out = seu_forward(constant, neutral, 8);
  for (double v : out.values()) CHECK(v == 0.75);

  Rng rng(31);
  const FeatureMap zero = make_feature_map(16, 4, 4);
  const FeatureMap silent = seu_forward(zero, random_seu(8, rng), 8);
  for (double v : silent.values()) CHECK(v == 0.0);

  const FeatureMap f = oracle::random_tensor({16, 4, 4}, rng);
  const SeuParams p = random_seu(8, rng);
  CHECK(oracle::max_abs_diff(seu_forward(f, p, 8), oracle::seu(f, p, 8)) < 1e-12);

  CHECK_THROWS_AS(seu_forward(f, make_seu_params(7), 7), ConfigError);
  CHECK_THROWS_AS(seu_forward(f, make_seu_params(4), 8), ShapeError);
}

TEST_CASE("ceu_forward examples") {
  Rng rng(32);
  const FeatureMap f = oracle::random_tensor({16, 3, 3}, rng);
  const FeatureMap identity = ceu_forward(f, {Tensor::vector({0, 1, 0})});
  const Tensor means = spatial_pool(f, PoolMode::Average);
  for (std::size_t c = 0; c < 16; ++c)
    for (std::size_t p = 0; p < 9; ++p)
      CHECK(identity.channel(c)[p] == doctest::Approx(oracle::sig(means[c]) * f.channel(c)[p]).epsilon(1e-14));

  const FeatureMap half = ceu_forward(f, make_ceu_params(3));
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(half[i] == 0.5 * f[i]);

  const CeuParams p{oracle::random_tensor({3}, rng)};
  CHECK(oracle::max_abs_diff(ceu_forward(f, p), oracle::ceu(f, p)) < 1e-12);
  CHECK_THROWS_AS(ceu_forward(f, make_ceu_params(4)), ConfigError);
}

TEST_CASE("cmeu_forward examples") {
  Rng rng(33);
  const FeatureMap q = oracle::random_tensor({8, 3, 3}, rng);
  const FeatureMap kv = oracle::random_tensor({8, 3, 3}, rng);

  CmeuParams p = random_cmeu(8, 4, rng);
  CmeuParams no_value = p;
  no_value.wv.fill(0.0);
  CHECK(cmeu_forward(q, kv, no_value) == q);

  CHECK(oracle::max_abs_diff(cmeu_forward(q, kv, p), oracle::cmeu(q, kv, p)) < 1e-10);

  // Singleton spatial extent: attention is [[1]] and the standardized input
  // is zero, so only the shift survives: out = q + shift * Wv * Wo.
  const FeatureMap q1 = oracle::random_tensor({8, 1, 1}, rng);
  const FeatureMap kv1 = oracle::random_tensor({8, 1, 1}, rng);
  const CmeuIntermediates single = cmeu_evaluate(q1, kv1, p);
  CHECK(single.attention.dims() == std::vector<std::size_t>{1, 1});
  CHECK(single.attention[0] == 1.0);
  for (std::size_t c = 0; c < 8; ++c) {
    double expected = q1[c];
    for (std::size_t o = 0; o < 4; ++o) {
      double v = 0.0;
      for (std::size_t i = 0; i < 8; ++i) v += p.norm_shift[i] * p.wv(i, o);
      expected += v * p.wo(o, c);
    }
    CHECK(single.output[c] == doctest::Approx(expected).epsilon(1e-13));
  }

  CHECK_THROWS_AS(cmeu_forward(q, oracle::random_tensor({8, 3, 2}, rng), p), ShapeError);
  CHECK_THROWS_AS(cmeu_forward(q, kv, make_cmeu_params(6, 4)), ShapeError);
}

TEST_CASE("unit gates are strictly inside (0, 1) and shrink magnitudes") {
  Rng rng(34);
  for (int trial = 0; trial < 50; ++trial) {
    const FeatureMap f = oracle::random_tensor({16, 4, 4}, rng, -3, 3);
    const SeuParams sp = random_seu(8, rng);
    const CeuParams cp{oracle::random_tensor({3}, rng, -2, 2)};
    const Tensor spatial = seu_attention(f, sp, 8);
    for (double a : spatial.values()) {
      CHECK(a > 0.0);
      CHECK(a < 1.0);
    }
    const Tensor channel = ceu_gates(f, cp);
    for (double a : channel.values()) {
      CHECK(a > 0.0);
      CHECK(a < 1.0);
    }
    const FeatureMap s = seu_forward(f, sp, 8);
    const FeatureMap c = ceu_forward(f, cp);
    for (std::size_t i = 0; i < f.size(); ++i) {
      CHECK(std::abs(s[i]) <= std::abs(f[i]));
      CHECK(std::abs(c[i]) <= std::abs(f[i]));
    }
  }
}

TEST_CASE("spatial permutation: SEU covariant, CEU gates invariant") {
  Rng rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const FeatureMap f = oracle::random_tensor({16, 4, 4}, rng);
    const auto perm = random_permutation(16, rng);
    const FeatureMap g = permute_positions(f, perm);
    const SeuParams sp = random_seu(8, rng);
    const Tensor att_f = seu_attention(f, sp, 8);
    const Tensor att_g = seu_attention(g, sp, 8);
    for (std::size_t s = 0; s < 8; ++s)
      for (std::size_t p = 0; p < 16; ++p) CHECK(std::abs(att_g(s, perm[p]) - att_f(s, p)) < 1e-12);

    const CeuParams cp{oracle::random_tensor({3}, rng)};
    CHECK(oracle::max_abs_diff(ceu_gates(f, cp), ceu_gates(g, cp)) < 1e-14);
  }
}

TEST_CASE("CMEU attention rows sum to one and Wv = 0 is a pure residual") {
  Rng rng(36);
  for (int trial = 0; trial < 30; ++trial) {
    const FeatureMap q = oracle::random_tensor({8, 3, 4}, rng, -2, 2);
    const FeatureMap kv = oracle::random_tensor({8, 3, 4}, rng, -2, 2);
    CmeuParams p = random_cmeu(8, 1 + rng.below(8), rng);
    const CmeuIntermediates r = cmeu_evaluate(q, kv, p);
    for (std::size_t row = 0; row < r.attention.rows(); ++row) {
      double s = 0.0;
      for (std::size_t col = 0; col < r.attention.cols(); ++col) s += r.attention(row, col);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    p.wv.fill(0.0);
    CHECK(cmeu_forward(q, kv, p) == q);
  }
}

TEST_CASE("all units preserve shape") {
  Rng rng(37);
  const FeatureMap f = oracle::random_tensor({8, 5, 3}, rng);
  const auto dims = f.dims();
  CHECK(seu_forward(f, random_seu(4, rng), 4).dims() == dims);
  CHECK(ceu_forward(f, {oracle::random_tensor({5}, rng)}).dims() == dims);
  CHECK(cmeu_forward(f, f, random_cmeu(8, 2, rng)).dims() == dims);
}

namespace {

template <class Loss>
double central(Loss loss, Tensor& x, std::size_t i, double h = 1e-6) {
  const double saved = x[i];
  x[i] = saved + h;
  const double up = loss();
  x[i] = saved - h;
  const double down = loss();
  x[i] = saved;
  return (up - down) / (2 * h);
}

}  // namespace

TEST_CASE("unit backward passes match finite differences") {
  Rng rng(38);
  FeatureMap f = oracle::random_tensor({8, 3, 3}, rng);
  FeatureMap kv = oracle::random_tensor({8, 3, 3}, rng);
  const FeatureMap gout = oracle::random_tensor({8, 3, 3}, rng);

  SUBCASE("seu") {
    SeuParams p = random_seu(4, rng);
    SeuParams gp;
    const FeatureMap gin = seu_backward(f, p, 4, gout, gp);
    auto loss = [&] { return dot(seu_forward(f, p, 4), gout); };
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(gin[i] == doctest::Approx(central(loss, f, i)).epsilon(1e-6));
    for (std::size_t s = 0; s < 4; ++s) {
      CHECK(gp.gamma[s] == doctest::Approx(central(loss, p.gamma, s)).epsilon(1e-6));
      CHECK(gp.beta[s] == doctest::Approx(central(loss, p.beta, s)).epsilon(1e-6));
    }
  }
  SUBCASE("ceu") {
    CeuParams p{oracle::random_tensor({3}, rng)};
    CeuParams gp;
    const FeatureMap gin = ceu_backward(f, p, gout, gp);
    auto loss = [&] { return dot(ceu_forward(f, p), gout); };
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(gin[i] == doctest::Approx(central(loss, f, i)).epsilon(1e-6));
    for (std::size_t i = 0; i < 3; ++i) CHECK(gp.kernel[i] == doctest::Approx(central(loss, p.kernel, i)).epsilon(1e-6));
  }
  SUBCASE("cmeu") {
    CmeuParams p = random_cmeu(8, 4, rng);
    CmeuParams gp;
    const CmeuInputGrads g = cmeu_backward(f, kv, p, gout, gp);
    auto loss = [&] { return dot(cmeu_forward(f, kv, p), gout); };
    for (std::size_t i = 0; i < f.size(); ++i) {
      CHECK(g.query[i] == doctest::Approx(central(loss, f, i)).epsilon(1e-6));
      CHECK(g.key_value[i] == doctest::Approx(central(loss, kv, i)).epsilon(1e-6));
    }
    const std::pair<Tensor*, Tensor*> pairs[] = {{&p.norm_scale, &gp.norm_scale}, {&p.norm_shift, &gp.norm_shift},
                                                 {&p.wq, &gp.wq}, {&p.wk, &gp.wk}, {&p.wv, &gp.wv}, {&p.wo, &gp.wo}};
    for (auto [param, grad] : pairs) {
      for (std::size_t i = 0; i < param->size(); ++i) {
        CHECK((*grad)[i] == doctest::Approx(central(loss, *param, i)).epsilon(1e-6));
      }
    }
  }
}
