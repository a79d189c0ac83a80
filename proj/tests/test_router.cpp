#include <cmath>
#include <numeric>

#include "doctest.h"
#include "han/error.hpp"
#include "han/router.hpp"
#include "han/rng.hpp"
#include "oracles.hpp"

using namespace han;

namespace {

RouterParams random_router(std::size_t channels, std::size_t hidden, Rng& rng, double scale = 1.0) {
  RouterParams p = make_router_params(channels, hidden, 4);
  for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) {
    for (double& v : t->values()) v = rng.uniform(-scale, scale);
  }
  return p;
}

}  // namespace

TEST_CASE("router_forward examples") {
  Rng rng(41);
  const ModalityPair x = oracle::random_pair(8, 4, 4, rng);
  const Tensor values = router_forward(x, make_router_params(8, 8, 4));
  for (double g : values.values()) CHECK(g == 0.0);

  for (int trial = 0; trial < 200; ++trial) {
    const RouterParams p = random_router(8, 8, rng, 2.0);
    const ModalityPair in = oracle::random_pair(8, 4, 4, rng);
    const Tensor g = router_forward(in, p);
    const auto expected = oracle::router(in, p);
    for (std::size_t n = 0; n < 4; ++n) {
      CHECK(g[n] >= 0.0);
      CHECK(g[n] < 1.0);
      CHECK(std::abs(g[n] - expected[n]) < 1e-12);
    }
  }

  ModalityPair bad = x;
  bad.tir = oracle::random_tensor({8, 4, 3}, rng);
  CHECK_THROWS_AS(router_forward(bad, random_router(8, 8, rng)), ShapeError);
  CHECK_THROWS_AS(router_forward(x, random_router(4, 8, rng)), ShapeError);
}

TEST_CASE("gates never reach 1 even for saturating pre-activations") {
  RouterParams p = make_router_params(2, 2, 4);
  p.b2.fill(1e6);
  Rng rng(42);
  const Tensor values = router_forward(oracle::random_pair(2, 2, 2, rng), p);
  for (double g : values.values()) {
    CHECK(g < 1.0);
  }
}

TEST_CASE("gates depend only on pooled statistics") {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const RouterParams p = random_router(4, 6, rng);
    const ModalityPair x = oracle::random_pair(4, 3, 3, rng);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 9; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    ModalityPair y{FeatureMap(x.rgb.dims()), FeatureMap(x.tir.dims())};
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t q = 0; q < 9; ++q) {
        y.rgb.channel(c)[perm[q]] = x.rgb.channel(c)[q];
        y.tir.channel(c)[perm[q]] = x.tir.channel(c)[q];
      }
    // Average pooling sums in a different order, so allow rounding.
    CHECK(oracle::max_abs_diff(router_forward(x, p), router_forward(y, p)) < 1e-14);
  }
}

TEST_CASE("gates are Lipschitz in the input away from kinks") {
  Rng rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    const RouterParams p = random_router(4, 6, rng);
    const ModalityPair x = oracle::random_pair(4, 3, 3, rng);
    const Tensor g0 = router_forward(x, p);
    for (double delta : {1e-3, 1e-4, 1e-5}) {
      ModalityPair y = x;
      for (double& v : y.rgb.values()) v += delta * rng.uniform(-1, 1);
      const double change = oracle::max_abs_diff(router_forward(y, p), g0);
      // For continuous gates the change shrinks with the perturbation.
      CHECK(change <= 100.0 * delta);
    }
  }
}

TEST_CASE("route_layer") {
  Rng rng(45);
  std::vector<ModalityPair> outs;
  std::vector<RouterParams> routers;
  for (int j = 0; j < 4; ++j) {
    outs.push_back(oracle::random_pair(4, 3, 3, rng));
    routers.push_back(make_router_params(4, 4, 4));
  }
  const Tensor values = route_layer(outs, routers);
  for (double v : values.values()) CHECK(v == 0.0);

  for (auto& r : routers) r = random_router(4, 4, rng);
  routers[2] = make_router_params(4, 4, 4);
  const Tensor gates = route_layer(outs, routers);
  for (std::size_t i = 0; i < 4; ++i) CHECK(gates(2, i) == 0.0);
  for (std::size_t j = 0; j < 4; ++j) {
    const auto expected = oracle::router(outs[j], routers[j]);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(gates(j, i) - expected[i]) < 1e-12);
  }
  CHECK_THROWS_AS(route_layer(std::span(outs).first(3), routers), ShapeError);
}

TEST_CASE("router_backward matches finite differences") {
  Rng rng(46);
  RouterParams p = random_router(4, 6, rng, 0.5);
  p.b2.fill(0.3);
  ModalityPair x = oracle::random_pair(4, 3, 3, rng);
  const Tensor upstream = oracle::random_tensor({4}, rng);
  RouterParams gp;
  const ModalityPair gx = router_backward(x, p, upstream, gp);
  auto loss = [&] { return dot(router_forward(x, p), upstream); };
  auto central = [&](Tensor& t, std::size_t i) {
    const double saved = t[i];
    t[i] = saved + 1e-6;
    const double up = loss();
    t[i] = saved - 1e-6;
    const double down = loss();
    t[i] = saved;
    return (up - down) / 2e-6;
  };
  for (std::size_t i = 0; i < x.rgb.size(); ++i) {
    CHECK(gx.rgb[i] == doctest::Approx(central(x.rgb, i)).epsilon(1e-6));
    CHECK(gx.tir[i] == doctest::Approx(central(x.tir, i)).epsilon(1e-6));
  }
  const std::pair<Tensor*, Tensor*> pairs[] = {{&p.w1, &gp.w1}, {&p.b1, &gp.b1}, {&p.w2, &gp.w2}, {&p.b2, &gp.b2}};
  for (auto [param, grad] : pairs) {
    for (std::size_t i = 0; i < param->size(); ++i) CHECK((*grad)[i] == doctest::Approx(central(*param, i)).epsilon(1e-6));
  }
}

TEST_CASE("router_backward sends max-pool gradient to the first maximum") {
  RouterParams p = make_router_params(1, 1, 4);
  // Hidden unit reads only GMP(rgb); every output reads the hidden unit.
  p.w1(2, 0) = 1.0;
  p.w2.fill(0.1);
  ModalityPair x{FeatureMap({1, 2, 2}, {1.0, 3.0, 3.0, 0.5}), FeatureMap({1, 2, 2}, {0.1, 0.1, 0.1, 0.1})};
  RouterParams gp;
  const ModalityPair g = router_backward(x, p, Tensor::vector({1, 1, 1, 1}), gp);
  CHECK(g.rgb[1] != 0.0);
  CHECK(g.rgb[2] == 0.0);
  CHECK(g.rgb[0] == 0.0);
}
