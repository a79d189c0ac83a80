#include <cmath>

#include "doctest.h"
#include "han/error.hpp"
#include "han/gradients.hpp"
#include "han/rng.hpp"
#include "oracles.hpp"

using namespace han;

namespace {

HanConfig tiny_config() {
  HanConfig cfg;
  cfg.layers = 2;
  cfg.channels = 4;
  cfg.height = 2;
  cfg.width = 3;
  cfg.groups = 2;
  cfg.inner_width = 2;
  return cfg;
}

double all_abs(const GradientSet& g) {
  double s = 0.0;
  for_each_param(g, [&](const std::string&, const Tensor& t) {
    for (double v : t.values()) s += std::abs(v);
  });
  return s;
}

}  // namespace

TEST_CASE("backward with zero upstream gives zero gradients") {
  Rng rng(61);
  const HanConfig cfg = tiny_config();
  const HanParams params = random_params(cfg, 1);
  const ModalityPair in = oracle::random_pair(4, 2, 3, rng);
  const ForwardTape tape = record_forward(in, params, cfg);
  const BackwardResult b = backward(tape, params, cfg, FeatureMap(tape.fused.dims()));
  CHECK(all_abs(b.params) == 0.0);
  CHECK(frobenius_norm(b.input.rgb) + frobenius_norm(b.input.tir) == 0.0);
}

TEST_CASE("backward requires a recorded forward pass") {
  const HanConfig cfg = tiny_config();
  CHECK_THROWS_AS(backward(ForwardTape{}, random_params(cfg, 1), cfg, make_feature_map(4, 2, 3)), UsageError);
}

TEST_CASE("single affine parameter under a quadratic loss") {
  // One-layer network in which every path is switched off except the CMEU
  // output projection: fused = (mean gate) * w * x along a single entry.
  HanConfig cfg;
  cfg.layers = 1;
  cfg.channels = 1;
  cfg.height = 1;
  cfg.width = 1;
  cfg.groups = 1;
  cfg.kernel_size = 1;
  cfg.inner_width = 1;
  cfg.router_hidden = 4;

  HanParams params = make_params(cfg);
  LayerParams& lp = params.layers[0];
  // Constant gates of tanh(b) on unit 3 only.
  lp.routers[3].b2.fill(std::atanh(0.5));
  // Singleton spatial extent: standardized input is 0, so the normalization
  // shift is the value-path input x.
  const double x = 1.7, w = -0.6;
  lp.cmeu_t2r.norm_shift[0] = x;
  lp.cmeu_t2r.wv(0, 0) = 1.0;
  lp.cmeu_t2r.wo(0, 0) = w;

  const ModalityPair in{make_feature_map(1, 1, 1), make_feature_map(1, 1, 1)};
  const ForwardTape tape = record_forward(in, params, cfg);
  // fused = 0.5 * (w * x): unit 3 rgb = 0 + w * x, tir passthrough 0.
  CHECK(tape.fused[0] == doctest::Approx(0.5 * w * x).epsilon(1e-15));

  // loss = fused^2 / 0.25 = (w x)^2, d loss / dw = 2 w x^2.
  FeatureMap upstream(tape.fused.dims());
  upstream[0] = 2.0 * tape.fused[0] / 0.25;
  const BackwardResult b = backward(tape, params, cfg, upstream);
  CHECK(b.params.layers[0].cmeu_t2r.wo(0, 0) == doctest::Approx(2.0 * w * x * x).epsilon(1e-14));
}

TEST_CASE("fd_gradient on closed forms") {
  HanConfig cfg;
  cfg.layers = 1;
  cfg.channels = 2;
  cfg.groups = 1;
  HanParams theta = make_params(cfg);
  Rng rng(62);
  HanParams coeffs = random_params(cfg, 9);

  SUBCASE("linear") {
    const auto loss = [&](const HanParams& p) {
      double s = 0.0;
      std::vector<const Tensor*> cs;
      for_each_param(coeffs, [&](const std::string&, const Tensor& t) { cs.push_back(&t); });
      std::size_t n = 0;
      for_each_param(p, [&](const std::string&, const Tensor& t) { s += dot(t.values(), cs[n++]->values()); });
      return s;
    };
    const GradientSet g = fd_gradient(loss, theta, 1e-4);
    std::vector<const Tensor*> cs;
    for_each_param(coeffs, [&](const std::string&, const Tensor& t) { cs.push_back(&t); });
    std::size_t n = 0;
    for_each_param(g, [&](const std::string&, const Tensor& t) { CHECK(oracle::max_abs_diff(t, *cs[n++]) < 1e-10); });
  }
  SUBCASE("quadratic") {
    theta.layers[0].seu_rgb.gamma[0] = 3.0;
    const auto loss = [](const HanParams& p) {
      const double v = p.layers[0].seu_rgb.gamma[0];
      return v * v;
    };
    const GradientSet g = fd_gradient(loss, theta, 1e-4, 3);
    CHECK(std::abs(g.layers[0].seu_rgb.gamma[0] - 6.0) < 1e-8);
    CHECK(g.layers[0].seu_rgb.beta[0] == 0.0);
  }
  CHECK_THROWS_AS(fd_gradient([](const HanParams&) { return 0.0; }, theta, 0.0), ConfigError);
}

TEST_CASE("analytic gradients of the full network match central differences") {
  Rng rng(63);
  const HanConfig cfg = tiny_config();
  const HanParams params = random_params(cfg, 3);
  const ModalityPair in = oracle::random_pair(4, 2, 3, rng);
  const FeatureMap target = oracle::random_tensor({4, 2, 3}, rng);

  const ForwardTape tape = record_forward(in, params, cfg);
  const BackwardResult b = backward(tape, params, cfg, mse_gradient(tape.fused, target));
  const GradientSet numeric =
      fd_gradient([&](const HanParams& p) { return mse(record_forward(in, p, cfg).fused, target); }, params, 1e-5, 2);
  // Central differences at h=1e-5 carry roughly 1e-11 of rounding noise on an O(1) loss,
  // so each entry gets an absolute allowance on top of the relative one.
  std::vector<const Tensor*> fd;
  for_each_param(numeric, [&](const std::string&, const Tensor& t) { fd.push_back(&t); });
  std::size_t n = 0;
  for_each_param(b.params, [&](const std::string& name, const Tensor& a) {
    const Tensor& f = *fd[n++];
    for (std::size_t e = 0; e < a.size(); ++e) {
      INFO(name << "[" << e << "] " << a[e] << " vs " << f[e]);
      CHECK(std::abs(a[e] - f[e]) <= 1e-5 * std::max(std::abs(a[e]), std::abs(f[e])) + 1e-10);
    }
  });

  // Input gradient, one entry at a time.
  for (std::size_t i = 0; i < in.rgb.size(); ++i) {
    for (int stream = 0; stream < 2; ++stream) {
      ModalityPair up = in, down = in;
      (stream ? up.tir : up.rgb)[i] += 1e-5;
      (stream ? down.tir : down.rgb)[i] -= 1e-5;
      const double fd = (mse(record_forward(up, params, cfg).fused, target) -
                         mse(record_forward(down, params, cfg).fused, target)) / 2e-5;
      const double an = (stream ? b.input.tir : b.input.rgb)[i];
      CHECK(an == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("gradients through injected gates skip the routers") {
  Rng rng(64);
  const HanConfig cfg = tiny_config();
  const HanParams params = random_params(cfg, 4);
  const ModalityPair in = oracle::random_pair(4, 2, 3, rng);
  const RouteTensor gates = static_gates(cfg);
  const ForwardTape tape = record_forward(in, params, cfg, &gates);
  const BackwardResult b = backward(tape, params, cfg, oracle::random_tensor({4, 2, 3}, rng));
  for (const auto& lp : b.params.layers)
    for (const auto& r : lp.routers) CHECK(frobenius_norm(r.w1) + frobenius_norm(r.b2) == 0.0);
  CHECK(frobenius_norm(b.params.layers[0].cmeu_r2t.wo) > 0.0);
}

TEST_CASE("gradient locality along identity paths") {
  Rng rng(65);
  const FeatureMap f = oracle::random_tensor({4, 3, 3}, rng);
  // Upstream restricted to the top row.
  FeatureMap upstream(f.dims());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t w = 0; w < 3; ++w) upstream(c, 0, w) = rng.uniform(-1, 1);

  SUBCASE("CEU with a zero kernel is purely local") {
    CeuParams grad;
    const FeatureMap g = ceu_backward(f, make_ceu_params(3), upstream, grad);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t h = 1; h < 3; ++h)
        for (std::size_t w = 0; w < 3; ++w) CHECK(g(c, h, w) == 0.0);
  }
  SUBCASE("CEU gate path spreads uniformly within a channel") {
    CeuParams grad;
    const FeatureMap g = ceu_backward(f, {oracle::random_tensor({3}, rng)}, upstream, grad);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t h = 1; h < 3; ++h)
        for (std::size_t w = 0; w < 3; ++w) CHECK(g(c, h, w) == doctest::Approx(g(c, 1, 0)).epsilon(1e-14));
  }
  SUBCASE("CMEU residual path with the output projection switched off") {
    CmeuParams p = make_cmeu_params(4, 2);
    for (Tensor* t : {&p.wq, &p.wk, &p.wv}) {
      for (double& v : t->values()) v = rng.uniform(-1, 1);
    }
    CmeuParams grad;
    const CmeuInputGrads g = cmeu_backward(f, oracle::random_tensor({4, 3, 3}, rng), p, upstream, grad);
    CHECK(g.query == upstream);
    for (double v : g.key_value.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("training loop") {
  const HanConfig cfg = tiny_config();
  const auto data = make_dataset({{ScenarioClass::NoisyTir, 2}, {ScenarioClass::NoisyRgb, 2}}, cfg, 3);

  TrainConfig frozen;
  frozen.step_size = 0.0;
  frozen.steps = 5;
  const TrainResult still = train_demo(data, cfg, frozen);
  REQUIRE(still.loss_curve.size() == 6);
  for (double l : still.loss_curve) CHECK(l == still.loss_curve[0]);

  TrainConfig tc;
  tc.steps = 10;
  tc.step_size = 0.05;
  const TrainResult a = train_demo(data, cfg, tc);
  const TrainResult b = train_demo(data, cfg, tc);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.loss_curve.back() < a.loss_curve.front());
  CHECK(a.mean_gates.size() == 2);
  for (std::size_t i = 1; i < a.smoothed_curve.size(); ++i) CHECK(a.smoothed_curve[i] <= a.smoothed_curve[i - 1]);

  TrainConfig wild = tc;
  wild.step_size = 1e300;
  const TrainResult d = train_demo(data, cfg, wild);
  CHECK(d.diverged);
  CHECK(d.diverged_at >= 1);
}
