#include "han/router.hpp"

#include <algorithm>
#include <cmath>

#include "han/error.hpp"
#include "han/kernels.hpp"

namespace han {

RouterParams make_router_params(std::size_t channels, std::size_t hidden, std::size_t outputs) {
  return {Tensor({4 * channels, hidden}), Tensor({hidden}), Tensor({hidden, outputs}), Tensor({outputs})};
}

RouterParams zeros_like(const RouterParams& p) {
  return {Tensor(p.w1.dims()), Tensor(p.b1.dims()), Tensor(p.w2.dims()), Tensor(p.b2.dims())};
}

namespace {

void check_router(const ModalityPair& pair, const RouterParams& p) {
  require_feature_map(pair.rgb, "router rgb");
  require_feature_map(pair.tir, "router tir");
  require_same_shape(pair.rgb, pair.tir, "router");
  const std::size_t width = 4 * pair.rgb.dim(0);
  if (p.w1.rank() != 2 || p.w1.rows() != width) {
    throw ShapeError("router: w1 must have 4C = " + std::to_string(width) + " rows");
  }
  const std::size_t hidden = p.w1.cols();
  if (p.b1.size() != hidden || p.w2.rank() != 2 || p.w2.rows() != hidden || p.b2.size() != p.w2.cols()) {
    throw ShapeError("router: inconsistent perceptron shapes");
  }
}

struct RouterPass {
  Tensor descriptor;
  Tensor hidden_pre;
  Tensor hidden;
  Tensor out_pre;
  Tensor gates;
};

RouterPass run_router(const ModalityPair& pair, const RouterParams& p) {
  check_router(pair, p);
  RouterPass r;
  r.descriptor = router_descriptor(pair);
  const std::size_t hidden = p.w1.cols();
  const std::size_t outputs = p.w2.cols();
  r.hidden_pre = Tensor({hidden});
  r.hidden = Tensor({hidden});
  for (std::size_t h = 0; h < hidden; ++h) {
    double s = p.b1[h];
    for (std::size_t i = 0; i < r.descriptor.size(); ++i) s += r.descriptor[i] * p.w1(i, h);
    r.hidden_pre[h] = s;
    r.hidden[h] = relu(s);
  }
  r.out_pre = Tensor({outputs});
  r.gates = Tensor({outputs});
  for (std::size_t n = 0; n < outputs; ++n) {
    double s = p.b2[n];
    for (std::size_t h = 0; h < hidden; ++h) s += r.hidden[h] * p.w2(h, n);
    r.out_pre[n] = s;
    r.gates[n] = std::min(relu(std::tanh(s)), kGateCeiling);
  }
  return r;
}

}  // namespace

Tensor router_descriptor(const ModalityPair& pair) {
  const std::size_t channels = pair.rgb.dim(0);
  const Tensor avg_rgb = spatial_pool(pair.rgb, PoolMode::Average);
  const Tensor avg_tir = spatial_pool(pair.tir, PoolMode::Average);
  const Tensor max_rgb = spatial_pool(pair.rgb, PoolMode::Max);
  const Tensor max_tir = spatial_pool(pair.tir, PoolMode::Max);
  Tensor d({4 * channels});
  for (std::size_t c = 0; c < channels; ++c) {
    d[c] = avg_rgb[c];
    d[channels + c] = avg_tir[c];
    d[2 * channels + c] = max_rgb[c];
    d[3 * channels + c] = max_tir[c];
  }
  return d;
}

Tensor router_forward(const ModalityPair& pair, const RouterParams& p) { return run_router(pair, p).gates; }

ModalityPair router_backward(const ModalityPair& pair, const RouterParams& p, const Tensor& grad_gates,
                             RouterParams& grad_p) {
  const RouterPass r = run_router(pair, p);
  if (grad_gates.size() != r.gates.size()) throw ShapeError("router_backward: gate gradient length");
  if (grad_p.w1.empty()) grad_p = zeros_like(p);

  const std::size_t hidden = p.w1.cols();
  const std::size_t outputs = p.w2.cols();
  Tensor grad_hidden({hidden});
  for (std::size_t n = 0; n < outputs; ++n) {
    const double t = std::tanh(r.out_pre[n]);
    // relu'(0) = 0, so a gate sitting exactly at zero passes no gradient; a clamped gate is flat too.
    const double g = t > 0 && t < kGateCeiling ? grad_gates[n] * (1.0 - t * t) : 0.0;
    if (g == 0.0) continue;
    grad_p.b2[n] += g;
    for (std::size_t h = 0; h < hidden; ++h) {
      grad_p.w2(h, n) += g * r.hidden[h];
      grad_hidden[h] += g * p.w2(h, n);
    }
  }

  Tensor grad_desc({r.descriptor.size()});
  for (std::size_t h = 0; h < hidden; ++h) {
    const double g = grad_hidden[h] * relu_grad(r.hidden_pre[h]);
    if (g == 0.0) continue;
    grad_p.b1[h] += g;
    for (std::size_t i = 0; i < r.descriptor.size(); ++i) {
      grad_p.w1(i, h) += g * r.descriptor[i];
      grad_desc[i] += g * p.w1(i, h);
    }
  }

  const std::size_t channels = pair.rgb.dim(0);
  const std::size_t plane = pair.rgb.dim(1) * pair.rgb.dim(2);
  const double inv_plane = 1.0 / static_cast<double>(plane);
  ModalityPair grad{FeatureMap(pair.rgb.dims()), FeatureMap(pair.tir.dims())};
  const auto arg_rgb = spatial_argmax(pair.rgb);
  const auto arg_tir = spatial_argmax(pair.tir);
  for (std::size_t c = 0; c < channels; ++c) {
    for (double& v : grad.rgb.channel(c)) v = grad_desc[c] * inv_plane;
    for (double& v : grad.tir.channel(c)) v = grad_desc[channels + c] * inv_plane;
    grad.rgb.channel(c)[arg_rgb[c]] += grad_desc[2 * channels + c];
    grad.tir.channel(c)[arg_tir[c]] += grad_desc[3 * channels + c];
  }
  return grad;
}

Tensor route_layer(std::span<const ModalityPair> outputs, std::span<const RouterParams> routers) {
  if (outputs.size() != routers.size() || outputs.empty()) {
    throw ShapeError("route_layer: need one router per unit output");
  }
  const std::size_t units = outputs.size();
  Tensor gates({units, routers[0].w2.cols()});
  for (std::size_t j = 0; j < units; ++j) {
    const Tensor row = router_forward(outputs[j], routers[j]);
    if (row.size() != gates.cols()) throw ShapeError("route_layer: routers disagree on output width");
    for (std::size_t i = 0; i < row.size(); ++i) gates(j, i) = row[i];
  }
  return gates;
}

}  // namespace han
