#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "han/tensor.hpp"

namespace han {

/// Per-unit gating head. The 2C-channel concatenation of a modality pair is
/// pooled (average and max) to a 4C descriptor, fed through
/// relu(desc * w1 + b1) * w2 + b2, and squashed by relu(tanh(.)) into N
/// soft gates in [0, 1).
// tanh rounds to exactly 1.0 for large pre-activations; gates are capped just below.
inline const double kGateCeiling = std::nextafter(1.0, 0.0);

struct RouterParams {
  Tensor w1;  // {4C, H_r}
  Tensor b1;  // {H_r}
  Tensor w2;  // {H_r, N}
  Tensor b2;  // {N}
};

RouterParams make_router_params(std::size_t channels, std::size_t hidden, std::size_t outputs);
RouterParams zeros_like(const RouterParams& p);

// The 4C pooled descriptor: [GAP(rgb), GAP(tir), GMP(rgb), GMP(tir)].
Tensor router_descriptor(const ModalityPair& pair);

Tensor router_forward(const ModalityPair& pair, const RouterParams& p);

// Gradient of the loss w.r.t. both streams given d loss / d gates.
// Max pooling routes to the first maximum in scan order.
ModalityPair router_backward(const ModalityPair& pair, const RouterParams& p, const Tensor& grad_gates,
                             RouterParams& grad_p);

/// Gate matrix for one layer boundary: row j holds router j's gates
/// computed on unit j's output pair.
Tensor route_layer(std::span<const ModalityPair> outputs, std::span<const RouterParams> routers);

}  // namespace han
