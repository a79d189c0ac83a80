#pragma once

#include <cstddef>

#include "han/kernels.hpp"
#include "han/tensor.hpp"

namespace han {

/// Spatial enhancement: per channel group, a similarity map between the
/// group's spatial mean and every position, standardized, then passed
/// through sigmoid(gamma * map + beta) and used to reweight the group.
struct SeuParams {
  Tensor gamma;  // {G}
  Tensor beta;   // {G}
};

/// Channel enhancement: sigmoid gates from a 1-D convolution over the
/// channel-wise spatial means. One kernel shared across channels.
struct CeuParams {
  Tensor kernel;  // {k}, k odd
};

/// Cross-modal enhancement. Both inputs pass through a per-channel spatial
/// normalization with a learnable affine, then 1x1 projections to width c.
/// The query stream attends over the key/value stream and the attended
/// values are projected back to C channels and added to the query input.
struct CmeuParams {
  Tensor norm_scale;  // {C}
  Tensor norm_shift;  // {C}
  Tensor wq;          // {C, c}
  Tensor wk;          // {C, c}
  Tensor wv;          // {C, c}
  Tensor wo;          // {c, C}

  std::size_t inner_width() const { return wq.dim(1); }
};

SeuParams make_seu_params(std::size_t groups);
CeuParams make_ceu_params(std::size_t kernel_size);
CmeuParams make_cmeu_params(std::size_t channels, std::size_t inner_width);

// Same shapes, all zeros. Gradient accumulators start from these; the
// backward functions below also accept an empty accumulator and size it.
SeuParams zeros_like(const SeuParams& p);
CeuParams zeros_like(const CeuParams& p);
CmeuParams zeros_like(const CmeuParams& p);

// ---- SEU ----

// Gate map Att_s, one row of H*W values per group.
Tensor seu_attention(const FeatureMap& f, const SeuParams& p, std::size_t groups,
                     double eps = kNormEpsilon);
FeatureMap seu_forward(const FeatureMap& f, const SeuParams& p, std::size_t groups,
                       double eps = kNormEpsilon);
// Returns d loss / d f and accumulates parameter gradients into grad_p.
FeatureMap seu_backward(const FeatureMap& f, const SeuParams& p, std::size_t groups,
                        const FeatureMap& grad_out, SeuParams& grad_p, double eps = kNormEpsilon);

// ---- CEU ----

Tensor ceu_gates(const FeatureMap& f, const CeuParams& p);
FeatureMap ceu_forward(const FeatureMap& f, const CeuParams& p);
FeatureMap ceu_backward(const FeatureMap& f, const CeuParams& p, const FeatureMap& grad_out,
                        CeuParams& grad_p);

// ---- CMEU ----

/// Forward intermediates of one cross-modal unit evaluation. Matrices are
/// position-major: row p is spatial position p.
struct CmeuIntermediates {
  Tensor query_norm;  // {HW, C}
  Tensor kv_norm;     // {HW, C}
  Tensor q, k, v;     // {HW, c}
  Tensor attention;   // {HW, HW}, rows sum to 1
  Tensor context;     // attention * v, {HW, c}
  FeatureMap output;  // {C, H, W}
};

CmeuIntermediates cmeu_evaluate(const FeatureMap& query, const FeatureMap& key_value,
                                const CmeuParams& p, double eps = kNormEpsilon);
FeatureMap cmeu_forward(const FeatureMap& query, const FeatureMap& key_value, const CmeuParams& p,
                        double eps = kNormEpsilon);

struct CmeuInputGrads {
  FeatureMap query;
  FeatureMap key_value;
};

CmeuInputGrads cmeu_backward(const FeatureMap& query, const FeatureMap& key_value,
                             const CmeuParams& p, const FeatureMap& grad_out, CmeuParams& grad_p,
                             double eps = kNormEpsilon);

}  // namespace han
