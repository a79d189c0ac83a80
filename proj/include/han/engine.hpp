#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "han/fusion_units.hpp"
#include "han/router.hpp"
#include "han/tensor.hpp"

namespace han {

inline constexpr std::size_t kUnitsPerLayer = 4;

enum class UnitKind : std::size_t { Spatial = 0, Channel = 1, RgbToThermal = 2, ThermalToRgb = 3 };

// "SEU", "CEU", "CMEU_r2t", "CMEU_t2r".
const char* unit_label(std::size_t unit);

/// Shape and hyper-parameters of a hierarchical attention network.
/// inner_width and router_hidden of 0 select their defaults (C/2, at least 1,
/// and max(C, N)).
struct HanConfig {
  std::size_t layers = 3;
  std::size_t units = kUnitsPerLayer;
  std::size_t channels = 16;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t groups = 8;
  std::size_t kernel_size = 3;
  std::size_t inner_width = 0;
  std::size_t router_hidden = 0;
  std::uint64_t seed = 0;

  std::size_t cmeu_width() const;
  std::size_t hidden_width() const;
  std::size_t plane() const { return height * width; }

  // Throws ConfigError naming the first invalid field.
  void validate() const;
  // Copy with the defaulted widths filled in.
  HanConfig resolved() const;

  friend bool operator==(const HanConfig&, const HanConfig&) = default;
};

struct LayerParams {
  SeuParams seu_rgb, seu_tir;
  CeuParams ceu_rgb, ceu_tir;
  CmeuParams cmeu_r2t, cmeu_t2r;
  std::array<RouterParams, kUnitsPerLayer> routers;
};

/// Every learnable tensor of the network. Layers never share storage.
struct HanParams {
  std::vector<LayerParams> layers;
};

// Zero-valued parameters shaped for cfg (CMEU normalization scale is 1).
HanParams make_params(const HanConfig& cfg);
HanParams zeros_like(const HanParams& p);

/// Default initialization from cfg.seed:
///  - SEU gamma = beta = 0 (every spatial gate starts at 0.5),
///  - CEU kernel uniform in [-0.1, 0.1],
///  - CMEU norm scale 1, shift 0, projections Xavier-uniform,
///  - router weights Xavier-uniform, hidden bias 0, output bias 0.5 so the
///    initial gates sit inside the active region of relu(tanh(.)).
HanParams init_params(const HanConfig& cfg);

// Every parameter drawn uniformly from [lo, hi]; used for checks.
HanParams random_params(const HanConfig& cfg, std::uint64_t seed, double lo = -0.5, double hi = 0.5);

// Visits every parameter tensor with its canonical name
// "layer{l}.{seu_rgb|seu_tir|ceu_rgb|ceu_tir|cmeu_r2t|cmeu_t2r|router{j}}.{field}"
// in a fixed order.
template <class Params, class Fn>
void for_each_param(Params& params, Fn&& fn) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& lp = params.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto seu = [&](const char* unit, auto& p) {
      fn(prefix + unit + ".gamma", p.gamma);
      fn(prefix + unit + ".beta", p.beta);
    };
    auto cmeu = [&](const char* unit, auto& p) {
      fn(prefix + unit + ".norm_scale", p.norm_scale);
      fn(prefix + unit + ".norm_shift", p.norm_shift);
      fn(prefix + unit + ".wq", p.wq);
      fn(prefix + unit + ".wk", p.wk);
      fn(prefix + unit + ".wv", p.wv);
      fn(prefix + unit + ".wo", p.wo);
    };
    seu("seu_rgb", lp.seu_rgb);
    seu("seu_tir", lp.seu_tir);
    fn(prefix + "ceu_rgb.kernel", lp.ceu_rgb.kernel);
    fn(prefix + "ceu_tir.kernel", lp.ceu_tir.kernel);
    cmeu("cmeu_r2t", lp.cmeu_r2t);
    cmeu("cmeu_t2r", lp.cmeu_t2r);
    for (std::size_t j = 0; j < lp.routers.size(); ++j) {
      const std::string r = prefix + "router" + std::to_string(j);
      fn(r + ".w1", lp.routers[j].w1);
      fn(r + ".b1", lp.routers[j].b1);
      fn(r + ".w2", lp.routers[j].w2);
      fn(r + ".b2", lp.routers[j].b2);
    }
  }
}

// Throws ShapeError if params do not match cfg exactly.
void check_params(const HanParams& params, const HanConfig& cfg);

/// Realized fusion structure: gates[l][j][i] is the weight on the edge from
/// unit j of layer l to unit i of layer l + 1. The last layer's gates weight
/// the final fusion.
class RouteTensor {
 public:
  RouteTensor() = default;
  RouteTensor(std::size_t layers, std::size_t units, double fill = 0.0);

  std::size_t layers() const noexcept { return layers_; }
  std::size_t units() const noexcept { return units_; }
  bool empty() const noexcept { return values_.empty(); }

  double& at(std::size_t l, std::size_t j, std::size_t i) { return values_[(l * units_ + j) * units_ + i]; }
  double at(std::size_t l, std::size_t j, std::size_t i) const { return values_[(l * units_ + j) * units_ + i]; }

  Tensor layer(std::size_t l) const;
  void set_layer(std::size_t l, const Tensor& gates);

  std::span<const double> values() const noexcept { return values_; }

  friend bool operator==(const RouteTensor&, const RouteTensor&) = default;

 private:
  std::size_t layers_ = 0;
  std::size_t units_ = 0;
  std::vector<double> values_;
};

struct Edge {
  std::size_t layer;
  std::size_t from;
  std::size_t to;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct UnitNorms {
  double input = 0.0;
  double output = 0.0;
};

inline constexpr double kDefaultEdgeThreshold = 0.1;

struct RoutingTrace {
  RouteTensor gates;
  double edge_threshold = kDefaultEdgeThreshold;
  std::vector<Edge> active_edges;
  std::vector<std::array<UnitNorms, kUnitsPerLayer>> unit_norms;  // [layer][unit]
};

// {(l, j, i) : gates[l][j][i] >= threshold}, in (l, j, i) order.
std::vector<Edge> active_edges(const RouteTensor& gates, double threshold);

// ---- forward ----

ModalityPair unit_dispatch(std::size_t unit, const ModalityPair& input, const LayerParams& params,
                           const HanConfig& cfg);

// input_i = sum_j gates(j, i) * prev_j on both streams.
std::vector<ModalityPair> aggregate_inputs(std::size_t layer, std::span<const ModalityPair> prev_outputs,
                                           const Tensor& gates);

/// Everything a forward pass produced; the backward pass consumes it.
struct ForwardTape {
  std::vector<std::vector<ModalityPair>> inputs;   // [layer][unit]
  std::vector<std::vector<ModalityPair>> outputs;  // [layer][unit]
  RouteTensor gates;
  bool routed = true;  // false when gates were injected
  FeatureMap fused;

  bool valid() const noexcept { return !outputs.empty() && !fused.empty(); }
};

// With injected gates the routers are bypassed entirely.
ForwardTape record_forward(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                           const RouteTensor* injected = nullptr);

// Final reduction: sum_j mean_i(gates[L-1][j][i]) * O_j, then rgb + tir.
FeatureMap fuse_outputs(std::span<const ModalityPair> last_outputs, const Tensor& last_gates);

RoutingTrace make_trace(const ForwardTape& tape, double threshold = kDefaultEdgeThreshold);

struct ForwardResult {
  FeatureMap fused;
  RoutingTrace trace;
};

ForwardResult han_forward(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                          double threshold = kDefaultEdgeThreshold);

// Routers bypassed, gates taken from a recorded trace.
ForwardResult han_forward_replay(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                                 const RouteTensor& gates, double threshold = kDefaultEdgeThreshold);

// Router-free dense variant: every gate fixed at 1.
FeatureMap han_forward_static(const ModalityPair& input, const HanParams& params, const HanConfig& cfg);
RouteTensor static_gates(const HanConfig& cfg);

// ---- accounting ----

/// Exact number of scalar parameters.
std::uint64_t param_count(const HanConfig& cfg, bool with_routers = true);

/// Floating-point operations of one forward pass. A multiply-accumulate is
/// two FLOPs; pooling, activations, normalization passes, elementwise
/// scaling and additions count one FLOP per element touched.
std::uint64_t flop_count(const HanConfig& cfg, bool with_routers = true);

}  // namespace han
