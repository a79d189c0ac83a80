#include "han/engine.hpp"

#include <algorithm>
#include <cmath>

#include "han/error.hpp"
#include "han/kernels.hpp"
#include "han/rng.hpp"

namespace han {

const char* unit_label(std::size_t unit) {
  static constexpr const char* kLabels[kUnitsPerLayer] = {"SEU", "CEU", "CMEU_r2t", "CMEU_t2r"};
  if (unit >= kUnitsPerLayer) throw ConfigError("unit", "unit index out of range");
  return kLabels[unit];
}

std::size_t HanConfig::cmeu_width() const {
  if (inner_width != 0) return inner_width;
  return std::max<std::size_t>(1, channels / 2);
}

std::size_t HanConfig::hidden_width() const {
  if (router_hidden != 0) return router_hidden;
  return std::max(channels, units);
}

void HanConfig::validate() const {
  if (layers < 1) throw ConfigError("L", "L must be at least 1");
  if (units != kUnitsPerLayer) throw ConfigError("N", "N must be 4");
  if (channels < 1) throw ConfigError("C", "C must be positive");
  if (height < 1) throw ConfigError("H", "H must be positive");
  if (width < 1) throw ConfigError("W", "W must be positive");
  if (groups < 1 || channels % groups != 0) throw ConfigError("G", "G must divide C");
  if (kernel_size % 2 == 0) throw ConfigError("k", "k must be odd");
  if (kernel_size > 2 * channels - 1) throw ConfigError("k", "k must not exceed 2C-1");
  if (cmeu_width() < 1) throw ConfigError("c", "c must be at least 1");
  if (hidden_width() < 1) throw ConfigError("H_r", "H_r must be at least 1");
}

HanConfig HanConfig::resolved() const {
  HanConfig r = *this;
  r.inner_width = cmeu_width();
  r.router_hidden = hidden_width();
  return r;
}

HanParams make_params(const HanConfig& cfg) {
  cfg.validate();
  HanParams p;
  p.layers.resize(cfg.layers);
  for (auto& lp : p.layers) {
    lp.seu_rgb = make_seu_params(cfg.groups);
    lp.seu_tir = make_seu_params(cfg.groups);
    lp.ceu_rgb = make_ceu_params(cfg.kernel_size);
    lp.ceu_tir = make_ceu_params(cfg.kernel_size);
    lp.cmeu_r2t = make_cmeu_params(cfg.channels, cfg.cmeu_width());
    lp.cmeu_t2r = make_cmeu_params(cfg.channels, cfg.cmeu_width());
    for (auto& r : lp.routers) r = make_router_params(cfg.channels, cfg.hidden_width(), cfg.units);
  }
  return p;
}

HanParams zeros_like(const HanParams& p) {
  HanParams z = p;
  for_each_param(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

namespace {

void xavier(Tensor& w, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
}

}  // namespace

HanParams init_params(const HanConfig& cfg) {
  HanParams p = make_params(cfg);
  Rng rng(cfg.seed);
  for (auto& lp : p.layers) {
    for (auto* ceu : {&lp.ceu_rgb, &lp.ceu_tir}) {
      for (double& v : ceu->kernel.values()) v = rng.uniform(-0.1, 0.1);
    }
    for (auto* cm : {&lp.cmeu_r2t, &lp.cmeu_t2r}) {
      xavier(cm->wq, rng);
      xavier(cm->wk, rng);
      xavier(cm->wv, rng);
      xavier(cm->wo, rng);
    }
    for (auto& r : lp.routers) {
      xavier(r.w1, rng);
      xavier(r.w2, rng);
      r.b2.fill(0.5);
    }
  }
  return p;
}

HanParams random_params(const HanConfig& cfg, std::uint64_t seed, double lo, double hi) {
  HanParams p = make_params(cfg);
  Rng rng(seed);
  for_each_param(p, [&](const std::string&, Tensor& t) {
    for (double& v : t.values()) v = rng.uniform(lo, hi);
  });
  return p;
}

void check_params(const HanParams& params, const HanConfig& cfg) {
  const HanParams ref = make_params(cfg);
  if (params.layers.size() != ref.layers.size()) {
    throw ShapeError("params have " + std::to_string(params.layers.size()) + " layers, config expects " +
                     std::to_string(ref.layers.size()));
  }
  std::vector<std::pair<std::string, std::vector<std::size_t>>> expected;
  for_each_param(ref, [&](const std::string& name, const Tensor& t) { expected.emplace_back(name, t.dims()); });
  std::size_t idx = 0;
  for_each_param(params, [&](const std::string& name, const Tensor& t) {
    if (t.dims() != expected[idx].second) {
      throw ShapeError("parameter " + name + " has shape " + shape_string(t.dims()) + ", expected " +
                       shape_string(expected[idx].second));
    }
    ++idx;
  });
}

RouteTensor::RouteTensor(std::size_t layers, std::size_t units, double fill)
    : layers_(layers), units_(units), values_(layers * units * units, fill) {}

Tensor RouteTensor::layer(std::size_t l) const {
  if (l >= layers_) throw ShapeError("route tensor layer out of range");
  Tensor m({units_, units_});
  std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(l * units_ * units_), units_ * units_, m.data());
  return m;
}

void RouteTensor::set_layer(std::size_t l, const Tensor& gates) {
  if (l >= layers_ || gates.dims() != std::vector<std::size_t>{units_, units_}) {
    throw ShapeError("route tensor: layer gates must be N x N");
  }
  std::copy_n(gates.data(), units_ * units_, values_.begin() + static_cast<std::ptrdiff_t>(l * units_ * units_));
}

std::vector<Edge> active_edges(const RouteTensor& gates, double threshold) {
  std::vector<Edge> edges;
  for (std::size_t l = 0; l < gates.layers(); ++l) {
    for (std::size_t j = 0; j < gates.units(); ++j) {
      for (std::size_t i = 0; i < gates.units(); ++i) {
        if (gates.at(l, j, i) >= threshold) edges.push_back({l, j, i});
      }
    }
  }
  return edges;
}

ModalityPair unit_dispatch(std::size_t unit, const ModalityPair& input, const LayerParams& params,
                           const HanConfig& cfg) {
  switch (unit) {
    case 0:
      return {seu_forward(input.rgb, params.seu_rgb, cfg.groups), seu_forward(input.tir, params.seu_tir, cfg.groups)};
    case 1:
      return {ceu_forward(input.rgb, params.ceu_rgb), ceu_forward(input.tir, params.ceu_tir)};
    case 2:
      return {input.rgb, cmeu_forward(input.tir, input.rgb, params.cmeu_r2t)};
    case 3:
      return {cmeu_forward(input.rgb, input.tir, params.cmeu_t2r), input.tir};
    default:
      throw ConfigError("unit", "unit index must be 0..3, got " + std::to_string(unit));
  }
}

std::vector<ModalityPair> aggregate_inputs(std::size_t layer, std::span<const ModalityPair> prev_outputs,
                                           const Tensor& gates) {
  if (layer == 0) throw UsageError("aggregate_inputs: layer 0 reads the raw input pair");
  const std::size_t n = prev_outputs.size();
  if (gates.dims() != std::vector<std::size_t>{n, n}) throw ShapeError("aggregate_inputs: gates must be N x N");
  std::vector<ModalityPair> inputs;
  inputs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ModalityPair acc{FeatureMap(prev_outputs[0].rgb.dims()), FeatureMap(prev_outputs[0].tir.dims())};
    for (std::size_t j = 0; j < n; ++j) {
      axpy(gates(j, i), prev_outputs[j].rgb, acc.rgb);
      axpy(gates(j, i), prev_outputs[j].tir, acc.tir);
    }
    inputs.push_back(std::move(acc));
  }
  return inputs;
}

FeatureMap fuse_outputs(std::span<const ModalityPair> last_outputs, const Tensor& last_gates) {
  const std::size_t n = last_outputs.size();
  FeatureMap fused(last_outputs.front().rgb.dims());
  for (std::size_t j = 0; j < n; ++j) {
    double weight = 0.0;
    for (std::size_t i = 0; i < last_gates.cols(); ++i) weight += last_gates(j, i);
    weight /= static_cast<double>(last_gates.cols());
    axpy(weight, last_outputs[j].rgb, fused);
    axpy(weight, last_outputs[j].tir, fused);
  }
  return fused;
}

namespace {

void check_input(const ModalityPair& input, const HanConfig& cfg) {
  require_feature_map(input.rgb, "han input rgb");
  require_feature_map(input.tir, "han input tir");
  const std::vector<std::size_t> expected{cfg.channels, cfg.height, cfg.width};
  if (input.rgb.dims() != expected || input.tir.dims() != expected) {
    throw ConfigError("input", "input pair " + shape_string(input.rgb.dims()) + "/" + shape_string(input.tir.dims()) +
                                   " does not match configured " + shape_string(expected));
  }
}

}  // namespace

ForwardTape record_forward(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                           const RouteTensor* injected) {
  cfg.validate();
  check_input(input, cfg);
  check_params(params, cfg);
  if (injected && (injected->layers() != cfg.layers || injected->units() != cfg.units)) {
    throw ConfigError("gates", "injected route tensor does not match L x N x N");
  }

  ForwardTape tape;
  tape.routed = injected == nullptr;
  tape.gates = injected ? *injected : RouteTensor(cfg.layers, cfg.units);
  tape.inputs.resize(cfg.layers);
  tape.outputs.resize(cfg.layers);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (l == 0) {
      tape.inputs[0].assign(cfg.units, input);
    } else {
      tape.inputs[l] = aggregate_inputs(l, tape.outputs[l - 1], tape.gates.layer(l - 1));
    }
    auto& outs = tape.outputs[l];
    outs.reserve(cfg.units);
    for (std::size_t i = 0; i < cfg.units; ++i) {
      outs.push_back(unit_dispatch(i, tape.inputs[l][i], params.layers[l], cfg));
    }
    if (tape.routed) tape.gates.set_layer(l, route_layer(outs, params.layers[l].routers));
  }

  tape.fused = fuse_outputs(tape.outputs.back(), tape.gates.layer(cfg.layers - 1));
  if (!tape.fused.all_finite()) throw NumericError("han forward produced non-finite values");
  return tape;
}

RoutingTrace make_trace(const ForwardTape& tape, double threshold) {
  RoutingTrace trace;
  trace.gates = tape.gates;
  trace.edge_threshold = threshold;
  trace.active_edges = active_edges(tape.gates, threshold);
  trace.unit_norms.resize(tape.outputs.size());
  for (std::size_t l = 0; l < tape.outputs.size(); ++l) {
    for (std::size_t i = 0; i < tape.outputs[l].size(); ++i) {
      trace.unit_norms[l][i] = {pair_norm(tape.inputs[l][i]), pair_norm(tape.outputs[l][i])};
    }
  }
  return trace;
}

ForwardResult han_forward(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                          double threshold) {
  ForwardTape tape = record_forward(input, params, cfg);
  RoutingTrace trace = make_trace(tape, threshold);
  return {std::move(tape.fused), std::move(trace)};
}

ForwardResult han_forward_replay(const ModalityPair& input, const HanParams& params, const HanConfig& cfg,
                                 const RouteTensor& gates, double threshold) {
  ForwardTape tape = record_forward(input, params, cfg, &gates);
  RoutingTrace trace = make_trace(tape, threshold);
  return {std::move(tape.fused), std::move(trace)};
}

RouteTensor static_gates(const HanConfig& cfg) { return RouteTensor(cfg.layers, cfg.units, 1.0); }

FeatureMap han_forward_static(const ModalityPair& input, const HanParams& params, const HanConfig& cfg) {
  const RouteTensor ones = static_gates(cfg);
  return record_forward(input, params, cfg, &ones).fused;
}

std::uint64_t param_count(const HanConfig& cfg, bool with_routers) {
  cfg.validate();
  const std::uint64_t C = cfg.channels, G = cfg.groups, k = cfg.kernel_size;
  const std::uint64_t c = cfg.cmeu_width(), hr = cfg.hidden_width(), N = cfg.units;
  const std::uint64_t seu = 2 * G;
  const std::uint64_t ceu = k;
  const std::uint64_t cmeu = 2 * C + 4 * C * c;
  const std::uint64_t router = 4 * C * hr + hr + hr * N + N;
  std::uint64_t per_layer = 2 * seu + 2 * ceu + 2 * cmeu;
  if (with_routers) per_layer += N * router;
  return per_layer * cfg.layers;
}

std::uint64_t flop_count(const HanConfig& cfg, bool with_routers) {
  cfg.validate();
  const std::uint64_t C = cfg.channels, G = cfg.groups, k = cfg.kernel_size;
  const std::uint64_t c = cfg.cmeu_width(), hr = cfg.hidden_width(), N = cfg.units;
  const std::uint64_t P = cfg.plane();

  // pool + similarity MAC + 3-pass normalization + affine MAC + sigmoid + reweight
  const std::uint64_t seu = C * P + 2 * C * P + 3 * G * P + 2 * G * P + G * P + C * P;
  // pool + conv MACs + sigmoid + reweight
  const std::uint64_t ceu = C * P + 2 * k * C + C + C * P;
  // two normalizations with affine, Q/K/V projections, scores + scaling,
  // softmax (exp, sum, divide), context, back-projection, residual add
  const std::uint64_t cmeu = 2 * (3 * C * P + 2 * C * P) + 3 * 2 * P * C * c + 2 * P * P * c + P * P +
                             3 * P * P + 2 * P * P * c + 2 * P * c * C + C * P;
  // GAP + GMP over 2C channels, two affine layers with bias, relu, tanh, relu
  const std::uint64_t router = 2 * 2 * C * P + 2 * 4 * C * hr + hr + hr + 2 * hr * N + N + 2 * N;

  std::uint64_t per_layer = 2 * seu + 2 * ceu + 2 * cmeu;
  if (with_routers) per_layer += N * router;
  // weighted sums over N pairs for each of N inputs
  const std::uint64_t aggregation = N * N * 2 * 2 * C * P;
  // gate means, weighted sum over N pairs, stream add
  const std::uint64_t fusion = N * N + N * 2 * 2 * C * P + C * P;
  return per_layer * cfg.layers + aggregation * (cfg.layers - 1) + fusion;
}

}  // namespace han
