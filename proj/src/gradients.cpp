#include "han/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "han/error.hpp"
#include "han/rng.hpp"

namespace han {

namespace {

ModalityPair zero_pair_like(const ModalityPair& p) { return {FeatureMap(p.rgb.dims()), FeatureMap(p.tir.dims())}; }

double pair_dot(const ModalityPair& a, const ModalityPair& b) {
  return dot(a.rgb.values(), b.rgb.values()) + dot(a.tir.values(), b.tir.values());
}

ModalityPair unit_backward(std::size_t unit, const ModalityPair& in, const LayerParams& p, const HanConfig& cfg,
                           const ModalityPair& g_out, LayerParams& gp) {
  switch (unit) {
    case 0:
      return {seu_backward(in.rgb, p.seu_rgb, cfg.groups, g_out.rgb, gp.seu_rgb),
              seu_backward(in.tir, p.seu_tir, cfg.groups, g_out.tir, gp.seu_tir)};
    case 1:
      return {ceu_backward(in.rgb, p.ceu_rgb, g_out.rgb, gp.ceu_rgb),
              ceu_backward(in.tir, p.ceu_tir, g_out.tir, gp.ceu_tir)};
    case 2: {
      // (rgb, cmeu(query = tir, kv = rgb))
      CmeuInputGrads g = cmeu_backward(in.tir, in.rgb, p.cmeu_r2t, g_out.tir, gp.cmeu_r2t);
      g.key_value += g_out.rgb;
      return {std::move(g.key_value), std::move(g.query)};
    }
    case 3: {
      // (cmeu(query = rgb, kv = tir), tir)
      CmeuInputGrads g = cmeu_backward(in.rgb, in.tir, p.cmeu_t2r, g_out.rgb, gp.cmeu_t2r);
      g.key_value += g_out.tir;
      return {std::move(g.query), std::move(g.key_value)};
    }
    default:
      throw ConfigError("unit", "unit index must be 0..3");
  }
}

}  // namespace

BackwardResult backward(const ForwardTape& tape, const HanParams& params, const HanConfig& cfg,
                        const FeatureMap& upstream) {
  if (!tape.valid()) throw UsageError("backward: no recorded forward pass");
  require_same_shape(upstream, tape.fused, "backward upstream");
  if (tape.outputs.size() != cfg.layers || params.layers.size() != cfg.layers) {
    throw UsageError("backward: tape, params and config disagree on layer count");
  }

  const std::size_t layers = cfg.layers;
  const std::size_t units = cfg.units;
  BackwardResult result{zeros_like(params), zero_pair_like(tape.inputs[0][0])};

  // Final fusion: fused = sum_j mean_i(g[L-1][j][i]) * (O_j.rgb + O_j.tir).
  std::vector<ModalityPair> g_out;
  Tensor g_gates({units, units});
  {
    const auto& last = tape.outputs[layers - 1];
    const double inv_n = 1.0 / static_cast<double>(units);
    for (std::size_t j = 0; j < units; ++j) {
      double weight = 0.0;
      for (std::size_t i = 0; i < units; ++i) weight += tape.gates.at(layers - 1, j, i);
      weight *= inv_n;
      ModalityPair g = zero_pair_like(last[j]);
      axpy(weight, upstream, g.rgb);
      axpy(weight, upstream, g.tir);
      g_out.push_back(std::move(g));
      const double g_weight = dot(last[j].rgb, upstream) + dot(last[j].tir, upstream);
      for (std::size_t i = 0; i < units; ++i) g_gates(j, i) = g_weight * inv_n;
    }
  }

  for (std::size_t l = layers; l-- > 0;) {
    const LayerParams& lp = params.layers[l];
    LayerParams& gp = result.params.layers[l];

    if (tape.routed) {
      for (std::size_t j = 0; j < units; ++j) {
        Tensor row({units});
        bool any = false;
        for (std::size_t i = 0; i < units; ++i) {
          row[i] = g_gates(j, i);
          any = any || row[i] != 0.0;
        }
        if (!any) continue;
        const ModalityPair g = router_backward(tape.outputs[l][j], lp.routers[j], row, gp.routers[j]);
        g_out[j].rgb += g.rgb;
        g_out[j].tir += g.tir;
      }
    }

    std::vector<ModalityPair> g_in;
    g_in.reserve(units);
    for (std::size_t i = 0; i < units; ++i) {
      g_in.push_back(unit_backward(i, tape.inputs[l][i], lp, cfg, g_out[i], gp));
    }

    if (l == 0) {
      for (const auto& g : g_in) {
        result.input.rgb += g.rgb;
        result.input.tir += g.tir;
      }
      break;
    }

    // input_i = sum_j gates[l-1][j][i] * O_j^{l-1}
    const auto& prev = tape.outputs[l - 1];
    std::vector<ModalityPair> g_prev;
    Tensor g_prev_gates({units, units});
    for (std::size_t j = 0; j < units; ++j) {
      ModalityPair acc = zero_pair_like(prev[j]);
      for (std::size_t i = 0; i < units; ++i) {
        const double gate = tape.gates.at(l - 1, j, i);
        axpy(gate, g_in[i].rgb, acc.rgb);
        axpy(gate, g_in[i].tir, acc.tir);
        g_prev_gates(j, i) = pair_dot(prev[j], g_in[i]);
      }
      g_prev.push_back(std::move(acc));
    }
    g_out = std::move(g_prev);
    g_gates = std::move(g_prev_gates);
  }

  return result;
}

GradientSet fd_gradient(const ParamLoss& loss_fn, const HanParams& params, double h, unsigned jobs) {
  if (!(h > 0)) throw ConfigError("h", "finite-difference step must be positive");
  GradientSet grad = zeros_like(params);

  std::vector<Tensor*> grad_tensors;
  for_each_param(grad, [&](const std::string&, Tensor& t) { grad_tensors.push_back(&t); });
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < grad_tensors.size(); ++t) {
    for (std::size_t e = 0; e < grad_tensors[t]->size(); ++e) coords.emplace_back(t, e);
  }

  auto worker = [&](std::size_t first, std::size_t stride) {
    HanParams local = params;
    std::vector<Tensor*> local_tensors;
    for_each_param(local, [&](const std::string&, Tensor& t) { local_tensors.push_back(&t); });
    for (std::size_t n = first; n < coords.size(); n += stride) {
      const auto [t, e] = coords[n];
      double& theta = (*local_tensors[t])[e];
      const double saved = theta;
      theta = saved + h;
      const double up = loss_fn(local);
      theta = saved - h;
      const double down = loss_fn(local);
      theta = saved;
      (*grad_tensors[t])[e] = (up - down) / (2.0 * h);
    }
  };

  const unsigned n_jobs = std::max(1u, jobs);
  if (n_jobs == 1) {
    worker(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned j = 0; j < n_jobs; ++j) pool.emplace_back(worker, j, n_jobs);
  }
  return grad;
}

GradientComparison compare_gradients(const GradientSet& analytic, const GradientSet& numeric, double floor) {
  std::vector<std::pair<std::string, const Tensor*>> num;
  for_each_param(numeric, [&](const std::string& name, const Tensor& t) { num.emplace_back(name, &t); });
  GradientComparison cmp;
  std::size_t idx = 0;
  for_each_param(analytic, [&](const std::string& name, const Tensor& a) {
    const Tensor& b = *num.at(idx++).second;
    require_same_shape(a, b, "compare_gradients");
    for (std::size_t e = 0; e < a.size(); ++e) {
      const double denom = std::max({std::abs(a[e]), std::abs(b[e]), floor});
      const double abs_err = std::abs(a[e] - b[e]);
      const double rel = abs_err / denom;
      if (rel > cmp.max_relative_error || !std::isfinite(rel)) {
        cmp = {rel, name, e, a[e], b[e], cmp.max_absolute_error};
      }
      cmp.max_absolute_error = std::max(cmp.max_absolute_error, abs_err);
    }
  });
  return cmp;
}

GradientComparison gradient_check(const HanConfig& cfg, std::uint64_t seed, double h, unsigned jobs) {
  cfg.validate();
  const HanParams params = random_params(cfg, derive_seed(seed, 0), -0.5, 0.5);
  Rng rng(derive_seed(seed, 1));
  auto draw = [&] {
    FeatureMap f = make_feature_map(cfg.channels, cfg.height, cfg.width);
    for (double& v : f.values()) v = rng.uniform(-1.0, 1.0);
    return f;
  };
  const ModalityPair input{draw(), draw()};
  const FeatureMap target = draw();

  const ForwardTape tape = record_forward(input, params, cfg);
  const BackwardResult analytic = backward(tape, params, cfg, mse_gradient(tape.fused, target));
  const GradientSet numeric = fd_gradient(
      [&](const HanParams& p) { return mse(record_forward(input, p, cfg).fused, target); }, params, h, jobs);
  return compare_gradients(analytic.params, numeric);
}

double mse(const FeatureMap& prediction, const FeatureMap& target) {
  require_same_shape(prediction, target, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    s += d * d;
  }
  return s / static_cast<double>(prediction.size());
}

FeatureMap mse_gradient(const FeatureMap& prediction, const FeatureMap& target) {
  require_same_shape(prediction, target, "mse_gradient");
  FeatureMap g(prediction.dims());
  const double scale = 2.0 / static_cast<double>(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) g[i] = scale * (prediction[i] - target[i]);
  return g;
}

}  // namespace han
