#include <algorithm>
#include <cmath>

#include "han/error.hpp"
#include "han/gradients.hpp"

namespace han {

HanConfig demo_config() {
  HanConfig cfg;
  cfg.layers = 2;
  cfg.channels = 16;
  cfg.height = 4;
  cfg.width = 4;
  cfg.groups = 8;
  cfg.kernel_size = 3;
  cfg.inner_width = 8;
  return cfg;
}

ClassCounts demo_counts() {
  return {{ScenarioClass::CleanBoth, 4},
          {ScenarioClass::NoisyTir, 4},
          {ScenarioClass::NoisyRgb, 4},
          {ScenarioClass::Complementary, 4},
          {ScenarioClass::LowContrast, 4}};
}

std::map<ScenarioClass, RouteTensor> mean_gates_by_class(const std::vector<Scenario>& scenarios,
                                                         const HanParams& params, const HanConfig& cfg) {
  std::map<ScenarioClass, RouteTensor> sums;
  std::map<ScenarioClass, std::size_t> counts;
  for (const auto& s : scenarios) {
    const ForwardTape tape = record_forward(s.input, params, cfg);
    auto [it, inserted] = sums.try_emplace(s.cls, cfg.layers, cfg.units);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t j = 0; j < cfg.units; ++j) {
        for (std::size_t i = 0; i < cfg.units; ++i) it->second.at(l, j, i) += tape.gates.at(l, j, i);
      }
    }
    ++counts[s.cls];
  }
  for (auto& [cls, sum] : sums) {
    const double inv = 1.0 / static_cast<double>(counts[cls]);
    for (std::size_t l = 0; l < sum.layers(); ++l) {
      for (std::size_t j = 0; j < sum.units(); ++j) {
        for (std::size_t i = 0; i < sum.units(); ++i) sum.at(l, j, i) *= inv;
      }
    }
  }
  return sums;
}

double l1_distance(const RouteTensor& a, const RouteTensor& b) {
  if (a.layers() != b.layers() || a.units() != b.units()) throw ShapeError("l1_distance: route tensor shapes differ");
  double s = 0.0;
  for (std::size_t n = 0; n < a.values().size(); ++n) s += std::abs(a.values()[n] - b.values()[n]);
  return s;
}

TrainResult train_demo(const std::vector<Scenario>& scenarios, const HanConfig& cfg, const TrainConfig& tcfg) {
  HanConfig seeded = cfg;
  seeded.seed = tcfg.seed;
  return train_demo(scenarios, cfg, init_params(seeded), tcfg);
}

TrainResult train_demo(const std::vector<Scenario>& scenarios, const HanConfig& cfg, HanParams init,
                       const TrainConfig& tcfg) {
  if (!(tcfg.step_size >= 0)) throw ConfigError("step_size", "step size must be non-negative");
  if (scenarios.empty()) throw ConfigError("scenarios", "training set is empty");

  TrainResult result;
  result.params = std::move(init);
  const double inv_count = 1.0 / static_cast<double>(scenarios.size());

  for (std::size_t step = 0; step <= tcfg.steps; ++step) {
    const bool last = step == tcfg.steps;
    double loss = 0.0;
    GradientSet grad;
    if (!last) grad = zeros_like(result.params);
    for (const auto& s : scenarios) {
      const ForwardTape tape = [&] {
        try {
          return record_forward(s.input, result.params, cfg);
        } catch (const NumericError&) {
          return ForwardTape{};
        }
      }();
      if (!tape.valid()) {
        loss = std::nan("");
        break;
      }
      loss += mse(tape.fused, s.target) * inv_count;
      if (last) continue;
      FeatureMap upstream = mse_gradient(tape.fused, s.target);
      upstream *= inv_count;
      const BackwardResult b = backward(tape, result.params, cfg, upstream);
      std::vector<Tensor*> acc;
      for_each_param(grad, [&](const std::string&, Tensor& t) { acc.push_back(&t); });
      std::size_t n = 0;
      for_each_param(b.params, [&](const std::string&, const Tensor& t) { *acc[n++] += t; });
    }

    if (!std::isfinite(loss)) {
      result.diverged = true;
      result.diverged_at = step;
      break;
    }
    result.loss_curve.push_back(loss);
    if (last) break;

    std::vector<const Tensor*> g;
    for_each_param(grad, [&](const std::string&, const Tensor& t) { g.push_back(&t); });
    std::size_t n = 0;
    for_each_param(result.params, [&](const std::string&, Tensor& t) { axpy(-tcfg.step_size, *g[n++], t); });
  }

  result.smoothed_curve.resize(result.loss_curve.size());
  double best = INFINITY;
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
    best = std::min(best, result.loss_curve[i]);
    result.smoothed_curve[i] = best;
  }
  if (!result.diverged) result.mean_gates = mean_gates_by_class(scenarios, result.params, cfg);
  return result;
}

}  // namespace han
