#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "han/engine.hpp"
#include "han/scenarios.hpp"

namespace han {

/// d loss / d theta for every parameter, shaped exactly like HanParams.
using GradientSet = HanParams;

struct BackwardResult {
  GradientSet params;
  ModalityPair input;
};

/// Reverse-mode pass through a recorded forward. `upstream` is d loss / d
/// fused. When the tape carries injected gates the routers are not part of
/// the graph and their gradients stay zero. Throws UsageError on an empty
/// tape.
BackwardResult backward(const ForwardTape& tape, const HanParams& params, const HanConfig& cfg,
                        const FeatureMap& upstream);

using ParamLoss = std::function<double(const HanParams&)>;

/// Central differences (loss(theta + h) - loss(theta - h)) / 2h, one
/// parameter at a time. Work is split across `jobs` threads; loss_fn must
/// be safe to call concurrently.
GradientSet fd_gradient(const ParamLoss& loss_fn, const HanParams& params, double h = 1e-5, unsigned jobs = 1);

struct GradientComparison {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_absolute_error = 0.0;
};

// max |a - b| / max(|a|, |b|, floor) over all entries.
GradientComparison compare_gradients(const GradientSet& analytic, const GradientSet& numeric,
                                     double floor = 1e-8);

// Analytic vs central-difference gradients of the MSE between the fused
// output and a random target, with params drawn from [-0.5, 0.5] and inputs
// and target from [-1, 1], all derived from `seed`.
GradientComparison gradient_check(const HanConfig& cfg, std::uint64_t seed, double h = 1e-5, unsigned jobs = 1);

// Mean squared error and its gradient with respect to `prediction`.
double mse(const FeatureMap& prediction, const FeatureMap& target);
FeatureMap mse_gradient(const FeatureMap& prediction, const FeatureMap& target);

struct TrainConfig {
  double step_size = 0.05;
  std::size_t steps = 200;
  std::uint64_t seed = 7;
};

struct TrainResult {
  std::vector<double> loss_curve;      // mean dataset loss before each step, plus the final loss
  std::vector<double> smoothed_curve;  // running minimum of loss_curve
  std::map<ScenarioClass, RouteTensor> mean_gates;  // after training
  HanParams params;
  bool diverged = false;
  std::size_t diverged_at = 0;
};

/// Full-batch gradient descent on mean MSE between fused output and target.
/// On a non-finite loss, stops and reports the step index.
TrainResult train_demo(const std::vector<Scenario>& scenarios, const HanConfig& cfg, const TrainConfig& tcfg);
TrainResult train_demo(const std::vector<Scenario>& scenarios, const HanConfig& cfg, HanParams init,
                       const TrainConfig& tcfg);

// Mean gate tensor per scenario class under params.
std::map<ScenarioClass, RouteTensor> mean_gates_by_class(const std::vector<Scenario>& scenarios,
                                                         const HanParams& params, const HanConfig& cfg);

double l1_distance(const RouteTensor& a, const RouteTensor& b);

// The configuration and dataset the training demonstration uses by default.
HanConfig demo_config();
ClassCounts demo_counts();

}  // namespace han
