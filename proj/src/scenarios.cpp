#include "han/scenarios.hpp"

#include <cmath>
#include <numbers>

#include "han/error.hpp"
#include "han/rng.hpp"

namespace han {

std::string_view scenario_name(ScenarioClass cls) {
  switch (cls) {
    case ScenarioClass::CleanBoth: return "clean-both";
    case ScenarioClass::NoisyTir: return "noisy-tir";
    case ScenarioClass::NoisyRgb: return "noisy-rgb";
    case ScenarioClass::Complementary: return "complementary";
    case ScenarioClass::LowContrast: return "low-contrast";
  }
  throw ConfigError("class", "unknown scenario class");
}

std::optional<ScenarioClass> parse_scenario_class(std::string_view name) {
  for (auto cls : kAllScenarioClasses) {
    if (scenario_name(cls) == name) return cls;
  }
  return std::nullopt;
}

namespace {

constexpr int kModes = 5;

void add_noise(FeatureMap& f, double sigma, Rng& rng) {
  for (double& v : f.values()) v += sigma * rng.normal();
}

}  // namespace

FeatureMap smooth_field(std::size_t channels, std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMap f = make_feature_map(channels, height, width);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t c = 0; c < channels; ++c) {
    for (int m = 0; m < kModes; ++m) {
      const double fy = static_cast<double>(rng.below(2));
      const double fx = static_cast<double>(rng.below(2));
      const double amp = rng.uniform(-1.0, 1.0);
      const double phase = rng.uniform(0.0, two_pi);
      for (std::size_t h = 0; h < height; ++h) {
        for (std::size_t w = 0; w < width; ++w) {
          const double arg = two_pi * (fy * static_cast<double>(h) / static_cast<double>(height) +
                                       fx * static_cast<double>(w) / static_cast<double>(width));
          f(c, h, w) += amp * std::cos(arg + phase);
        }
      }
    }
  }
  return f;
}

Scenario generate(ScenarioClass cls, const HanConfig& cfg, std::uint64_t seed) {
  const FeatureMap base = smooth_field(cfg.channels, cfg.height, cfg.width, derive_seed(seed, 0));
  Rng noise(derive_seed(seed, 1));
  Scenario s{cls, {base, base}, base, seed};
  switch (cls) {
    case ScenarioClass::CleanBoth:
      break;
    case ScenarioClass::NoisyTir:
      add_noise(s.input.tir, kNoiseSigma, noise);
      break;
    case ScenarioClass::NoisyRgb:
      add_noise(s.input.rgb, kNoiseSigma, noise);
      break;
    case ScenarioClass::Complementary: {
      const std::size_t half = cfg.channels / 2;
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        auto& silent = c < half ? s.input.tir : s.input.rgb;
        for (double& v : silent.channel(c)) v = 0.0;
      }
      break;
    }
    case ScenarioClass::LowContrast:
      s.input.rgb *= kLowContrastGain;
      s.input.tir *= kLowContrastGain;
      add_noise(s.input.rgb, kLowContrastSigma, noise);
      add_noise(s.input.tir, kLowContrastSigma, noise);
      break;
    default:
      throw ConfigError("class", "unknown scenario class");
  }
  return s;
}

std::vector<Scenario> make_dataset(const ClassCounts& counts, const HanConfig& cfg, std::uint64_t seed) {
  std::vector<Scenario> out;
  std::uint64_t n = 0;
  for (const auto& [cls, count] : counts) {
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate(cls, cfg, derive_seed(seed, n++)));
  }
  return out;
}

}  // namespace han
