#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "han/engine.hpp"
#include "han/tensor.hpp"

namespace han {

enum class ScenarioClass { CleanBoth, NoisyTir, NoisyRgb, Complementary, LowContrast };

inline constexpr ScenarioClass kAllScenarioClasses[] = {ScenarioClass::CleanBoth, ScenarioClass::NoisyTir,
                                                        ScenarioClass::NoisyRgb, ScenarioClass::Complementary,
                                                        ScenarioClass::LowContrast};

// "clean-both", "noisy-tir", "noisy-rgb", "complementary", "low-contrast".
std::string_view scenario_name(ScenarioClass cls);
std::optional<ScenarioClass> parse_scenario_class(std::string_view name);

inline constexpr double kNoiseSigma = 2.0;
inline constexpr double kLowContrastGain = 0.1;
inline constexpr double kLowContrastSigma = 0.05;

/// A synthetic two-modality frame with its noise-free target.
struct Scenario {
  ScenarioClass cls;
  ModalityPair input;
  FeatureMap target;
  std::uint64_t seed;
};

// Smooth base field: per channel, a sum of five cosine modes with spatial
// frequencies in {0, 1} per axis and random amplitude/phase (RMS about 0.9).
FeatureMap smooth_field(std::size_t channels, std::size_t height, std::size_t width, std::uint64_t seed);

Scenario generate(ScenarioClass cls, const HanConfig& cfg, std::uint64_t seed);

using ClassCounts = std::vector<std::pair<ScenarioClass, std::size_t>>;

// Scenarios grouped by class in the order given; scenario n gets seed
// derive_seed(seed, n).
std::vector<Scenario> make_dataset(const ClassCounts& counts, const HanConfig& cfg, std::uint64_t seed);

}  // namespace han
