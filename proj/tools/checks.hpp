#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace han::cli {

enum class CheckLevel { Fast, Full };

struct SuiteResult {
  bool passed = true;
  std::vector<std::string> notes;   // printed either way
  std::vector<std::string> failures;
  std::string name;
};

struct CheckOptions {
  CheckLevel level = CheckLevel::Fast;
  std::optional<std::filesystem::path> params;
  unsigned jobs = 1;
};

// Runs the property suites for the level, printing one line per suite as it
// finishes. Returns every result.
std::vector<SuiteResult> run_checks(const CheckOptions& opts, std::ostream& out);

}  // namespace han::cli
