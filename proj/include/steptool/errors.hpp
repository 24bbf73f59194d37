#pragma once

#include <stdexcept>
#include <string>

namespace steptool {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct UnknownTask : std::runtime_error {
  explicit UnknownTask(const std::string& m) : std::runtime_error(m) {}
};
struct EpisodeFinished : std::runtime_error {
  explicit EpisodeFinished(const std::string& m) : std::runtime_error(m) {}
};
struct UnknownToken : std::runtime_error {
  explicit UnknownToken(const std::string& m) : std::runtime_error(m) {}
};
struct BudgetExceeded : std::runtime_error {
  explicit BudgetExceeded(const std::string& m) : std::runtime_error(m) {}
};
struct DimensionMismatch : std::runtime_error {
  explicit DimensionMismatch(const std::string& m) : std::runtime_error(m) {}
};
struct LengthMismatch : std::runtime_error {
  explicit LengthMismatch(const std::string& m) : std::runtime_error(m) {}
};
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& m) : std::runtime_error(m) {}
};
struct NonTerminalTrajectory : std::runtime_error {
  explicit NonTerminalTrajectory(const std::string& m) : std::runtime_error(m) {}
};
struct MissingOldLogprobs : std::runtime_error {
  explicit MissingOldLogprobs(const std::string& m) : std::runtime_error(m) {}
};
struct NonSingleStepBatch : std::runtime_error {
  explicit NonSingleStepBatch(const std::string& m) : std::runtime_error(m) {}
};
struct FinalStepNotApplicable : std::runtime_error {
  explicit FinalStepNotApplicable(const std::string& m) : std::runtime_error(m) {}
};
struct IndexOutOfRange : std::runtime_error {
  explicit IndexOutOfRange(const std::string& m) : std::runtime_error(m) {}
};
struct NoIntermediateSteps : std::runtime_error {
  explicit NoIntermediateSteps(const std::string& m) : std::runtime_error(m) {}
};
struct UnpairedTasks : std::runtime_error {
  explicit UnpairedTasks(const std::string& m) : std::runtime_error(m) {}
};
struct EmptyRewards : std::runtime_error {
  explicit EmptyRewards(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace steptool
