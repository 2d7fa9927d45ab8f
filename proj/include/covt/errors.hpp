#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace covt {

// Base for every domain error. `kind` carries the machine-readable error
// name used by the CLI when mapping to exit codes and messages.
struct Error : std::runtime_error {
  Error(std::string k, const std::string& msg)
      : std::runtime_error(k + ": " + msg), kind(std::move(k)) {}
  std::string kind;
};

#define COVT_ERROR(Name)                            \
  struct Name : Error {                             \
    explicit Name(const std::string& msg)           \
        : Error(#Name, msg) {}                      \
  }

COVT_ERROR(MissingField);
COVT_ERROR(InvalidValue);
COVT_ERROR(ShapeMismatch);
COVT_ERROR(RankTooLarge);
COVT_ERROR(BudgetExceeded);
COVT_ERROR(NonSquare);
COVT_ERROR(EmptyTargets);
COVT_ERROR(InvalidScene);
COVT_ERROR(UnknownExpert);
COVT_ERROR(UnknownStage);
COVT_ERROR(MalformedThought);
COVT_ERROR(MissingExpertCache);
COVT_ERROR(NonFiniteLoss);
COVT_ERROR(IoFailure);
COVT_ERROR(NoVisualSlots);
COVT_ERROR(MissingExpertArtifacts);

#undef COVT_ERROR

}  // namespace covt
