#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cap {

enum class ErrorCode {
  kEmptyInput,
  kDegenerateLabels,
  kInvalidConfig,
  kIncompleteMatrix,
  kRangeError,
  kInvalidSpec,
  kInvalidData,
  kParseError,
  kMissingFeature,
  kDuplicateId,
  kDependencyUnmet,
  kAgentCallFailed,
  kTemplateMissing,
  kNotFound,
  kCorruptEntity,
  kConflict,
};

// Stable machine-readable name, e.g. "degenerate_labels".
std::string_view error_code_name(ErrorCode code);
std::optional<ErrorCode> parse_error_code(std::string_view name);

// Every failure raised by the library carries one of the codes above so the
// CLI and the HTTP layer can map it to an exit status or a response.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string field = {})
      : std::runtime_error(message), code_(code), field_(std::move(field)) {}

  ErrorCode code() const noexcept { return code_; }
  // Dotted path of the offending input field, when one applies.
  const std::string& field() const noexcept { return field_; }

 private:
  ErrorCode code_;
  std::string field_;
};

}  // namespace cap
