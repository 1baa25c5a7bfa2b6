#include "cap/error.hpp"

namespace cap {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kDegenerateLabels: return "degenerate_labels";
    case ErrorCode::kInvalidConfig: return "invalid_config";
    case ErrorCode::kIncompleteMatrix: return "incomplete_matrix";
    case ErrorCode::kRangeError: return "range_error";
    case ErrorCode::kInvalidSpec: return "invalid_spec";
    case ErrorCode::kInvalidData: return "invalid_data";
    case ErrorCode::kParseError: return "parse_error";
    case ErrorCode::kMissingFeature: return "missing_feature";
    case ErrorCode::kDuplicateId: return "duplicate_id";
    case ErrorCode::kDependencyUnmet: return "dependency_unmet";
    case ErrorCode::kAgentCallFailed: return "agent_call_failed";
    case ErrorCode::kTemplateMissing: return "template_missing";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kCorruptEntity: return "corrupt_entity";
    case ErrorCode::kConflict: return "conflict";
  }
  return "unknown";
}

std::optional<ErrorCode> parse_error_code(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::kConflict); ++i) {
    const auto code = static_cast<ErrorCode>(i);
    if (error_code_name(code) == name) return code;
  }
  return std::nullopt;
}

}  // namespace cap
