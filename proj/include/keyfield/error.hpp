#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace keyfield {

enum class ErrorCode {
  invalid_input,
  backend_unavailable,
  parse_failure,
  not_found,
  internal,
};

std::string_view to_string(ErrorCode code);

// Fixed mapping used by the HTTP layer.
int http_status(ErrorCode code);

/// Exception carrying an error category and, optionally, the pipeline stage
/// that raised it ("segment", "caption", "stage1", ...).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string stage = {})
      : std::runtime_error(message), code_(code), stage_(std::move(stage)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& stage() const noexcept { return stage_; }

  Error with_stage(std::string stage) const {
    return Error(code_, what(), std::move(stage));
  }

 private:
  ErrorCode code_;
  std::string stage_;
};

}  // namespace keyfield
