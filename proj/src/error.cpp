#include "keyfield/error.hpp"

#include "keyfield/grid.hpp"

namespace keyfield {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::backend_unavailable: return "backend_unavailable";
    case ErrorCode::parse_failure: return "parse_failure";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::internal: return "internal";
  }
  return "internal";
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::parse_failure: return 422;
    case ErrorCode::backend_unavailable: return 502;
    case ErrorCode::internal: return 500;
  }
  return 500;
}

BBox bbox_union(const BBox& a, const BBox& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

std::int64_t intersection_area(const BBox& a, const BBox& b) {
  const int w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1) + 1;
  const int h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1) + 1;
  if (w <= 0 || h <= 0) return 0;
  return static_cast<std::int64_t>(w) * h;
}

}  // namespace keyfield
