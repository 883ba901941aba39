#pragma once

#include <string_view>

#include <nlohmann/json.hpp>

namespace keyfield {

/// Extracts the first parseable {...} object from free-form model output.
///
/// Accepts standard JSON plus the deviations chat models commonly produce:
/// single-quoted strings, bare words (Yes/No and other identifiers become
/// strings), trailing commas, raw newlines inside strings, stray prose or
/// code fences around the block, and keys that swallowed their own colon
/// (`"Answer:"No"` or `"Position:[[...]]"`).
///
/// Throws Error(parse_failure) when no block can be recovered.
nlohmann::ordered_json tolerant_json_extract(std::string_view reply);

}  // namespace keyfield
