#pragma once

#include <string>

#include "json.hpp"

namespace jigmark {

/// Validate an instance against the subset of JSON Schema this project's
/// report schemas use: type, required, properties, items, minimum/maximum,
/// additionalProperties. Returns true and leaves `error` empty on success.
bool schema_validate(const nlohmann::json& instance,
                     const nlohmann::json& schema, std::string& error);

}  // namespace jigmark
