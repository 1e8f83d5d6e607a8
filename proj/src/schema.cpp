#include "jigmark/schema.hpp"

namespace jigmark {

namespace {

bool type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "integer") return v.is_number_integer() || v.is_number_unsigned();
  if (type == "number") return v.is_number();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  return false;
}

bool validate_node(const nlohmann::json& v, const nlohmann::json& schema,
                   const std::string& path, std::string& error) {
  if (schema.contains("type") &&
      !type_matches(v, schema.at("type").get<std::string>())) {
    error = path + ": expected type " + schema.at("type").get<std::string>();
    return false;
  }
  if (v.is_number()) {
    double x = v.get<double>();
    if (schema.contains("minimum") && x < schema.at("minimum").get<double>()) {
      error = path + ": below minimum";
      return false;
    }
    if (schema.contains("maximum") && x > schema.at("maximum").get<double>()) {
      error = path + ": above maximum";
      return false;
    }
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required")) {
        if (!v.contains(key.get<std::string>())) {
          error = path + ": missing required field " + key.get<std::string>();
          return false;
        }
      }
    const bool closed = schema.value("additionalProperties", true) == false;
    const auto props = schema.contains("properties")
                           ? schema.at("properties")
                           : nlohmann::json::object();
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key)) {
        if (!validate_node(val, props.at(key), path + "/" + key, error))
          return false;
      } else if (closed) {
        error = path + ": unexpected field " + key;
        return false;
      }
    }
  }
  if (v.is_array() && schema.contains("items")) {
    for (size_t i = 0; i < v.size(); ++i)
      if (!validate_node(v[i], schema.at("items"),
                         path + "/" + std::to_string(i), error))
        return false;
  }
  return true;
}

}  // namespace

bool schema_validate(const nlohmann::json& instance,
                     const nlohmann::json& schema, std::string& error) {
  error.clear();
  return validate_node(instance, schema, "#", error);
}

}  // namespace jigmark
