#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

namespace pfnf::util {

// Reads an INI file into {section: {key: value}}. Values that parse as JSON
// (numbers, booleans, [lists]) keep their type; comma-separated words become
// a list of strings; anything else stays a string. Keys outside a section
// land in the top-level object. Throws IoError / ParseError.
nlohmann::json read_ini(const std::filesystem::path& path);

// Same conversion for a single value.
nlohmann::json ini_value(const std::string& raw);

}  // namespace pfnf::util
