#include "pfnf/util/ini.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "pfnf/error.hpp"

namespace pfnf::util {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

nlohmann::json ini_value(const std::string& raw) {
  const std::string v = trim(raw);
  nlohmann::json parsed = nlohmann::json::parse(v, nullptr, /*allow_exceptions=*/false);
  if (!parsed.is_discarded() && !parsed.is_object()) return parsed;
  if (v.find(',') != std::string::npos) {
    nlohmann::json list = nlohmann::json::array();
    std::size_t start = 0;
    while (start <= v.size()) {
      const std::size_t comma = std::min(v.find(',', start), v.size());
      list.push_back(ini_value(v.substr(start, comma - start)));
      start = comma + 1;
    }
    return list;
  }
  return v;
}

nlohmann::json read_ini(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      out[key] = ini_value(node.data());
      continue;
    }
    nlohmann::json section = nlohmann::json::object();
    for (const auto& [k, leaf] : node) section[k] = ini_value(leaf.data());
    out[key] = section;
  }
  return out;
}

}  // namespace pfnf::util
