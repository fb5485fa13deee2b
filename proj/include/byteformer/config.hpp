#pragma once

// Flat dotted-key configuration read from key=value text or a JSON document.
// Nested JSON objects flatten to "outer.inner"; arrays become comma lists.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "byteformer/errors.hpp"

namespace byteformer {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

inline void flatten_json(const nlohmann::json& node, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (node.is_object()) {
    for (const auto& [key, value] : node.items()) flatten_json(value, prefix.empty() ? key : prefix + "." + key, out);
    return;
  }
  if (prefix.empty()) throw ConfigError("JSON config must be an object");
  if (node.is_array()) {
    std::string joined;
    for (std::size_t i = 0; i < node.size(); ++i) {
      if (node[i].is_structured()) throw ConfigError("key '" + prefix + "' holds a nested array or object");
      joined += (i ? "," : "") + (node[i].is_string() ? node[i].get<std::string>() : node[i].dump());
    }
    out[prefix] = joined;
  } else if (node.is_string()) {
    out[prefix] = node.get<std::string>();
  } else if (node.is_null()) {
    throw ConfigError("key '" + prefix + "' is null");
  } else {
    out[prefix] = node.dump();
  }
}

}  // namespace detail

class Config {
 public:
  Config() = default;
  explicit Config(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  // JSON when the first non-blank character is '{', key=value lines otherwise.
  static Config parse(std::string_view text, const std::string& source = "<config>") {
    const std::string body = detail::trim(text);
    Config cfg;
    if (!body.empty() && body.front() == '{') {
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(body);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": invalid JSON: " + e.what());
      }
      detail::flatten_json(doc, "", cfg.values_);
      return cfg;
    }
    std::istringstream in{std::string(text)};
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string stripped = detail::trim(line);
      if (stripped.empty()) continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
      }
      const std::string key = detail::trim(stripped.substr(0, eq));
      if (cfg.values_.count(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      cfg.values_[key] = detail::trim(stripped.substr(eq + 1));
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void erase(const std::string& key) { values_.erase(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required key '" + key + "'");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
  }

  std::uint64_t get_uint(const std::string& key) const {
    const std::string v = get_string(key);
    std::uint64_t out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || end != v.data() + v.size()) {
      throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
    return out;
  }
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint(key) : fallback;
  }

  double get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  }
  double get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
  }

  std::vector<std::size_t> get_uint_list(const std::string& key, std::vector<std::size_t> fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::size_t> out;
    std::stringstream in(get_string(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      Config one(std::map<std::string, std::string>{{key, item}});
      out.push_back(one.get_uint(key));
    }
    return out;
  }

  // Rejects keys outside the schema, naming the first offender.
  void require_known(const std::set<std::string>& schema) const {
    for (const auto& [key, value] : values_) {
      if (!schema.count(key)) throw ConfigError("unknown key '" + key + "'");
    }
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + "=" + value + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace byteformer
