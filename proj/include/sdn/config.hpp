#pragma once

// Sectioned key-value configuration:
//
//   # comment
//   [section]
//   key = value
//
// Serialization is canonical (sections and keys sorted, one space around '='),
// so the FNV-1a hash of `serialize()` identifies a configuration.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "sdn/errors.hpp"

namespace sdn {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Shortest decimal form that round-trips a double.
inline std::string format_real(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Config {
 public:
  using Section = std::map<std::string, std::string>;

  static Config parse(std::string_view text) {
    Config cfg;
    std::string current;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
        current = trim(std::string_view(t).substr(1, t.size() - 2));
        cfg.sections_[current];
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(std::string_view(t).substr(0, eq));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      cfg.sections_[current][key] = trim(std::string_view(t).substr(eq + 1));
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  [[nodiscard]] std::string serialize() const {
    std::string out;
    for (const auto& [name, kv] : sections_) {
      if (!name.empty()) out += "[" + name + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    }
    return out;
  }

  [[nodiscard]] std::uint64_t hash() const { return fnv1a64(serialize()); }

  [[nodiscard]] bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) != 0;
  }
  [[nodiscard]] const std::map<std::string, Section>& sections() const { return sections_; }
  [[nodiscard]] bool has_section(const std::string& section) const { return sections_.count(section) != 0; }

  [[nodiscard]] const Section& section(const std::string& name) const {
    static const Section empty;
    auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
  }

  void set(const std::string& section, const std::string& key, std::string value) {
    sections_[section][key] = std::move(value);
  }
  void set(const std::string& section, const std::string& key, double value) { set(section, key, format_real(value)); }
  void set(const std::string& section, const std::string& key, long long value) {
    set(section, key, std::to_string(value));
  }
  void set(const std::string& section, const std::string& key, int value) {
    set(section, key, std::to_string(value));
  }
  void set(const std::string& section, const std::string& key, std::uint64_t value) {
    set(section, key, std::to_string(value));
  }
  void set(const std::string& section, const std::string& key, const char* value) {
    set(section, key, std::string(value));
  }
  void set_section(const std::string& name, Section kv) { sections_[name] = std::move(kv); }

  [[nodiscard]] std::string get_string(const std::string& section, const std::string& key,
                                       const std::string& fallback) const {
    return has(section, key) ? sections_.at(section).at(key) : fallback;
  }
  [[nodiscard]] std::string require_string(const std::string& section, const std::string& key) const {
    if (!has(section, key)) throw ConfigError("missing config key [" + section + "] " + key);
    return sections_.at(section).at(key);
  }
  [[nodiscard]] double get_real(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? to_real(section, key, sections_.at(section).at(key)) : fallback;
  }
  [[nodiscard]] long long get_int(const std::string& section, const std::string& key, long long fallback) const {
    return has(section, key) ? to_int(section, key, sections_.at(section).at(key)) : fallback;
  }
  [[nodiscard]] bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string& v = sections_.at(section).at(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("[" + section + "] " + key + ": expected boolean, got '" + v + "'");
  }

  static double to_real(const std::string& section, const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("[" + section + "] " + key + ": expected real, got '" + v + "'");
    }
  }
  static long long to_int(const std::string& section, const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const long long i = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return i;
    } catch (const std::exception&) {
      throw ConfigError("[" + section + "] " + key + ": expected integer, got '" + v + "'");
    }
  }

 private:
  std::map<std::string, Section> sections_;
};

}  // namespace sdn
