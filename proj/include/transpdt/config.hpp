#pragma once

// `key = value` configuration files. Blank lines and `#` comments are ignored.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "transpdt/errors.hpp"

namespace transpdt {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is, const std::string& origin = "<config>") {
    KeyValueConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    return parse(is, path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  template <typename T>
  void read(const std::string& key, T& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    used_.insert(key);
    std::istringstream ss(it->second);
    if constexpr (std::is_same_v<T, bool>) {
      const std::string& v = it->second;
      if (v == "true" || v == "1") out = true;
      else if (v == "false" || v == "0") out = false;
      else throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
      return;
    } else {
      T v{};
      ss >> v;
      if (ss.fail() || !(ss >> std::ws).eof())
        throw ConfigError("config key '" + key + "': cannot parse '" + it->second + "'");
      out = v;
    }
  }

  // Keys present in the file that no read() consumed.
  std::set<std::string> unused() const {
    std::set<std::string> u;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) u.insert(k);
    return u;
  }

  void reject_unused() const {
    const auto u = unused();
    if (u.empty()) return;
    std::string msg = "unknown config key(s):";
    for (const auto& k : u) msg += " " + k;
    throw ConfigError(msg);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace transpdt
