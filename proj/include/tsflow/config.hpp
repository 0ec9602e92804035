#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tsflow {

// Plain-text configuration: one `section.key = value` per line, `#` comments.
class Config {
 public:
  Config() = default;

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = strip(s.substr(0, eq));
      std::string val = strip(s.substr(eq + 1));
      if (key.empty()) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
      cfg.kv_[key] = val;
    }
    return cfg;
  }

  // "section.key=value" override, as given on the command line.
  void set(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("override must be key=value: " + assignment);
    kv_[strip(assignment.substr(0, eq))] = strip(assignment.substr(eq + 1));
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }

  std::string require_string(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::runtime_error("missing config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    return parse_double(key, it->second);
  }

  double require_double(const std::string& key) const {
    return parse_double(key, require_string(key));
  }

  int get_int(const std::string& key, int def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    return parse_int(key, it->second);
  }

  bool get_bool(const std::string& key, bool def) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config key " + key + ": expected boolean, got '" + v + "'");
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double d;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw std::runtime_error("config key " + key + ": expected number, got '" + v + "'");
    }
    if (pos != v.size())
      throw std::runtime_error("config key " + key + ": trailing characters in '" + v + "'");
    return d;
  }

  static int parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    int i;
    try {
      i = std::stoi(v, &pos);
    } catch (const std::exception&) {
      throw std::runtime_error("config key " + key + ": expected integer, got '" + v + "'");
    }
    if (pos != v.size())
      throw std::runtime_error("config key " + key + ": trailing characters in '" + v + "'");
    return i;
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace tsflow
