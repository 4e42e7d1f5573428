#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <string>

#include "lsd/errors.hpp"

namespace lsd::config {

// Flat key=value settings with dotted namespaces ("train.lr=0.001").
// '#' starts a comment; duplicate keys are rejected at parse time but
// set() overrides are allowed afterwards.
class Config {
 public:
  static Config parse(std::istream& is, const std::string& origin);
  static Config from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  const std::string& get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Canonical sorted key=value text; stable across runs, used for manifests
  // and checkpoint headers.
  std::string render() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace lsd::config
