#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "cil.hpp"
#include "data.hpp"

namespace catf {

// Flat dotted-key configuration. Every key has a built-in default; unknown
// keys are rejected at every layer.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<std::pair<std::string, std::string>>& defaults();
  static bool known(const std::string& key);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool explicitly_set(const std::string& key) const { return explicit_.count(key) != 0; }

  // `key = value` lines, `#` comments, blank lines ignored.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::string& path);

  // Fully resolved config in default key order, one `key = value` per line.
  std::string to_text() const;

  ModelConfig model() const;
  TrainConfig train() const;
  SplitSpec split() const;
  std::uint64_t seed() const;
  std::string out_dir() const;
  std::string data_source() const;
  int corrupt_frozen_at_task() const;

  // Typed accessors; malformed values raise ConfigError naming the key.
  long long get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  double get_double(const std::string& key) const;
  float get_float(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Parses every typed key; throws ConfigError on the first bad value.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

// defaults < file (optional) < flags; CATF_OUT, when set, replaces run.out_dir.
RunConfig resolve_config(const std::string& file,
                         const std::vector<std::pair<std::string, std::string>>& flags);

}  // namespace catf
