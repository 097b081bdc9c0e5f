#pragma once

#include "isslab/pipeline.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace isslab {

/// Bad config input.  `key()` names the offending key when there is one.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Everything a `run` needs.  The model image size always follows the
/// generator's.
struct RunConfig {
  std::string name = "default";
  pipeline::RunRequest request;
  std::filesystem::path output = "out";
};

namespace config {

/// Line-oriented format:
///
///   # comment
///   [pipeline]
///   lambda_ali = 1
///
/// A key outside any section must be written in dotted form.  Keys are
/// applied in order on top of `base`.
RunConfig parse(std::string_view text, const RunConfig& base);
RunConfig parse(std::string_view text);

/// Applies one dotted key, e.g. set(cfg, "pipeline.lambda_ali", "0.5").
void set(RunConfig& cfg, const std::string& key, const std::string& value);
/// "key=value" form of set().
void apply_override(RunConfig& cfg, const std::string& assignment);

std::string get(const RunConfig& cfg, const std::string& key);
std::vector<std::string> keys();

/// Canonical text; parse(render(c)) reproduces c exactly.
std::string render(const RunConfig& cfg);

RunConfig defaults();
std::optional<RunConfig> preset(const std::string& name);
std::vector<std::string> preset_names();

/// An existing file path is parsed; otherwise a preset name is looked up.
/// Neither → ConfigError.
RunConfig load(const std::string& path_or_preset);

/// Resolved config plus the seed list and build id, written beside outputs.
std::string manifest(const RunConfig& cfg);

const char* build_id();

}  // namespace config
}  // namespace isslab
