#pragma once

// Effective run configuration for the command-line tool: built-in defaults,
// then environment endpoints, then a key=value config file, then flags.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "least/engine.hpp"

namespace least {

using KeyValues = std::map<std::string, std::string>;

struct RunConfig {
  EngineConfig engine;

  std::string vlm_endpoint;
  std::string seg_endpoint;
  std::string fixture;           // JSONL transcripts; replaces the VLM when set
  std::string segmenter = "auto";  // auto | http | grabcut | box
  std::string box_format = "xyxy";
  int timeout_seconds = 120;

  std::string encoders = "desk";  // desk | torchscript
  uint64_t encoder_seed = 0;
  int content_resolution = 224;
  std::string clip_image_model;
  std::string clip_text_table;
  int clip_resolution = 224;
  std::string vgg_model;

  std::string output_dir = "least_out";
  std::string verbosity = "warn";  // quiet | warn | info | debug

  /// Every recognised key, in a fixed order.
  static const std::vector<std::string>& keys();

  /// Throws a usage error for unknown keys and a config error for bad values.
  void set(const std::string& key, const std::string& value);
  nlohmann::json to_json() const;
  void validate() const;
};

/// Parses "key = value" lines; '#' starts a comment, blank lines are ignored.
KeyValues parse_key_values(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);

/// LEAST_VLM_ENDPOINT / LEAST_SEG_ENDPOINT, when set.
KeyValues environment_defaults();

RunConfig resolve_run_config(const KeyValues& environment, const KeyValues& file, const KeyValues& flags);

}  // namespace least
