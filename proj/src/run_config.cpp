#include "least/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "least/error.hpp"

namespace least {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r\n") - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw Error(ErrorKind::Config, "bad value '" + value + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw Error(ErrorKind::Config, "bad boolean '" + value + "' for " + key);
}

std::vector<int64_t> parse_channels(const std::string& key, const std::string& value) {
  std::vector<int64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int64_t>(key, trim(item)));
  if (out.empty()) throw Error(ErrorKind::Config, "empty channel list for " + key);
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T>
Field number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) { return json(c.*member); }};
}

Field string_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return json(c.*member); }};
}

template <typename Getter, typename Setter>
Field engine_field(Getter getter, Setter setter) {
  return {[setter](RunConfig& c, const std::string& k, const std::string& v) { setter(c.engine, k, v); },
          [getter](const RunConfig& c) { return json(getter(c.engine)); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["lambda_dir"] = engine_field([](const EngineConfig& e) { return e.weights.lambda_dir; },
                                   [](EngineConfig& e, auto& k, auto& v) { e.weights.lambda_dir = parse_number<double>(k, v); });
    t["lambda_patch"] = engine_field([](const EngineConfig& e) { return e.weights.lambda_patch; },
                                     [](EngineConfig& e, auto& k, auto& v) { e.weights.lambda_patch = parse_number<double>(k, v); });
    t["lambda_content"] = engine_field([](const EngineConfig& e) { return e.weights.lambda_content; },
                                       [](EngineConfig& e, auto& k, auto& v) { e.weights.lambda_content = parse_number<double>(k, v); });
    t["lambda_tv"] = engine_field([](const EngineConfig& e) { return e.weights.lambda_tv; },
                                  [](EngineConfig& e, auto& k, auto& v) { e.weights.lambda_tv = parse_number<double>(k, v); });
    t["patch_count"] = engine_field([](const EngineConfig& e) { return e.patch_count; },
                                    [](EngineConfig& e, auto& k, auto& v) { e.patch_count = parse_number<int>(k, v); });
    t["patch_size"] = engine_field([](const EngineConfig& e) { return e.patch_size; },
                                   [](EngineConfig& e, auto& k, auto& v) { e.patch_size = parse_number<int>(k, v); });
    t["resolution"] = engine_field([](const EngineConfig& e) { return e.resolution; },
                                   [](EngineConfig& e, auto& k, auto& v) { e.resolution = parse_number<int>(k, v); });
    t["learning_rate"] = engine_field([](const EngineConfig& e) { return e.learning_rate; },
                                      [](EngineConfig& e, auto& k, auto& v) { e.learning_rate = parse_number<double>(k, v); });
    t["iterations"] = engine_field([](const EngineConfig& e) { return e.iterations; },
                                   [](EngineConfig& e, auto& k, auto& v) { e.iterations = parse_number<int>(k, v); });
    t["seed"] = engine_field([](const EngineConfig& e) { return e.seed; },
                             [](EngineConfig& e, auto& k, auto& v) { e.seed = parse_number<uint64_t>(k, v); });
    t["source_text"] = engine_field([](const EngineConfig& e) { return e.source_text; },
                                    [](EngineConfig& e, auto&, auto& v) { e.source_text = v; });
    t["augment_patches"] = engine_field([](const EngineConfig& e) { return e.augment_patches; },
                                        [](EngineConfig& e, auto& k, auto& v) { e.augment_patches = parse_bool(k, v); });
    t["network_channels"] = engine_field([](const EngineConfig& e) { return e.network.channels; },
                                         [](EngineConfig& e, auto& k, auto& v) { e.network.channels = parse_channels(k, v); });
    t["vlm_endpoint"] = string_field(&RunConfig::vlm_endpoint);
    t["seg_endpoint"] = string_field(&RunConfig::seg_endpoint);
    t["fixture"] = string_field(&RunConfig::fixture);
    t["segmenter"] = string_field(&RunConfig::segmenter);
    t["box_format"] = string_field(&RunConfig::box_format);
    t["timeout_seconds"] = number_field(&RunConfig::timeout_seconds);
    t["encoders"] = string_field(&RunConfig::encoders);
    t["encoder_seed"] = number_field(&RunConfig::encoder_seed);
    t["content_resolution"] = number_field(&RunConfig::content_resolution);
    t["clip_image_model"] = string_field(&RunConfig::clip_image_model);
    t["clip_text_table"] = string_field(&RunConfig::clip_text_table);
    t["clip_resolution"] = number_field(&RunConfig::clip_resolution);
    t["vgg_model"] = string_field(&RunConfig::vgg_model);
    t["output_dir"] = string_field(&RunConfig::output_dir);
    t["verbosity"] = string_field(&RunConfig::verbosity);
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, field] : fields()) out.push_back(name);
    return out;
  }();
  return names;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw Error(ErrorKind::Usage, "unknown setting '" + key + "'");
  it->second.set(*this, key, value);
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [name, field] : fields()) j[name] = field.get(*this);
  return j;
}

void RunConfig::validate() const {
  engine.validate();
  parse_box_format(box_format);
  if (segmenter != "auto" && segmenter != "http" && segmenter != "grabcut" && segmenter != "box") {
    throw Error(ErrorKind::Config, "unknown segmenter '" + segmenter + "'");
  }
  if (encoders != "desk" && encoders != "torchscript") throw Error(ErrorKind::Config, "unknown encoders '" + encoders + "'");
  if (verbosity != "quiet" && verbosity != "warn" && verbosity != "info" && verbosity != "debug") {
    throw Error(ErrorKind::Config, "unknown verbosity '" + verbosity + "'");
  }
  if (timeout_seconds < 1) throw Error(ErrorKind::Config, "timeout must be positive");
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::Config, "config line " + std::to_string(line_no) + " is not key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Usage, "cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_key_values(buffer.str());
}

KeyValues environment_defaults() {
  KeyValues out;
  if (const char* v = std::getenv("LEAST_VLM_ENDPOINT"); v && *v) out["vlm_endpoint"] = v;
  if (const char* v = std::getenv("LEAST_SEG_ENDPOINT"); v && *v) out["seg_endpoint"] = v;
  return out;
}

RunConfig resolve_run_config(const KeyValues& environment, const KeyValues& file, const KeyValues& flags) {
  RunConfig cfg;
  for (const KeyValues* layer : {&environment, &file, &flags}) {
    for (const auto& [key, value] : *layer) cfg.set(key, value);
  }
  return cfg;
}

}  // namespace least
