#include "least/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>

#include "least/backends.hpp"
#include "least/engine.hpp"
#include "least/error.hpp"
#include "least/eval.hpp"
#include "least/log.hpp"

namespace least {

namespace fs = std::filesystem;
using nlohmann::json;

std::string flag_for_key(const std::string& key) {
  std::string flag = "--" + key;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return flag;
}

std::shared_ptr<VlmBackend> make_vlm_backend(const RunConfig& cfg) {
  if (!cfg.fixture.empty()) return std::make_shared<FixtureVlmBackend>(FixtureVlmBackend::read_transcripts(cfg.fixture));
  if (!cfg.vlm_endpoint.empty()) {
    return std::make_shared<HttpVlmBackend>(cfg.vlm_endpoint, std::chrono::seconds(cfg.timeout_seconds));
  }
  return nullptr;
}

std::shared_ptr<SegmentationBackend> make_segmentation_backend(const RunConfig& cfg) {
  const bool http = cfg.segmenter == "http" || (cfg.segmenter == "auto" && !cfg.seg_endpoint.empty());
  if (http) {
    if (cfg.seg_endpoint.empty()) throw Error(ErrorKind::Usage, "segmenter=http needs --seg-endpoint");
    return std::make_shared<HttpSegmentationBackend>(cfg.seg_endpoint, std::chrono::seconds(cfg.timeout_seconds));
  }
  if (cfg.segmenter == "box") return std::make_shared<BoxFillSegmentation>();
  return std::make_shared<GrabCutSegmentation>();
}

EncoderBundle make_encoders(const RunConfig& cfg) {
  if (cfg.encoders == "desk") return make_desk_encoders(cfg.encoder_seed, cfg.content_resolution);
  if (cfg.clip_image_model.empty() || cfg.clip_text_table.empty() || cfg.vgg_model.empty()) {
    throw Error(ErrorKind::Usage, "encoders=torchscript needs --clip-image-model, --clip-text-table and --vgg-model");
  }
  EncoderBundle bundle;
  bundle.text = std::make_shared<EmbeddingTableTextEncoder>(cfg.clip_text_table);
  bundle.image = std::make_shared<TorchScriptImageEncoder>(cfg.clip_image_model, cfg.clip_resolution,
                                                           PixelNormalization::clip());
  bundle.features = std::make_shared<TorchScriptFeatureExtractor>(cfg.vgg_model, cfg.content_resolution,
                                                                  PixelNormalization::imagenet());
  bundle.validate();
  return bundle;
}

namespace {

LogLevel level_from(const std::string& name) {
  if (name == "quiet") return LogLevel::Quiet;
  if (name == "info") return LogLevel::Info;
  if (name == "debug") return LogLevel::Debug;
  return LogLevel::Warn;
}

// Every RunConfig key doubles as a flag; values are stored as text and merged
// through the same setter as the config file.
struct SettingFlags {
  std::map<std::string, std::string> values;
  std::multimap<std::string, CLI::Option*> options;
  std::string config_file;

  void attach(CLI::App& app) {
    for (const auto& key : RunConfig::keys()) {
      options.emplace(key, app.add_option(flag_for_key(key), values[key])->group("Settings"));
    }
    app.add_option("--config", config_file, "key=value settings file")->check(CLI::ExistingFile);
  }

  RunConfig resolve() const {
    KeyValues flags;
    for (const auto& [key, option] : options) {
      if (option->count() > 0) flags[key] = values.at(key);
    }
    KeyValues file = config_file.empty() ? KeyValues{} : read_config_file(config_file);
    RunConfig cfg = resolve_run_config(environment_defaults(), file, flags);
    cfg.validate();
    set_log_level(level_from(cfg.verbosity));
    return cfg;
  }
};

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Write, "cannot write " + path.string(), "output");
  return out;
}

void write_json(const fs::path& path, const json& j) { open_output(path) << j.dump(2) << '\n'; }

json box_json(const BoundingBox& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

void dump_raw(std::ostream& err, const fs::path& dir, const std::string& raw) {
  err << "raw VLM reply:\n" << raw << '\n';
  open_output(dir / "vlm_raw.txt") << raw;
}

// --- stylize ---------------------------------------------------------------

struct StylizeArgs {
  std::string image;
  std::vector<std::string> prompts;
  std::string mask;
};

Grounder mask_override_grounder(const BinaryMask& mask, std::shared_ptr<VlmBackend> vlm) {
  return [mask, vlm](const ImageTensor& image, const StyleDirective& directive) {
    if (vlm) return ground_with_mask(image, directive, mask, *vlm);
    auto parts = parse_conventional_prompt(directive.raw_text());
    if (!parts) {
      throw ParseError("prompt does not follow 'apply <style> style to <region>' and no VLM is configured",
                       directive.raw_text());
    }
    RegionStyleTask task;
    task.style_phrase = parts->first;
    task.region_phrase = parts->second;
    task.mask = mask;
    task.box = tight_bbox(mask);
    task.validate();
    return task;
  };
}

json stylize_sidecar(const RunConfig& cfg, const StylizeArgs& args, const std::vector<StylizedResult>& regions) {
  json out{{"config", cfg.to_json()},
           {"engine", cfg.engine.to_json()},
           {"engine_fingerprint", cfg.engine.fingerprint()},
           {"image", args.image},
           {"prompts", args.prompts},
           {"mask", args.mask.empty() ? json() : json(args.mask)}};
  json list = json::array();
  for (const auto& r : regions) list.push_back(region_sidecar(r));
  out["regions"] = list;
  return out;
}

void write_traces(const fs::path& path, const std::vector<StylizedResult>& regions) {
  auto out = open_output(path);
  for (size_t i = 0; i < regions.size(); ++i) write_trace_jsonl(out, regions[i].loss_trace, static_cast<int>(i));
}

void print_summary(std::ostream& out, const std::vector<StylizedResult>& regions) {
  for (size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    out << "region " << i << " '" << r.task.region_phrase << "' style '" << r.task.style_phrase << "': loss "
        << std::setprecision(6) << r.loss_trace.front().loss_total << " -> " << r.final_loss.loss_total << " ("
        << r.loss_trace.size() << " iterations, " << r.task.mask.foreground_count() << " mask pixels)\n";
  }
}

int cmd_stylize(const StylizeArgs& args, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (!args.mask.empty() && args.prompts.size() != 1) {
    throw Error(ErrorKind::Usage, "--mask pairs with exactly one --prompt");
  }
  std::vector<StyleDirective> directives;
  for (const auto& p : args.prompts) directives.emplace_back(p);

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  const ImageTensor content = load_image(args.image, cfg.engine.resolution);
  auto vlm = make_vlm_backend(cfg);

  Grounder grounder;
  if (!args.mask.empty()) {
    grounder = mask_override_grounder(load_mask(args.mask, cfg.engine.resolution), vlm);
  } else {
    if (!vlm) throw Error(ErrorKind::Usage, "grounding needs --vlm-endpoint, LEAST_VLM_ENDPOINT or --fixture");
    GroundingOptions options;
    options.box_format = parse_box_format(cfg.box_format);
    grounder = make_grounder(vlm, make_segmentation_backend(cfg), options);
  }

  const EncoderBundle encoders = make_encoders(cfg);
  try {
    MultiRegionResult result = stylize_multi(content, directives, grounder, cfg.engine, encoders);
    save_image(result.image, dir / "stylized.png");
    write_traces(dir / "trace.jsonl", result.regions);
    write_json(dir / "result.json", stylize_sidecar(cfg, args, result.regions));
    print_summary(out, result.regions);
    out << "wrote " << (dir / "stylized.png").string() << '\n';
    return kExitOk;
  } catch (const RegionError& e) {
    err << "region " << e.region_index() << " failed: " << e.what() << '\n';
    if (!e.raw_vlm_text().empty()) dump_raw(err, dir, e.raw_vlm_text());
    save_image(e.partial(), dir / "partial.png");
    write_traces(dir / "trace.jsonl", e.completed());
    json sidecar = stylize_sidecar(cfg, args, e.completed());
    sidecar["error"] = {{"region", e.region_index()}, {"kind", to_string(e.kind())}, {"stage", e.stage()},
                        {"message", e.what()}};
    write_json(dir / "result.json", sidecar);
    print_summary(out, e.completed());
    return e.kind() == ErrorKind::Parse ? kExitParse : kExitPipeline;
  }
}

// --- ground ----------------------------------------------------------------

struct GroundArgs {
  std::string image;
  std::string prompt;
};

int cmd_ground(const GroundArgs& args, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  auto vlm = make_vlm_backend(cfg);
  if (!vlm) throw Error(ErrorKind::Usage, "grounding needs --vlm-endpoint, LEAST_VLM_ENDPOINT or --fixture");
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  const ImageTensor image = load_image(args.image, cfg.engine.resolution);
  GroundingOptions options;
  options.box_format = parse_box_format(cfg.box_format);
  auto segmenter = make_segmentation_backend(cfg);

  try {
    GroundingDetails details;
    const RegionStyleTask task = ground(image, StyleDirective(args.prompt), *vlm, *segmenter, options, &details);
    save_mask(task.mask, dir / "mask.png");
    const json report{{"box", box_json(task.box)},
                      {"prompt_box", box_json(details.prompt_box)},
                      {"normalized_box",
                       {details.response.parsed_box.x0, details.response.parsed_box.y0, details.response.parsed_box.x1,
                        details.response.parsed_box.y1}},
                      {"style", task.style_phrase},
                      {"region", task.region_phrase},
                      {"mask_pixels", task.mask.foreground_count()},
                      {"vlm_raw", details.response.raw}};
    write_json(dir / "ground.json", report);
    out << report.dump() << '\n';
    return kExitOk;
  } catch (const ParseError& e) {
    err << e.what() << '\n';
    dump_raw(err, dir, e.raw_text());
    return kExitParse;
  }
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string manifest;
  bool scores_only = false;
  std::string outputs;
  int workers = 1;
  bool no_grids = false;
};

int cmd_eval(const EvalArgs& args, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const BenchmarkManifest manifest = BenchmarkManifest::load(args.manifest);
  BenchmarkBackends backends;
  backends.vlm = make_vlm_backend(cfg);
  if (backends.vlm) {
    GroundingOptions options;
    options.box_format = parse_box_format(cfg.box_format);
    backends.grounder = make_grounder(backends.vlm, make_segmentation_backend(cfg), options);
  }
  backends.encoders = [cfg] { return make_encoders(cfg); };

  BenchmarkOptions options;
  options.output_dir = cfg.output_dir;
  options.workers = args.workers;
  options.scores_only = args.scores_only;
  options.outputs_dir = args.outputs;
  options.write_grids = !args.no_grids;

  const EvaluationReport report = run_benchmark(manifest, cfg.engine, backends, options);
  out << report.summary_json().dump(2) << '\n';
  if (report.run_error()) {
    err << "run error: " << report.failures.size() << " of " << report.total() << " entries failed\n";
    return kExitPipeline;
  }
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Usage: return kExitUsage;
    case ErrorKind::Parse: return kExitParse;
    default: return kExitPipeline;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-driven local style transfer"};
  app.require_subcommand(1);

  SettingFlags settings;

  StylizeArgs stylize_args;
  auto* stylize = app.add_subcommand("stylize", "Ground each prompt and stylize its region");
  stylize->add_option("--image", stylize_args.image, "content image")->required()->check(CLI::ExistingFile);
  stylize->add_option("--prompt", stylize_args.prompts, "style directive; repeat for several regions")
      ->required()
      ->take_all();
  stylize->add_option("--mask", stylize_args.mask, "region mask override")->check(CLI::ExistingFile);

  GroundArgs ground_args;
  auto* ground_cmd = app.add_subcommand("ground", "Ground a prompt without stylizing");
  ground_cmd->add_option("--image", ground_args.image, "content image")->required()->check(CLI::ExistingFile);
  ground_cmd->add_option("--prompt", ground_args.prompt, "style directive")->required();

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Run the masked CLIP score benchmark");
  eval->add_option("--manifest", eval_args.manifest, "benchmark manifest (JSON)")->required();
  eval->add_flag("--scores-only", eval_args.scores_only, "score existing outputs instead of stylizing");
  eval->add_option("--outputs", eval_args.outputs, "directory of <id>.png outputs for --scores-only");
  eval->add_option("--workers", eval_args.workers, "parallel entries")->check(CLI::PositiveNumber);
  eval->add_flag("--no-grids", eval_args.no_grids, "skip comparison grids");

  for (auto* sub : {stylize, ground_cmd, eval}) settings.attach(*sub);

  std::vector<std::string> argv_storage{"least"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig cfg = settings.resolve();
    if (stylize->parsed()) return cmd_stylize(stylize_args, cfg, out, err);
    if (ground_cmd->parsed()) return cmd_ground(ground_args, cfg, out, err);
    return cmd_eval(eval_args, cfg, out, err);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (!e.raw_text().empty()) err << "raw text:\n" << e.raw_text() << '\n';
    return kExitParse;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitPipeline;
  }
}

}  // namespace least
