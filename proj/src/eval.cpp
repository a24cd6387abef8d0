#include "least/eval.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <regex>
#include <thread>

#include "least/error.hpp"
#include "least/log.hpp"

namespace least {

namespace fs = std::filesystem;
using nlohmann::json;

double masked_clip_score(const ImageTensor& image, const BinaryMask& mask, const std::string& style,
                         const EncoderBundle& encoders) {
  encoders.validate();
  if (!mask.matches(image)) throw_invalid("mask does not match the image");
  const BoundingBox box = tight_bbox(mask);
  torch::NoGradGuard no_grad;
  auto masked = image.batched() * mask.as_float(image.dtype());
  auto image_embedding = embed_images(*encoders.image, crop(masked, box)).squeeze(0).to(torch::kFloat64);
  auto text_embedding = encoders.text->encode(style).to(torch::kFloat64);
  const double denom = std::max(image_embedding.norm().item<double>(), kNormFloor) *
                       std::max(text_embedding.norm().item<double>(), kNormFloor);
  return 100.0 * image_embedding.dot(text_embedding).item<double>() / denom;
}

// ---------------------------------------------------------------------------

BenchmarkManifest BenchmarkManifest::from_json(const json& j, const fs::path& base_dir) {
  BenchmarkManifest manifest;
  auto resolve = [&base_dir](const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  try {
    size_t index = 0;
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.id = e.contains("id") ? e.at("id").get<std::string>() : "entry" + std::to_string(index);
      entry.image_path = resolve(e.at("image_path").get<std::string>());
      entry.prompt = e.at("prompt").get<std::string>();
      if (e.contains("mask_path") && !e.at("mask_path").is_null()) {
        entry.mask_path = resolve(e.at("mask_path").get<std::string>());
      }
      manifest.entries.push_back(std::move(entry));
      ++index;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("malformed manifest: ") + e.what());
  }
  return manifest;
}

BenchmarkManifest BenchmarkManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Usage, "cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, "manifest is not JSON: " + std::string(e.what()));
  }
  return from_json(j, path.parent_path());
}

std::optional<std::pair<std::string, std::string>> parse_conventional_prompt(const std::string& prompt) {
  static const std::regex pattern(
      R"(^\s*apply\s+(.+?)\s+style\s+to\s+(.+?)(?:\s+in\s+the\s+(?:image|photo|picture))?\s*[.!]?\s*$)",
      std::regex::icase);
  std::smatch match;
  if (!std::regex_match(prompt, match, pattern)) return std::nullopt;
  return std::make_pair(match[1].str(), match[2].str());
}

json EvaluationRecord::to_json() const {
  json j{{"id", id},
         {"image_path", image_path},
         {"prompt", prompt},
         {"style", style},
         {"region", region},
         {"clip_score", clip_score},
         {"clip_score_baseline", clip_score_baseline},
         {"background_max_abs_diff", background_max_abs_diff},
         {"runtime_seconds", runtime_seconds}};
  if (initial_loss) j["initial_loss_total"] = *initial_loss;
  if (final_loss) j["final_loss_total"] = *final_loss;
  return j;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  double sum = 0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0;
    for (double v : values) sq += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return a;
}

json EvaluationReport::summary_json() const {
  auto agg = [](const Aggregate& a) { return json{{"mean", a.mean}, {"stddev", a.stddev}, {"count", a.count}}; };
  json failed = json::array();
  for (const auto& f : failures) failed.push_back({{"id", f.id}, {"stage", f.stage}, {"error", f.message}});
  return {{"entries", total()},
          {"succeeded", records.size()},
          {"failed", failures.size()},
          {"improved_over_baseline", improved},
          {"clip_score", agg(clip_score)},
          {"clip_score_baseline", agg(clip_score_baseline)},
          {"failures", failed},
          {"run_error", run_error()}};
}

ImageTensor comparison_grid(const ImageTensor& content, const ImageTensor& result, const BinaryMask& mask) {
  auto m = mask.as_float(content.dtype()).squeeze(0).expand({3, -1, -1});
  return ImageTensor(torch::cat({content.tensor(), result.tensor().to(content.dtype()), m}, 2));
}

// ---------------------------------------------------------------------------

namespace {

double background_max_abs_diff(const ImageTensor& output, const ImageTensor& content, const BinaryMask& mask) {
  auto background = mask.complement().as_float(torch::kFloat64).squeeze(0);
  auto diff = (output.tensor().to(torch::kFloat64) - content.tensor().to(torch::kFloat64)).abs() * background;
  return diff.max().item<double>();
}

struct EntryOutcome {
  std::optional<EvaluationRecord> record;
  std::optional<EntryFailure> failure;
};

std::string style_for_override(const ImageTensor& image, const ManifestEntry& entry, const BenchmarkBackends& backends) {
  if (backends.vlm) return extract_style(image, StyleDirective(entry.prompt), *backends.vlm);
  auto parts = parse_conventional_prompt(entry.prompt);
  if (!parts) throw ParseError("prompt does not follow 'apply <style> style to <region>' and no VLM is configured", entry.prompt);
  return parts->first;
}

EntryOutcome run_entry(const ManifestEntry& entry, const EngineConfig& cfg, const BenchmarkBackends& backends,
                       const EncoderBundle& encoders, const BenchmarkOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  try {
    const ImageTensor content = load_image(entry.image_path, cfg.resolution);
    RegionStyleTask task;
    if (entry.mask_path) {
      task.mask = load_mask(*entry.mask_path, cfg.resolution);
      task.box = tight_bbox(task.mask);
      task.style_phrase = style_for_override(content, entry, backends);
      task.region_phrase = region_phrase_from_directive(StyleDirective(entry.prompt));
    } else {
      if (!backends.grounder) throw Error(ErrorKind::Config, "entry has no mask and no grounding backend is configured", "ground");
      task = backends.grounder(content, StyleDirective(entry.prompt));
    }
    task.validate();

    EvaluationRecord record;
    record.id = entry.id;
    record.image_path = entry.image_path.string();
    record.prompt = entry.prompt;
    record.style = task.style_phrase;
    record.region = task.region_phrase;

    ImageTensor output;
    if (options.scores_only) {
      output = load_image(options.outputs_dir / (entry.id + ".png"), cfg.resolution);
    } else {
      const StylizedResult result = optimize_region(content, task, cfg, encoders);
      output = result.image;
      record.initial_loss = result.loss_trace.front().loss_total;
      record.final_loss = result.final_loss.loss_total;
      if (!options.output_dir.empty()) save_image(output, options.output_dir / (entry.id + ".png"));
    }
    record.clip_score = masked_clip_score(output, task.mask, task.style_phrase, encoders);
    record.clip_score_baseline = masked_clip_score(content, task.mask, task.style_phrase, encoders);
    record.background_max_abs_diff = background_max_abs_diff(output, content, task.mask);
    if (options.write_grids && !options.output_dir.empty()) {
      save_image(comparison_grid(content, output, task.mask), options.output_dir / ("grid_" + entry.id + ".png"));
    }
    record.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {record, std::nullopt};
  } catch (const Error& e) {
    log_warn("entry " + entry.id + " failed: " + e.what());
    return {std::nullopt, EntryFailure{entry.id, e.stage(), e.what()}};
  } catch (const std::exception& e) {
    log_warn("entry " + entry.id + " failed: " + e.what());
    return {std::nullopt, EntryFailure{entry.id, "", e.what()}};
  }
}

}  // namespace

EvaluationReport run_benchmark(const BenchmarkManifest& manifest, const EngineConfig& cfg,
                               const BenchmarkBackends& backends, const BenchmarkOptions& options) {
  cfg.validate();
  if (manifest.entries.empty()) throw Error(ErrorKind::Config, "manifest has no entries");
  if (!backends.encoders) throw Error(ErrorKind::Config, "benchmark needs an encoder factory");
  if (options.scores_only && options.outputs_dir.empty()) {
    throw Error(ErrorKind::Usage, "scores-only mode needs an outputs directory");
  }
  if (!options.output_dir.empty()) fs::create_directories(options.output_dir);

  std::vector<EntryOutcome> outcomes(manifest.entries.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    const EncoderBundle encoders = backends.encoders();
    for (size_t i = next++; i < manifest.entries.size(); i = next++) {
      outcomes[i] = run_entry(manifest.entries[i], cfg, backends, encoders, options);
    }
  };
  const int workers = std::clamp<int>(options.workers, 1, static_cast<int>(manifest.entries.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  EvaluationReport report;
  std::vector<double> scores, baselines;
  for (auto& outcome : outcomes) {
    if (outcome.record) {
      scores.push_back(outcome.record->clip_score);
      baselines.push_back(outcome.record->clip_score_baseline);
      if (outcome.record->clip_score > outcome.record->clip_score_baseline) ++report.improved;
      report.records.push_back(std::move(*outcome.record));
    } else {
      report.failures.push_back(std::move(*outcome.failure));
    }
  }
  report.clip_score = aggregate(scores);
  report.clip_score_baseline = aggregate(baselines);
  if (!options.output_dir.empty()) write_reports(report, options.output_dir);
  return report;
}

namespace {
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string number(double v) { return json(v).dump(); }
}  // namespace

void write_reports(const EvaluationReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "report.csv");
  std::ofstream jsonl(dir / "records.jsonl");
  std::ofstream summary(dir / "summary.json");
  if (!csv || !jsonl || !summary) throw Error(ErrorKind::Write, "cannot write reports under " + dir.string());

  csv << "id,image_path,prompt,style,clip_score,clip_score_baseline,background_max_abs_diff,runtime_seconds,status\n";
  for (const auto& r : report.records) {
    csv << csv_field(r.id) << ',' << csv_field(r.image_path) << ',' << csv_field(r.prompt) << ','
        << csv_field(r.style) << ',' << number(r.clip_score) << ',' << number(r.clip_score_baseline) << ','
        << number(r.background_max_abs_diff) << ',' << number(r.runtime_seconds) << ",ok\n";
    json j = r.to_json();
    j["ok"] = true;
    jsonl << j.dump() << '\n';
  }
  for (const auto& f : report.failures) {
    csv << csv_field(f.id) << ",,,,,,,," << csv_field("failed: " + f.message) << '\n';
    jsonl << json{{"id", f.id}, {"ok", false}, {"stage", f.stage}, {"error", f.message}}.dump() << '\n';
  }
  summary << report.summary_json().dump(2) << '\n';
}

}  // namespace least
