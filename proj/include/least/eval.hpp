#pragma once

// Masked-crop CLIP scoring and the manifest-driven benchmark runner.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "least/encoders.hpp"
#include "least/engine.hpp"
#include "least/grounding.hpp"

namespace least {

/// 100 * cos(E_I(crop_B(image * mask)), E_T(style)) with B the tight box of the mask.
double masked_clip_score(const ImageTensor& image, const BinaryMask& mask, const std::string& style,
                         const EncoderBundle& encoders);

struct ManifestEntry {
  std::string id;
  std::filesystem::path image_path;
  std::string prompt;
  std::optional<std::filesystem::path> mask_path;
};

/// JSON: {"entries": [{"id"?, "image_path", "prompt", "mask_path"?}, ...]}.
/// Relative paths resolve against the manifest's directory; missing ids
/// default to "entry<N>".
struct BenchmarkManifest {
  std::vector<ManifestEntry> entries;

  static BenchmarkManifest load(const std::filesystem::path& path);
  static BenchmarkManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Splits "apply <style> style to <region> [in the image]" into style and
/// region; nullopt when the prompt does not follow the convention.
std::optional<std::pair<std::string, std::string>> parse_conventional_prompt(const std::string& prompt);

struct EvaluationRecord {
  std::string id;
  std::string image_path;
  std::string prompt;
  std::string style;
  std::string region;
  double clip_score = 0;
  double clip_score_baseline = 0;
  double background_max_abs_diff = 0;
  double runtime_seconds = 0;
  std::optional<double> initial_loss;
  std::optional<double> final_loss;

  nlohmann::json to_json() const;
};

struct EntryFailure {
  std::string id;
  std::string stage;
  std::string message;
};

struct Aggregate {
  double mean = 0;
  double stddev = 0;  // sample standard deviation; 0 for fewer than 2 values
  size_t count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct EvaluationReport {
  std::vector<EvaluationRecord> records;
  std::vector<EntryFailure> failures;
  Aggregate clip_score;
  Aggregate clip_score_baseline;
  size_t improved = 0;  // records with clip_score > clip_score_baseline

  size_t total() const { return records.size() + failures.size(); }
  /// More than half of the entries failed.
  bool run_error() const { return failures.size() * 2 > total(); }
  nlohmann::json summary_json() const;
};

struct BenchmarkBackends {
  /// Full grounding for entries without a mask; may be empty when every entry has one.
  Grounder grounder;
  /// Style extraction for mask-override entries; when null the prompt's
  /// conventional form is parsed instead.
  std::shared_ptr<VlmBackend> vlm;
  /// Called once per worker.
  std::function<EncoderBundle()> encoders;
};

struct BenchmarkOptions {
  std::filesystem::path output_dir;
  int workers = 1;
  /// Score images found in outputs_dir (named <id>.png) instead of stylizing.
  bool scores_only = false;
  std::filesystem::path outputs_dir;
  bool write_grids = true;
};

EvaluationReport run_benchmark(const BenchmarkManifest& manifest, const EngineConfig& cfg,
                               const BenchmarkBackends& backends, const BenchmarkOptions& options);

/// report.csv, records.jsonl and summary.json under `dir`.
void write_reports(const EvaluationReport& report, const std::filesystem::path& dir);

/// Side-by-side strip: content | result | mask.
ImageTensor comparison_grid(const ImageTensor& content, const ImageTensor& result, const BinaryMask& mask);

}  // namespace least
