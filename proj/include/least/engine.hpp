#pragma once

// Inference-time optimization of a fresh style network per region, followed
// by the background composite, and the sequential multi-region driver.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "least/encoders.hpp"
#include "least/error.hpp"
#include "least/grounding.hpp"
#include "least/imaging.hpp"
#include "least/losses.hpp"
#include "least/style_network.hpp"

namespace least {

struct EngineConfig {
  LossWeights weights;
  int patch_count = 64;
  int patch_size = 100;
  int resolution = 512;
  double learning_rate = 5e-4;
  int iterations = 200;
  uint64_t seed = 0;
  std::string source_text = "a Photo";
  bool augment_patches = false;
  StyleNetworkSpec network;  // resolution is taken from `resolution`

  void validate() const;
  StyleNetworkSpec network_spec() const;
  nlohmann::json to_json() const;
  static EngineConfig from_json(const nlohmann::json& j);
  /// 16 hex digits; FNV-1a over the canonical JSON form.
  std::string fingerprint() const;
};

struct IterationRecord {
  int iter = 0;
  double loss_total = 0;
  double loss_dir = 0;
  double loss_patch = 0;
  double loss_content = 0;
  double loss_tv = 0;

  nlohmann::json to_json() const;
  static IterationRecord from(int iter, const LossBreakdown::Values& v);
};

struct StylizedResult {
  ImageTensor image;       // after the background composite
  ImageTensor raw_output;  // f(content) before compositing
  std::vector<IterationRecord> loss_trace;
  /// Objective of the trained network on iteration 0's patch set, directly
  /// comparable with loss_trace.front().
  IterationRecord final_loss;
  RegionStyleTask task;
  std::string config_fingerprint;
  uint64_t network_seed = 0;
  uint64_t patch_seed = 0;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::vector<IterationRecord> trace);
  const std::vector<IterationRecord>& trace() const noexcept { return trace_; }

 private:
  std::vector<IterationRecord> trace_;
};

using IterationCallback = std::function<void(const IterationRecord&)>;

StylizedResult optimize_region(const ImageTensor& content, const RegionStyleTask& task, const EngineConfig& cfg,
                               const EncoderBundle& encoders, const IterationCallback& on_iteration = {});

/// Stylizes one grounded region of `content`; `region_index` is its position
/// in the directive list.
using RegionStylizer =
    std::function<StylizedResult(const ImageTensor& content, const RegionStyleTask& task, size_t region_index)>;

/// optimize_region with a per-region seed (cfg.seed + region_index).
RegionStylizer make_optimizing_stylizer(EngineConfig cfg, EncoderBundle encoders,
                                        IterationCallback on_iteration = {});

struct MultiRegionResult {
  ImageTensor image;
  std::vector<StylizedResult> regions;
};

/// Failure in region `region_index`; `partial` holds the image after every
/// earlier region and `completed` their results.
class RegionError : public Error {
 public:
  RegionError(const Error& cause, size_t region_index, ImageTensor partial, std::vector<StylizedResult> completed,
              std::string raw_vlm_text = {});
  size_t region_index() const noexcept { return index_; }
  ErrorKind cause_kind() const noexcept { return kind(); }
  const ImageTensor& partial() const noexcept { return partial_; }
  const std::vector<StylizedResult>& completed() const noexcept { return completed_; }
  const std::string& raw_vlm_text() const noexcept { return raw_vlm_; }

 private:
  size_t index_;
  ImageTensor partial_;
  std::vector<StylizedResult> completed_;
  std::string raw_vlm_;
};

/// Grounds each directive against the current image, stylizes it and feeds
/// the composite to the next directive.
MultiRegionResult stylize_multi(const ImageTensor& content, const std::vector<StyleDirective>& directives,
                                const Grounder& grounder, const RegionStylizer& stylizer);

MultiRegionResult stylize_multi(const ImageTensor& content, const std::vector<StyleDirective>& directives,
                                const Grounder& grounder, const EngineConfig& cfg, const EncoderBundle& encoders);

// Run artifacts.

/// One JSON object per line: {iter, loss_total, loss_dir, loss_patch, loss_content, loss_tv}
/// plus "region" when region >= 0.
void write_trace_jsonl(std::ostream& out, const std::vector<IterationRecord>& trace, int region = -1);

nlohmann::json region_sidecar(const StylizedResult& result);

}  // namespace least
