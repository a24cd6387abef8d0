#pragma once

// Concrete VLM and segmentation backends.
//
// Wire contracts (HTTP POST, JSON bodies):
//   VLM:        {"image": <base64 PNG>, "prompt": str}            -> {"text": str}
//   Segmenter:  {"image": <base64 PNG>, "box": [x0, y0, x1, y1]}  -> {"masks": [RLE], "scores": [real]}
// RLE masks use the layout in least/rle.hpp.

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "least/grounding.hpp"

namespace least {

/// Splits "http://host:port/path" into the client base and the request path.
struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // starts with '/'

  static Endpoint parse(const std::string& url);
};

std::string base64_encode(const std::string& bytes);

nlohmann::json make_vlm_request(const ImageTensor& image, const std::string& prompt);
std::string read_vlm_reply(const nlohmann::json& body);
nlohmann::json make_segmentation_request(const ImageTensor& image, const BoundingBox& box);
SegmentationResult read_segmentation_reply(const nlohmann::json& body, int height, int width);

class HttpVlmBackend final : public VlmBackend {
 public:
  explicit HttpVlmBackend(const std::string& url,
                          std::chrono::seconds timeout = std::chrono::seconds(120));
  std::string query(const ImageTensor& image, const std::string& prompt) override;

 private:
  Endpoint endpoint_;
  std::chrono::seconds timeout_;
};

class HttpSegmentationBackend final : public SegmentationBackend {
 public:
  explicit HttpSegmentationBackend(const std::string& url,
                                   std::chrono::seconds timeout = std::chrono::seconds(120));
  SegmentationResult segment(const ImageTensor& image, const BoundingBox& box) override;

 private:
  Endpoint endpoint_;
  std::chrono::seconds timeout_;
};

/// Replays recorded {prompt, response_text} transcripts (JSONL). Repeated
/// queries with the same prompt walk through that prompt's recorded replies
/// in file order and then keep returning the last one.
class FixtureVlmBackend final : public VlmBackend {
 public:
  struct Transcript {
    std::string prompt;
    std::string response_text;
  };

  explicit FixtureVlmBackend(std::vector<Transcript> transcripts);
  static std::vector<Transcript> read_transcripts(const std::filesystem::path& path);
  static FixtureVlmBackend from_jsonl(const std::filesystem::path& path);

  std::string query(const ImageTensor& image, const std::string& prompt) override;
  size_t calls() const;

 private:
  std::map<std::string, std::vector<std::string>> replies_;
  std::map<std::string, size_t> cursor_;
  size_t calls_ = 0;
  mutable std::mutex mutex_;
};

/// Returns the prompt box itself as the only mask.
class BoxFillSegmentation final : public SegmentationBackend {
 public:
  SegmentationResult segment(const ImageTensor& image, const BoundingBox& box) override;
};

/// Local box-prompted segmenter built on OpenCV GrabCut, for offline runs.
class GrabCutSegmentation final : public SegmentationBackend {
 public:
  explicit GrabCutSegmentation(int iterations = 5) : iterations_(iterations) {}
  SegmentationResult segment(const ImageTensor& image, const BoundingBox& box) override;

 private:
  int iterations_;
};

}  // namespace least
