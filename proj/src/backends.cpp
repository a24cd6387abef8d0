#include "least/backends.hpp"

#include <httplib.h>
#include <opencv2/imgproc.hpp>

#include <fstream>
#include <regex>

#include "least/error.hpp"
#include "least/rle.hpp"

namespace least {

using nlohmann::json;

Endpoint Endpoint::parse(const std::string& url) {
  static const std::regex pattern(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch match;
  if (!std::regex_match(url, match, pattern)) {
    throw Error(ErrorKind::Config, "malformed endpoint URL '" + url + "'");
  }
  return Endpoint{match[1].str(), match[2].matched ? match[2].str() : std::string("/")};
}

std::string base64_encode(const std::string& bytes) { return httplib::detail::base64_encode(bytes); }

json make_vlm_request(const ImageTensor& image, const std::string& prompt) {
  return {{"image", base64_encode(encode_png(image))}, {"prompt", prompt}};
}

std::string read_vlm_reply(const json& body) {
  if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
    throw Error(ErrorKind::Backend, "VLM reply lacks a 'text' string");
  }
  return body["text"].get<std::string>();
}

json make_segmentation_request(const ImageTensor& image, const BoundingBox& box) {
  return {{"image", base64_encode(encode_png(image))}, {"box", {box.x0, box.y0, box.x1, box.y1}}};
}

SegmentationResult read_segmentation_reply(const json& body, int height, int width) {
  SegmentationResult result;
  try {
    for (const auto& m : body.at("masks")) {
      BinaryMask mask = rle::decode(rle::from_json(m));
      if (mask.height() != height || mask.width() != width) {
        throw Error(ErrorKind::Backend, "segmenter mask size differs from the request image");
      }
      result.masks.push_back(mask.tensor().to(torch::kFloat32));
    }
    result.scores = body.at("scores").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Backend, std::string("malformed segmenter reply: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Backend) throw;
    throw Error(ErrorKind::Backend, e.detail());
  }
  if (result.masks.size() != result.scores.size()) {
    throw Error(ErrorKind::Backend, "segmenter reply has mismatched masks and scores");
  }
  return result;
}

namespace {

json post_json(const Endpoint& endpoint, std::chrono::seconds timeout, const json& request) {
  httplib::Client client(endpoint.base);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  auto res = client.Post(endpoint.path, request.dump(), "application/json");
  if (!res) {
    throw Error(ErrorKind::Backend,
                endpoint.base + endpoint.path + ": " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw Error(ErrorKind::Backend,
                endpoint.base + endpoint.path + " answered HTTP " + std::to_string(res->status));
  }
  try {
    return json::parse(res->body);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Backend, std::string("reply is not JSON: ") + e.what());
  }
}

}  // namespace

HttpVlmBackend::HttpVlmBackend(const std::string& url, std::chrono::seconds timeout)
    : endpoint_(Endpoint::parse(url)), timeout_(timeout) {}

std::string HttpVlmBackend::query(const ImageTensor& image, const std::string& prompt) {
  return read_vlm_reply(post_json(endpoint_, timeout_, make_vlm_request(image, prompt)));
}

HttpSegmentationBackend::HttpSegmentationBackend(const std::string& url, std::chrono::seconds timeout)
    : endpoint_(Endpoint::parse(url)), timeout_(timeout) {}

SegmentationResult HttpSegmentationBackend::segment(const ImageTensor& image, const BoundingBox& box) {
  return read_segmentation_reply(post_json(endpoint_, timeout_, make_segmentation_request(image, box)),
                                 image.height(), image.width());
}

// ---------------------------------------------------------------------------

FixtureVlmBackend::FixtureVlmBackend(std::vector<Transcript> transcripts) {
  for (auto& t : transcripts) replies_[t.prompt].push_back(std::move(t.response_text));
}

std::vector<FixtureVlmBackend::Transcript> FixtureVlmBackend::read_transcripts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open fixture " + path.string());
  std::vector<Transcript> transcripts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = json::parse(line);
      transcripts.push_back({j.at("prompt").get<std::string>(), j.at("response_text").get<std::string>()});
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Config,
                  path.string() + ":" + std::to_string(line_no) + ": bad transcript: " + e.what());
    }
  }
  return transcripts;
}

FixtureVlmBackend FixtureVlmBackend::from_jsonl(const std::filesystem::path& path) {
  return FixtureVlmBackend(read_transcripts(path));
}

std::string FixtureVlmBackend::query(const ImageTensor&, const std::string& prompt) {
  std::lock_guard lock(mutex_);
  ++calls_;
  auto it = replies_.find(prompt);
  if (it == replies_.end()) throw Error(ErrorKind::Backend, "no recorded reply for prompt: " + prompt);
  size_t& cursor = cursor_[prompt];
  const std::string& reply = it->second[std::min(cursor, it->second.size() - 1)];
  ++cursor;
  return reply;
}

size_t FixtureVlmBackend::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

SegmentationResult BoxFillSegmentation::segment(const ImageTensor& image, const BoundingBox& box) {
  return {{BinaryMask::from_box(image.height(), image.width(), box).tensor().to(torch::kFloat32)},
          {1.0}};
}

SegmentationResult GrabCutSegmentation::segment(const ImageTensor& image, const BoundingBox& box) {
  if (!box.valid_within(image.width(), image.height())) throw_invalid("segmentation box outside image");
  auto hwc = (image.tensor().to(torch::kFloat32).clamp(0, 1) * 255.0 + 0.5)
                 .floor()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat rgb(image.height(), image.width(), CV_8UC3, hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);

  const bool whole_frame = box.x0 == 0 && box.y0 == 0 && box.x1 == image.width() && box.y1 == image.height();
  const auto fallback = BinaryMask::from_box(image.height(), image.width(), box).tensor().to(torch::kFloat32);
  if (whole_frame) return {{fallback}, {1.0}};  // GrabCut needs some known background

  cv::Mat labels(bgr.size(), CV_8UC1, cv::Scalar(cv::GC_BGD));
  cv::Mat bgd_model, fgd_model;
  const cv::Rect rect(box.x0, box.y0, box.width(), box.height());
  try {
    cv::grabCut(bgr, labels, rect, bgd_model, fgd_model, iterations_, cv::GC_INIT_WITH_RECT);
  } catch (const cv::Exception& e) {
    throw Error(ErrorKind::Backend, std::string("grabCut failed: ") + e.what());
  }
  cv::Mat fg = (labels == cv::GC_FGD) | (labels == cv::GC_PR_FGD);
  auto mask = torch::from_blob(fg.data, {fg.rows, fg.cols}, torch::kUInt8).clone().gt(0).to(torch::kFloat32);
  if (mask.sum().item<double>() == 0.0) return {{fallback}, {1.0}};
  // The plain box is offered as a low-confidence alternative.
  return {{mask, fallback}, {1.0, 0.1}};
}

}  // namespace least
