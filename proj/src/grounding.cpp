#include "least/grounding.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <regex>

#include "least/error.hpp"

namespace least {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double parse_real(const std::string& token) {
  double value = 0.0;
  const char* begin = token.data();
  if (!token.empty() && token.front() == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ParseError("malformed number '" + token + "'", token);
  }
  return value;
}

// Pixel units closer than this to an integer are snapped before floor/ceil so
// that 0.07 * 100 does not widen to 8.
constexpr double kSnap = 1e-9;

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < kSnap ? r : v;
}

}  // namespace

StyleDirective::StyleDirective(std::string raw_text) : raw_(std::move(raw_text)) {
  if (trim(raw_).empty()) throw_invalid("style directive is empty");
}

void RegionStyleTask::validate() const {
  if (trim(style_phrase).empty()) throw_invalid("region task has an empty style phrase");
  if (mask.empty() || mask.foreground_count() == 0) {
    throw Error(ErrorKind::EmptyRegion, "region task mask has no foreground");
  }
  if (tight_bbox(mask) != box) throw_invalid("region task box is not the tight box of its mask");
}

BoxFormat parse_box_format(const std::string& name) {
  if (name == "xyxy") return BoxFormat::XYXY;
  if (name == "yxyx") return BoxFormat::YXYX;
  if (name == "cxcywh") return BoxFormat::CXCYWH;
  throw Error(ErrorKind::Config, "unknown box format '" + name + "'");
}

std::string to_string(BoxFormat format) {
  switch (format) {
    case BoxFormat::XYXY: return "xyxy";
    case BoxFormat::YXYX: return "yxyx";
    case BoxFormat::CXCYWH: return "cxcywh";
  }
  return "xyxy";
}

std::string build_vlm_query(const StyleDirective& directive) {
  return "For a given user prompt: '" + directive.raw_text() +
         "', give the bounding box coordinates of the object that should be stylized. "
         "Also return the corresponding style in quotes.";
}

std::string parse_style_span(const std::string& raw) {
  const auto open = raw.find('"');
  if (open == std::string::npos) throw ParseError("no quoted style in VLM reply", raw);
  const auto close = raw.find('"', open + 1);
  if (close == std::string::npos) throw ParseError("unterminated quoted style in VLM reply", raw);
  std::string style = raw.substr(open + 1, close - open - 1);
  if (trim(style).empty()) throw ParseError("quoted style is empty", raw);
  return style;
}

VlmResponse parse_vlm_response(const std::string& raw, BoxFormat format) {
  if (raw.empty()) throw ParseError("empty VLM reply", raw);

  static const std::regex tuple(
      R"(\[\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*,)"
      R"(\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*,)"
      R"(\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*,)"
      R"(\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\])");
  std::smatch match;
  if (!std::regex_search(raw, match, tuple)) {
    throw ParseError("no bracketed 4-tuple of numbers in VLM reply", raw);
  }
  double v[4];
  for (int i = 0; i < 4; ++i) v[i] = parse_real(match[i + 1].str());

  NormalizedBox box;
  switch (format) {
    case BoxFormat::XYXY: box = {v[0], v[1], v[2], v[3]}; break;
    case BoxFormat::YXYX: box = {v[1], v[0], v[3], v[2]}; break;
    case BoxFormat::CXCYWH:
      box = {v[0] - v[2] / 2, v[1] - v[3] / 2, v[0] + v[2] / 2, v[1] + v[3] / 2};
      break;
  }
  box.x0 = std::clamp(box.x0, 0.0, 1.0);
  box.y0 = std::clamp(box.y0, 0.0, 1.0);
  box.x1 = std::clamp(box.x1, 0.0, 1.0);
  box.y1 = std::clamp(box.y1, 0.0, 1.0);
  if (!(box.x0 < box.x1) || !(box.y0 < box.y1)) throw ParseError("degenerate box in VLM reply", raw);

  return VlmResponse{raw, box, parse_style_span(raw)};
}

BoundingBox denormalize_box(const NormalizedBox& nbox, int width, int height) {
  if (width < 1 || height < 1) throw_invalid("frame has zero area");
  auto lo = [](double v, int extent) {
    return std::clamp(static_cast<int>(std::floor(snap(v * extent))), 0, extent);
  };
  auto hi = [](double v, int extent) {
    return std::clamp(static_cast<int>(std::ceil(snap(v * extent))), 0, extent);
  };
  BoundingBox box{lo(nbox.x0, width), lo(nbox.y0, height), hi(nbox.x1, width), hi(nbox.y1, height)};
  if (!box.valid_within(width, height)) throw_invalid("normalized box maps to a degenerate pixel box");
  return box;
}

BinaryMask box_to_mask(const ImageTensor& image, const BoundingBox& box,
                       SegmentationBackend& backend) {
  if (!box.valid_within(image.width(), image.height())) throw_invalid("segmentation box outside image");

  SegmentationResult result;
  for (int attempt = 0;; ++attempt) {
    try {
      result = backend.segment(image, box);
      break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Backend || attempt > 0) throw;
    }
  }
  if (result.masks.empty() || result.masks.size() != result.scores.size()) {
    throw Error(ErrorKind::Backend, "segmenter returned no masks or mismatched scores");
  }
  const auto best = std::distance(
      result.scores.begin(), std::max_element(result.scores.begin(), result.scores.end()));
  const auto& scores = result.masks[static_cast<size_t>(best)];
  if (scores.dim() != 2 || scores.size(0) != image.height() || scores.size(1) != image.width()) {
    throw Error(ErrorKind::Backend, "segmenter mask does not match the image size");
  }
  BinaryMask mask = BinaryMask::from_scores(scores, 0.5);
  if (mask.foreground_count() == 0) throw Error(ErrorKind::EmptyRegion, "segmenter returned an empty mask");
  return mask;
}

BinaryMask refine_mask(const BinaryMask& mask, double min_hole_fraction) {
  if (mask.empty() || mask.foreground_count() == 0) {
    throw Error(ErrorKind::EmptyRegion, "cannot refine an empty mask");
  }
  const int h = mask.height();
  const int w = mask.width();
  auto bytes = mask.tensor().contiguous();
  cv::Mat fg(h, w, CV_8UC1, bytes.data_ptr<uint8_t>());
  cv::Mat background = (fg == 0) / 255;

  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(background, labels, stats, centroids, 4, CV_32S);
  const double max_hole = min_hole_fraction * static_cast<double>(h) * w;

  std::vector<bool> fill(static_cast<size_t>(n), false);
  for (int label = 1; label < n; ++label) {
    const int x = stats.at<int>(label, cv::CC_STAT_LEFT);
    const int y = stats.at<int>(label, cv::CC_STAT_TOP);
    const int bw = stats.at<int>(label, cv::CC_STAT_WIDTH);
    const int bh = stats.at<int>(label, cv::CC_STAT_HEIGHT);
    const bool touches_border = x == 0 || y == 0 || x + bw == w || y + bh == h;
    fill[static_cast<size_t>(label)] =
        !touches_border && stats.at<int>(label, cv::CC_STAT_AREA) < max_hole;
  }

  auto out = bytes.clone();
  uint8_t* p = out.data_ptr<uint8_t>();
  for (int y = 0; y < h; ++y) {
    const int* row = labels.ptr<int>(y);
    for (int x = 0; x < w; ++x) {
      if (row[x] > 0 && fill[static_cast<size_t>(row[x])]) p[y * w + x] = 1;
    }
  }
  BinaryMask refined(out);
  if (refined.foreground_count() == 0) throw Error(ErrorKind::EmptyRegion, "refinement emptied the mask");
  return refined;
}

std::string region_phrase_from_directive(const StyleDirective& directive) {
  static const std::regex pattern(R"(\bto\s+(.+?)(?:\s+in\s+the\s+(?:image|photo|picture))?\s*[.!]?\s*$)",
                                  std::regex::icase);
  std::smatch match;
  const std::string& text = directive.raw_text();
  if (std::regex_search(text, match, pattern)) return trim(match[1].str());
  return trim(text);
}

namespace {

template <typename Fn>
auto attributed(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw e.with_stage(stage);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Backend, e.what(), stage);
  }
}

// One fresh query after a parse failure, then the parse error surfaces.
template <typename Parse>
auto query_and_parse(const ImageTensor& image, const std::string& prompt, VlmBackend& vlm,
                     Parse&& parse) {
  for (int attempt = 0;; ++attempt) {
    const std::string reply = attributed("vlm", [&] { return vlm.query(image, prompt); });
    try {
      return parse(reply);
    } catch (const ParseError&) {
      if (attempt > 0) throw;
    }
  }
}

}  // namespace

RegionStyleTask ground(const ImageTensor& image, const StyleDirective& directive, VlmBackend& vlm,
                       SegmentationBackend& segmenter, const GroundingOptions& options, GroundingDetails* details) {
  const std::string prompt = build_vlm_query(directive);
  const VlmResponse response = query_and_parse(image, prompt, vlm, [&](const std::string& raw) {
    return parse_vlm_response(raw, options.box_format);
  });

  RegionStyleTask task;
  task.region_phrase = region_phrase_from_directive(directive);
  task.style_phrase = response.parsed_style;
  const BoundingBox prompt_box = attributed(
      "denormalize", [&] { return denormalize_box(response.parsed_box, image.width(), image.height()); });
  const BinaryMask raw_mask = attributed("segment", [&] { return box_to_mask(image, prompt_box, segmenter); });
  task.mask = attributed("refine", [&] { return refine_mask(raw_mask, options.min_hole_fraction); });
  task.box = attributed("refine", [&] { return tight_bbox(task.mask); });
  task.validate();
  if (details) *details = GroundingDetails{response, prompt_box};
  return task;
}

std::string extract_style(const ImageTensor& image, const StyleDirective& directive, VlmBackend& vlm) {
  return query_and_parse(image, build_vlm_query(directive), vlm,
                         [](const std::string& raw) { return parse_style_span(raw); });
}

RegionStyleTask ground_with_mask(const ImageTensor& image, const StyleDirective& directive,
                                 const BinaryMask& mask, VlmBackend& vlm) {
  if (!mask.matches(image)) throw Error(ErrorKind::InvalidInput, "mask override does not match the image", "mask");
  RegionStyleTask task;
  task.style_phrase = extract_style(image, directive, vlm);
  task.region_phrase = region_phrase_from_directive(directive);
  task.mask = mask;
  task.box = attributed("mask", [&] { return tight_bbox(mask); });
  task.validate();
  return task;
}

Grounder make_grounder(std::shared_ptr<VlmBackend> vlm, std::shared_ptr<SegmentationBackend> segmenter,
                       GroundingOptions options) {
  return [vlm = std::move(vlm), segmenter = std::move(segmenter), options](
             const ImageTensor& image, const StyleDirective& directive) {
    return ground(image, directive, *vlm, *segmenter, options);
  };
}

}  // namespace least
