#pragma once

// Text grounding: turns a free-form style directive into a region mask and a
// style phrase, using a vision-language model (box + style) and a
// box-prompted segmenter (box -> mask).

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "least/imaging.hpp"

namespace least {

/// The user's full instruction, e.g. "apply cubism style to the building".
class StyleDirective {
 public:
  /// Throws invalid-input when the text is empty after trimming.
  explicit StyleDirective(std::string raw_text);
  const std::string& raw_text() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// One grounded unit of work.
struct RegionStyleTask {
  std::string region_phrase;
  std::string style_phrase;
  BinaryMask mask;
  BoundingBox box;

  /// Throws unless style is non-empty, the mask has foreground and box is its tight box.
  void validate() const;
};

struct VlmResponse {
  std::string raw;
  NormalizedBox parsed_box;
  std::string parsed_style;
};

/// How the VLM lays out the four numbers it returns.
enum class BoxFormat {
  XYXY,    // x0, y0, x1, y1
  YXYX,    // y0, x0, y1, x1
  CXCYWH,  // center x, center y, width, height
};

BoxFormat parse_box_format(const std::string& name);
std::string to_string(BoxFormat format);

class VlmBackend {
 public:
  virtual ~VlmBackend() = default;
  /// Sends the image and prompt, returns the model's free text reply.
  virtual std::string query(const ImageTensor& image, const std::string& prompt) = 0;
};

struct SegmentationResult {
  std::vector<torch::Tensor> masks;  // [H, W] scores or binary masks
  std::vector<double> scores;
};

class SegmentationBackend {
 public:
  virtual ~SegmentationBackend() = default;
  virtual SegmentationResult segment(const ImageTensor& image, const BoundingBox& box) = 0;
};

std::string build_vlm_query(const StyleDirective& directive);

/// Grammar: the first bracketed real 4-tuple is the box, the first
/// double-quoted span is the style. Coordinates are clamped to [0, 1].
VlmResponse parse_vlm_response(const std::string& raw, BoxFormat format = BoxFormat::XYXY);

/// Only the quoted style span; used when the region comes from a mask override.
std::string parse_style_span(const std::string& raw);

/// floor/ceil widening to pixels, clamped to the frame.
BoundingBox denormalize_box(const NormalizedBox& nbox, int width, int height);

/// Best-scoring backend mask binarized at 0.5. Retries a failing backend once.
BinaryMask box_to_mask(const ImageTensor& image, const BoundingBox& box,
                       SegmentationBackend& backend);

/// Fills background holes smaller than min_hole_fraction of the image area.
/// Every foreground component is kept.
BinaryMask refine_mask(const BinaryMask& mask, double min_hole_fraction = 1e-3);

/// Best-effort region phrase ("the building") pulled from the directive;
/// falls back to the whole directive.
std::string region_phrase_from_directive(const StyleDirective& directive);

/// Asks the VLM for the style phrase only (query, parse, one retry).
std::string extract_style(const ImageTensor& image, const StyleDirective& directive, VlmBackend& vlm);

/// Intermediate grounding products, for debugging output.
struct GroundingDetails {
  VlmResponse response;
  BoundingBox prompt_box;
};

struct GroundingOptions {
  BoxFormat box_format = BoxFormat::XYXY;
  double min_hole_fraction = 1e-3;
};

RegionStyleTask ground(const ImageTensor& image, const StyleDirective& directive,
                       VlmBackend& vlm, SegmentationBackend& segmenter,
                       const GroundingOptions& options = {}, GroundingDetails* details = nullptr);

/// Grounding with a caller-supplied mask: the VLM is asked only for the style.
RegionStyleTask ground_with_mask(const ImageTensor& image, const StyleDirective& directive,
                                 const BinaryMask& mask, VlmBackend& vlm);

using Grounder = std::function<RegionStyleTask(const ImageTensor&, const StyleDirective&)>;

Grounder make_grounder(std::shared_ptr<VlmBackend> vlm,
                       std::shared_ptr<SegmentationBackend> segmenter,
                       GroundingOptions options = {});

}  // namespace least
