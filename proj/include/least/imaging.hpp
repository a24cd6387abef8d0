#pragma once

// Image, mask and box primitives shared by every stage of the pipeline.
//
// Images are stored channel-first ([3, H, W]) in a CPU tensor with values in
// [0, 1]; masks are [H, W] uint8 tensors holding 0 or 1. Both wrap their
// tensor by value and never hand out a mutable view, so they can be shared
// freely between threads.

#include <torch/torch.h>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <string>

namespace least {

/// Pixel box using the half-open convention [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const noexcept { return x1 - x0; }
  int height() const noexcept { return y1 - y0; }
  int64_t area() const noexcept { return int64_t{width()} * height(); }
  bool contains(int x, int y) const noexcept { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool contains(const BoundingBox& other) const noexcept {
    return other.x0 >= x0 && other.y0 >= y0 && other.x1 <= x1 && other.y1 <= y1;
  }
  /// True when the box is non-degenerate and lies inside a width x height frame.
  bool valid_within(int frame_width, int frame_height) const noexcept {
    return 0 <= x0 && x0 < x1 && x1 <= frame_width && 0 <= y0 && y0 < y1 && y1 <= frame_height;
  }

  auto operator<=>(const BoundingBox&) const = default;
};

/// Box in normalized [0, 1] image coordinates, corner order (x0, y0, x1, y1).
struct NormalizedBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  bool valid() const noexcept {
    return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
  }
  auto operator<=>(const NormalizedBox&) const = default;
};

class ImageTensor {
 public:
  ImageTensor() = default;
  /// Takes a [3, H, W] floating tensor (float32 or float64). Values must be
  /// finite and inside [0, 1].
  explicit ImageTensor(torch::Tensor chw);

  static ImageTensor constant(int height, int width, double value,
                              torch::Dtype dtype = torch::kFloat32);

  bool empty() const noexcept { return !data_.defined(); }
  int height() const { return static_cast<int>(data_.size(1)); }
  int width() const { return static_cast<int>(data_.size(2)); }
  torch::Dtype dtype() const { return data_.scalar_type(); }

  /// [3, H, W]. Treat as read-only.
  const torch::Tensor& tensor() const noexcept { return data_; }
  /// [1, 3, H, W] view for network and loss code.
  torch::Tensor batched() const { return data_.unsqueeze(0); }

  double at(int channel, int y, int x) const;
  bool same_shape(const ImageTensor& other) const;
  bool bitwise_equal(const ImageTensor& other) const;

 private:
  torch::Tensor data_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  /// Takes an [H, W] tensor whose values are exactly 0 or 1.
  explicit BinaryMask(torch::Tensor hw);

  /// Thresholds real-valued scores: value >= threshold becomes foreground.
  static BinaryMask from_scores(const torch::Tensor& hw, double threshold);
  static BinaryMask filled(int height, int width, bool value);
  static BinaryMask from_box(int height, int width, const BoundingBox& box);

  bool empty() const noexcept { return !data_.defined(); }
  int height() const { return static_cast<int>(data_.size(0)); }
  int width() const { return static_cast<int>(data_.size(1)); }

  /// [H, W] uint8 with values in {0, 1}.
  const torch::Tensor& tensor() const noexcept { return data_; }
  /// [1, 1, H, W] in the requested floating type, ready for broadcasting.
  torch::Tensor as_float(torch::Dtype dtype = torch::kFloat32) const;

  bool at(int y, int x) const;
  int64_t foreground_count() const;
  BinaryMask complement() const;
  bool matches(const ImageTensor& image) const;
  bool operator==(const BinaryMask& other) const;

 private:
  torch::Tensor data_;
};

/// Decodes a PNG/JPEG and stretches it to target_resolution x target_resolution
/// with bilinear interpolation.
ImageTensor load_image(const std::filesystem::path& path, int target_resolution);

/// Decodes an RGB raster at native resolution.
ImageTensor load_image_native(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG; values are clamped to [0, 1] and quantized with
/// round-half-up.
void save_image(const ImageTensor& image, const std::filesystem::path& path);

/// Single-channel 8-bit PNG masks: bytes >= 128 are foreground. When
/// target_resolution > 0 the mask is resampled before thresholding.
BinaryMask load_mask(const std::filesystem::path& path, int target_resolution = 0);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);

/// round(clamp(v, 0, 1) * 255) with halves rounded up.
uint8_t quantize_unit(double value) noexcept;

ImageTensor apply_mask(const ImageTensor& image, const BinaryMask& mask);
ImageTensor composite(const ImageTensor& stylized, const ImageTensor& content,
                      const BinaryMask& mask);
BoundingBox tight_bbox(const BinaryMask& mask);
ImageTensor crop_resize(const ImageTensor& image, const BoundingBox& box, int out_size);

// Tensor-level forms used inside differentiable code. All take NCHW tensors.

/// Bilinear resize (half-pixel centers, no antialiasing). Identity when the
/// size already matches.
torch::Tensor resize_bilinear(const torch::Tensor& nchw, int64_t out_height, int64_t out_width);
torch::Tensor crop(const torch::Tensor& nchw, const BoundingBox& box);
torch::Tensor crop_resize(const torch::Tensor& nchw, const BoundingBox& box, int64_t out_height,
                          int64_t out_width);

/// Stable 64-bit FNV-1a checksum over the mask bytes and shape.
uint64_t mask_checksum(const BinaryMask& mask);

/// PNG encoding of an image, for wire transfer to remote backends.
std::string encode_png(const ImageTensor& image);

}  // namespace least
