#include "least/imaging.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <system_error>

#include "least/error.hpp"

namespace least {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// ImageTensor
// ---------------------------------------------------------------------------

ImageTensor::ImageTensor(torch::Tensor chw) {
  if (!chw.defined() || chw.dim() != 3 || chw.size(0) != 3) {
    throw_invalid("image tensor must have shape [3, H, W]");
  }
  if (chw.size(1) < 1 || chw.size(2) < 1) throw_invalid("image has zero area");
  if (!chw.is_floating_point()) throw_invalid("image tensor must be floating point");
  chw = chw.detach().to(torch::kCPU).contiguous();
  if (!torch::isfinite(chw).all().item<bool>()) throw_invalid("image contains non-finite values");
  if (chw.min().item<double>() < 0.0 || chw.max().item<double>() > 1.0) {
    throw_invalid("image values must lie in [0, 1]");
  }
  data_ = chw.clone();
}

ImageTensor ImageTensor::constant(int height, int width, double value, torch::Dtype dtype) {
  return ImageTensor(torch::full({3, height, width}, value, torch::TensorOptions().dtype(dtype)));
}

double ImageTensor::at(int channel, int y, int x) const {
  return data_.index({channel, y, x}).item<double>();
}

bool ImageTensor::same_shape(const ImageTensor& other) const {
  return !empty() && !other.empty() && height() == other.height() && width() == other.width();
}

bool ImageTensor::bitwise_equal(const ImageTensor& other) const {
  return same_shape(other) && dtype() == other.dtype() && torch::equal(data_, other.data_);
}

// ---------------------------------------------------------------------------
// BinaryMask
// ---------------------------------------------------------------------------

BinaryMask::BinaryMask(torch::Tensor hw) {
  if (!hw.defined() || hw.dim() != 2) throw_invalid("mask tensor must have shape [H, W]");
  if (hw.size(0) < 1 || hw.size(1) < 1) throw_invalid("mask has zero area");
  hw = hw.detach().to(torch::kCPU);
  if (!torch::logical_or(hw == 0, hw == 1).all().item<bool>()) {
    throw_invalid("mask values must be exactly 0 or 1");
  }
  data_ = hw.to(torch::kUInt8).contiguous().clone();
}

BinaryMask BinaryMask::from_scores(const torch::Tensor& hw, double threshold) {
  return BinaryMask((hw.detach().to(torch::kFloat64) >= threshold).to(torch::kUInt8));
}

BinaryMask BinaryMask::filled(int height, int width, bool value) {
  return BinaryMask(torch::full({height, width}, value ? 1 : 0, torch::kUInt8));
}

BinaryMask BinaryMask::from_box(int height, int width, const BoundingBox& box) {
  if (!box.valid_within(width, height)) throw_invalid("box outside mask frame");
  auto t = torch::zeros({height, width}, torch::kUInt8);
  using torch::indexing::Slice;
  t.index_put_({Slice(box.y0, box.y1), Slice(box.x0, box.x1)}, 1);
  return BinaryMask(t);
}

torch::Tensor BinaryMask::as_float(torch::Dtype dtype) const {
  return data_.to(dtype).unsqueeze(0).unsqueeze(0);
}

bool BinaryMask::at(int y, int x) const { return data_.index({y, x}).item<uint8_t>() != 0; }

int64_t BinaryMask::foreground_count() const {
  return empty() ? 0 : data_.sum().item<int64_t>();
}

BinaryMask BinaryMask::complement() const { return BinaryMask(1 - data_); }

bool BinaryMask::matches(const ImageTensor& image) const {
  return !empty() && !image.empty() && height() == image.height() && width() == image.width();
}

bool BinaryMask::operator==(const BinaryMask& other) const {
  if (empty() || other.empty()) return empty() == other.empty();
  return height() == other.height() && width() == other.width() &&
         torch::equal(data_, other.data_);
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

uint8_t quantize_unit(double value) noexcept {
  if (!(value > 0.0)) return 0;  // also maps NaN to 0
  if (value >= 1.0) return 255;
  return static_cast<uint8_t>(std::floor(value * 255.0 + 0.5));
}

namespace {

cv::Mat read_raster(const fs::path& path, int flags) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw Error(ErrorKind::Decode, "cannot read image file " + path.string());
  }
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), flags);
  } catch (const cv::Exception& e) {
    throw Error(ErrorKind::Decode, "failed to decode " + path.string() + ": " + e.what());
  }
  if (mat.empty()) throw Error(ErrorKind::Decode, "failed to decode " + path.string());
  if (mat.rows < 1 || mat.cols < 1) throw_invalid("zero-area image " + path.string());
  return mat;
}

ImageTensor from_bgr8(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return ImageTensor(hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0));
}

void write_png(const cv::Mat& mat, const fs::path& path) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw Error(ErrorKind::Write, "failed to write " + path.string() + ": " + e.what());
  }
  if (!ok) throw Error(ErrorKind::Write, "failed to write " + path.string());
}

torch::Tensor quantize_tensor(const torch::Tensor& t) {
  // Matches quantize_unit element-wise.
  return torch::floor(t.to(torch::kFloat64).clamp(0.0, 1.0) * 255.0 + 0.5).to(torch::kUInt8);
}

}  // namespace

ImageTensor load_image_native(const fs::path& path) {
  return from_bgr8(read_raster(path, cv::IMREAD_COLOR));
}

ImageTensor load_image(const fs::path& path, int target_resolution) {
  if (target_resolution < 1) throw_invalid("target resolution must be positive");
  ImageTensor native = load_image_native(path);
  if (native.height() == target_resolution && native.width() == target_resolution) return native;
  auto resized = resize_bilinear(native.batched(), target_resolution, target_resolution);
  return ImageTensor(resized.squeeze(0).clamp(0.0, 1.0));
}

void save_image(const ImageTensor& image, const fs::path& path) {
  if (image.empty()) throw_invalid("cannot save an empty image");
  auto hwc = quantize_tensor(image.tensor()).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(image.height(), image.width(), CV_8UC3, hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  write_png(bgr, path);
}

BinaryMask load_mask(const fs::path& path, int target_resolution) {
  cv::Mat gray = read_raster(path, cv::IMREAD_GRAYSCALE);
  auto t = torch::from_blob(gray.data, {gray.rows, gray.cols}, torch::kUInt8).to(torch::kFloat32);
  if (target_resolution > 0 && (gray.rows != target_resolution || gray.cols != target_resolution)) {
    t = resize_bilinear(t.unsqueeze(0).unsqueeze(0), target_resolution, target_resolution)
            .squeeze(0)
            .squeeze(0);
  }
  return BinaryMask::from_scores(t, 128.0);
}

void save_mask(const BinaryMask& mask, const fs::path& path) {
  if (mask.empty()) throw_invalid("cannot save an empty mask");
  auto bytes = (mask.tensor() * 255).to(torch::kUInt8).contiguous();
  cv::Mat gray(mask.height(), mask.width(), CV_8UC1, bytes.data_ptr<uint8_t>());
  write_png(gray, path);
}

std::string encode_png(const ImageTensor& image) {
  auto hwc = quantize_tensor(image.tensor()).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(image.height(), image.width(), CV_8UC3, hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<uchar> buffer;
  if (!cv::imencode(".png", bgr, buffer)) throw Error(ErrorKind::Write, "PNG encoding failed");
  return {buffer.begin(), buffer.end()};
}

// ---------------------------------------------------------------------------
// Pixel operations
// ---------------------------------------------------------------------------

ImageTensor apply_mask(const ImageTensor& image, const BinaryMask& mask) {
  if (!mask.matches(image)) throw_invalid("mask and image shapes differ");
  return ImageTensor(image.tensor() * mask.as_float(image.dtype()).squeeze(0));
}

ImageTensor composite(const ImageTensor& stylized, const ImageTensor& content,
                      const BinaryMask& mask) {
  if (!stylized.same_shape(content) || !mask.matches(content)) {
    throw_invalid("composite inputs must share one shape");
  }
  // torch::where copies each source verbatim, so background pixels stay
  // bit-identical to the content image.
  auto m = mask.tensor().to(torch::kBool).unsqueeze(0).expand({3, -1, -1});
  auto fg = stylized.tensor().to(content.dtype());
  return ImageTensor(torch::where(m, fg, content.tensor()));
}

BoundingBox tight_bbox(const BinaryMask& mask) {
  if (mask.empty() || mask.foreground_count() == 0) {
    throw Error(ErrorKind::EmptyRegion, "mask has no foreground pixels");
  }
  auto rows = mask.tensor().any(1).nonzero().flatten();
  auto cols = mask.tensor().any(0).nonzero().flatten();
  return BoundingBox{cols.min().item<int>(), rows.min().item<int>(), cols.max().item<int>() + 1,
                     rows.max().item<int>() + 1};
}

torch::Tensor resize_bilinear(const torch::Tensor& nchw, int64_t out_height, int64_t out_width) {
  if (out_height < 1 || out_width < 1) throw_invalid("resize target must be positive");
  if (nchw.size(2) == out_height && nchw.size(3) == out_width) return nchw;
  return F::interpolate(nchw, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{out_height, out_width})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
}

torch::Tensor crop(const torch::Tensor& nchw, const BoundingBox& box) {
  if (!box.valid_within(static_cast<int>(nchw.size(3)), static_cast<int>(nchw.size(2)))) {
    throw_invalid("crop box is degenerate or outside the image");
  }
  using torch::indexing::Slice;
  return nchw.index({Slice(), Slice(), Slice(box.y0, box.y1), Slice(box.x0, box.x1)});
}

torch::Tensor crop_resize(const torch::Tensor& nchw, const BoundingBox& box, int64_t out_height,
                          int64_t out_width) {
  return resize_bilinear(crop(nchw, box), out_height, out_width);
}

ImageTensor crop_resize(const ImageTensor& image, const BoundingBox& box, int out_size) {
  if (image.empty()) throw_invalid("crop of empty image");
  auto out = crop_resize(image.batched(), box, out_size, out_size).squeeze(0);
  return ImageTensor(out.clamp(0.0, 1.0));
}

uint64_t mask_checksum(const BinaryMask& mask) {
  uint64_t hash = 14695981039346656037ull;
  auto mix = [&hash](uint8_t byte) {
    hash ^= byte;
    hash *= 1099511628211ull;
  };
  if (mask.empty()) return hash;
  for (int v : {mask.height(), mask.width()}) {
    for (int shift = 0; shift < 32; shift += 8) mix(static_cast<uint8_t>(v >> shift));
  }
  auto bytes = mask.tensor().contiguous();
  const uint8_t* p = bytes.data_ptr<uint8_t>();
  for (int64_t i = 0; i < bytes.numel(); ++i) mix(p[i]);
  return hash;
}

}  // namespace least
