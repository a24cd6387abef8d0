#include "least/losses.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

#include "least/error.hpp"
#include "least/log.hpp"

namespace least {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  for (double w : {lambda_dir, lambda_patch, lambda_content, lambda_tv}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorKind::Config, "loss weights must be finite and non-negative");
  }
}

TextDelta::TextDelta(torch::Tensor vector) : vector_(std::move(vector)) {
  if (!vector_.defined() || vector_.dim() != 1) throw_invalid("text delta must be a vector");
  if (!torch::isfinite(vector_).all().item<bool>()) throw_invalid("text delta is not finite");
  if (vector_.norm().item<double>() < kNormFloor) {
    throw Error(ErrorKind::DegenerateStyle, "style text embeds identically to the source text");
  }
}

TextDelta text_delta(const std::string& style, const std::string& source_text, TextEncoder& encoder) {
  if (style.empty() || source_text.empty()) throw_invalid("style and source text must be non-empty");
  torch::NoGradGuard no_grad;
  auto delta = encoder.encode(style) - encoder.encode(source_text);
  if (delta.norm().item<double>() < kNormFloor) {
    throw Error(ErrorKind::DegenerateStyle, "style '" + style + "' embeds identically to '" + source_text + "'");
  }
  return TextDelta(delta);
}

// ---------------------------------------------------------------------------

std::vector<PatchBox> sample_patches(const BoundingBox& box, int count, int patch_size, std::mt19937_64& rng) {
  if (box.width() < 1 || box.height() < 1) throw_invalid("patch box is degenerate");
  if (count < 1) throw_invalid("patch count must be at least 1");
  if (patch_size < 1) throw_invalid("patch size must be positive");
  const int side = std::min({patch_size, box.width(), box.height()});
  if (side == 1) log_warn("patch sampling box is 1 pixel wide; patches degenerate to single pixels");
  std::uniform_int_distribution<int> xs(box.x0, box.x1 - side);
  std::uniform_int_distribution<int> ys(box.y0, box.y1 - side);
  std::vector<PatchBox> patches;
  patches.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int x = xs(rng);
    const int y = ys(rng);
    patches.push_back({x, y, side});
  }
  return patches;
}

// ---------------------------------------------------------------------------

torch::Tensor embed_images(ImageEncoder& encoder, const torch::Tensor& nchw) {
  const auto r = encoder.input_resolution();
  return encoder.forward(encoder.normalization().apply(resize_bilinear(nchw, r, r)));
}

std::map<std::string, torch::Tensor> extract_features(FeatureExtractor& extractor, const torch::Tensor& nchw) {
  const auto r = extractor.input_resolution();
  return extractor.forward(extractor.normalization().apply(resize_bilinear(nchw, r, r)));
}

torch::Tensor directional_loss(const torch::Tensor& delta_image, const TextDelta& dt) {
  auto t = dt.vector().to(delta_image.scalar_type());
  auto t_norm = t.norm().clamp_min(kNormFloor);
  auto i_norm = delta_image.norm(2, {1}).clamp_min(kNormFloor);
  auto cosine = delta_image.matmul(t) / (t_norm * i_norm);
  return 1.0 - cosine;
}

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 4 || b.dim() != 4 || a.sizes() != b.sizes()) throw_invalid("content and stylized shapes differ");
}

void check_mask(const torch::Tensor& image, const torch::Tensor& mask) {
  if (mask.dim() != 4 || mask.size(0) != 1 || mask.size(1) != 1 || mask.size(2) != image.size(2) ||
      mask.size(3) != image.size(3)) {
    throw_invalid("mask shape does not match the image");
  }
}

// Homography taking output pixel centers to input pixel coordinates, sampled
// like torchvision's RandomPerspective.
torch::Tensor perspective_grid(int64_t n, int64_t size, double distortion, std::mt19937_64& rng,
                               torch::Dtype dtype) {
  const double half = size / 2.0;
  const int reach = static_cast<int>(distortion * half);
  std::uniform_int_distribution<int> jitter(0, std::max(reach, 0));
  const float last = static_cast<float>(size - 1);
  std::vector<float> grid_values;
  grid_values.reserve(static_cast<size_t>(n * size * size * 2));
  for (int64_t k = 0; k < n; ++k) {
    const std::vector<cv::Point2f> start{{0, 0}, {last, 0}, {last, last}, {0, last}};
    const std::vector<cv::Point2f> end{
        {static_cast<float>(jitter(rng)), static_cast<float>(jitter(rng))},
        {last - jitter(rng), static_cast<float>(jitter(rng))},
        {last - jitter(rng), last - jitter(rng)},
        {static_cast<float>(jitter(rng)), last - jitter(rng)}};
    const cv::Mat h = cv::getPerspectiveTransform(end, start);
    for (int64_t v = 0; v < size; ++v) {
      for (int64_t u = 0; u < size; ++u) {
        const double w = h.at<double>(2, 0) * u + h.at<double>(2, 1) * v + h.at<double>(2, 2);
        const double x = (h.at<double>(0, 0) * u + h.at<double>(0, 1) * v + h.at<double>(0, 2)) / w;
        const double y = (h.at<double>(1, 0) * u + h.at<double>(1, 1) * v + h.at<double>(1, 2)) / w;
        grid_values.push_back(static_cast<float>((2.0 * x + 1.0) / size - 1.0));
        grid_values.push_back(static_cast<float>((2.0 * y + 1.0) / size - 1.0));
      }
    }
  }
  return torch::tensor(grid_values).view({n, size, size, 2}).to(dtype);
}

torch::Tensor patch_batch(const torch::Tensor& image, std::span<const PatchBox> patches, int64_t resolution) {
  std::vector<torch::Tensor> crops;
  crops.reserve(patches.size());
  for (const auto& p : patches) crops.push_back(crop_resize(image, p.box(), resolution, resolution));
  return torch::cat(crops, 0);
}

torch::Tensor patch_directional(const torch::Tensor& content_embedding, const torch::Tensor& stylized,
                                std::span<const PatchBox> patches, const TextDelta& dt, ImageEncoder& encoder,
                                const torch::Tensor& grid) {
  const auto r = encoder.input_resolution();
  auto crops = patch_batch(stylized, patches, r);
  if (grid.defined()) {
    crops = F::grid_sample(crops, grid, F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false));
  }
  auto stylized_embedding = encoder.forward(encoder.normalization().apply(crops));
  return directional_loss(stylized_embedding - content_embedding, dt).sum();
}

torch::Tensor embed_content_patches(const torch::Tensor& content, std::span<const PatchBox> patches,
                                    ImageEncoder& encoder, const torch::Tensor& grid) {
  torch::NoGradGuard no_grad;
  const auto r = encoder.input_resolution();
  auto crops = patch_batch(content, patches, r);
  if (grid.defined()) {
    crops = F::grid_sample(crops, grid, F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false));
  }
  return encoder.forward(encoder.normalization().apply(crops));
}

torch::Tensor augmentation_grid(std::optional<PerspectiveAugmentation> augment, int64_t n, int64_t resolution,
                                torch::Dtype dtype) {
  if (!augment) return {};
  if (augment->rng == nullptr) throw_invalid("perspective augmentation needs a random source");
  return perspective_grid(n, resolution, augment->distortion, *augment->rng, dtype);
}

torch::Tensor content_term(const std::map<std::string, torch::Tensor>& reference,
                           const std::map<std::string, torch::Tensor>& stylized) {
  torch::Tensor sum;
  for (const auto& layer : content_layers()) {
    auto mse = (stylized.at(layer) - reference.at(layer)).pow(2).mean();
    sum = sum.defined() ? sum + mse : mse;
  }
  return sum / static_cast<double>(content_layers().size());
}

}  // namespace

torch::Tensor masked_directional_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                      const torch::Tensor& mask, const TextDelta& dt, ImageEncoder& encoder) {
  check_pair(content, stylized);
  check_mask(stylized, mask);
  torch::Tensor content_embedding;
  {
    torch::NoGradGuard no_grad;
    content_embedding = embed_images(encoder, content * mask);
  }
  auto stylized_embedding = embed_images(encoder, stylized * mask);
  return directional_loss(stylized_embedding - content_embedding, dt).sum();
}

torch::Tensor masked_patch_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                std::span<const PatchBox> patches, const TextDelta& dt, ImageEncoder& encoder,
                                std::optional<PerspectiveAugmentation> augment) {
  check_pair(content, stylized);
  if (patches.empty()) throw_invalid("patch loss needs at least one patch");
  auto grid = augmentation_grid(augment, static_cast<int64_t>(patches.size()), encoder.input_resolution(),
                                stylized.scalar_type());
  auto content_embedding = embed_content_patches(content, patches, encoder, grid);
  return patch_directional(content_embedding, stylized, patches, dt, encoder, grid);
}

torch::Tensor masked_content_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                  const BoundingBox& box, FeatureExtractor& extractor) {
  check_pair(content, stylized);
  std::map<std::string, torch::Tensor> reference;
  {
    torch::NoGradGuard no_grad;
    reference = extract_features(extractor, crop(content, box));
  }
  return content_term(reference, extract_features(extractor, crop(stylized, box)));
}

torch::Tensor masked_tv_loss(const torch::Tensor& stylized, const torch::Tensor& mask) {
  if (stylized.dim() != 4) throw_invalid("TV loss expects an NCHW tensor");
  check_mask(stylized, mask);
  using torch::indexing::None;
  using torch::indexing::Slice;
  auto j = stylized * mask;
  auto zero = torch::zeros({}, stylized.options());
  auto horizontal = j.size(3) > 1
                        ? (j.index({Slice(), Slice(), Slice(), Slice(1, None)}) -
                           j.index({Slice(), Slice(), Slice(), Slice(None, -1)})).pow(2).mean()
                        : zero;
  auto vertical = j.size(2) > 1
                      ? (j.index({Slice(), Slice(), Slice(1, None), Slice()}) -
                         j.index({Slice(), Slice(), Slice(None, -1), Slice()})).pow(2).mean()
                      : zero;
  return horizontal + vertical;
}

// ---------------------------------------------------------------------------

LossBreakdown::Values LossBreakdown::values() const {
  return {total.item<double>(), dir.item<double>(), patch.item<double>(), content.item<double>(), tv.item<double>()};
}

RegionObjective::RegionObjective(const torch::Tensor& content, const RegionStyleTask& task, TextDelta dt,
                                 LossWeights weights, EncoderBundle encoders)
    : content_(content.detach()),
      box_(task.box),
      dt_(std::move(dt)),
      weights_(weights),
      encoders_(std::move(encoders)) {
  weights_.validate();
  encoders_.validate();
  if (content_.dim() != 4 || content_.size(0) != 1 || content_.size(1) != 3) throw_invalid("content must be [1, 3, H, W]");
  if (task.mask.height() != content_.size(2) || task.mask.width() != content_.size(3)) {
    throw_invalid("task mask does not match the content image");
  }
  if (!box_.valid_within(static_cast<int>(content_.size(3)), static_cast<int>(content_.size(2)))) {
    throw_invalid("task box outside the content image");
  }
  mask_ = task.mask.as_float(content_.scalar_type());
  torch::NoGradGuard no_grad;
  content_embedding_ = embed_images(*encoders_.image, content_ * mask_);
  content_features_ = extract_features(*encoders_.features, crop(content_, box_));
}

LossBreakdown RegionObjective::evaluate(const torch::Tensor& stylized, std::span<const PatchBox> patches,
                                        std::optional<PerspectiveAugmentation> augment) const {
  check_pair(content_, stylized);
  if (patches.empty()) throw_invalid("patch loss needs at least one patch");
  LossBreakdown out;
  out.dir = directional_loss(embed_images(*encoders_.image, stylized * mask_) - content_embedding_, dt_).sum();

  auto grid = augmentation_grid(augment, static_cast<int64_t>(patches.size()), encoders_.image->input_resolution(),
                                stylized.scalar_type());
  auto content_patches = embed_content_patches(content_, patches, *encoders_.image, grid);
  out.patch = patch_directional(content_patches, stylized, patches, dt_, *encoders_.image, grid);

  out.content = content_term(content_features_, extract_features(*encoders_.features, crop(stylized, box_)));
  out.tv = masked_tv_loss(stylized, mask_);
  out.total = weights_.lambda_dir * out.dir + weights_.lambda_patch * out.patch +
              weights_.lambda_content * out.content + weights_.lambda_tv * out.tv;
  return out;
}

LossBreakdown total_objective(const torch::Tensor& content, const torch::Tensor& stylized,
                              const RegionStyleTask& task, const TextDelta& dt, std::span<const PatchBox> patches,
                              const LossWeights& weights, const EncoderBundle& encoders) {
  return RegionObjective(content, task, dt, weights, encoders).evaluate(stylized, patches);
}

}  // namespace least
