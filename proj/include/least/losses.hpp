#pragma once

// Masked objectives for local text-guided stylization.
//
// All image arguments are NCHW tensors with values in [0, 1] (batch 1 for
// whole images); masks are [1, 1, H, W] floating tensors of zeros and ones.
// Every loss is differentiable with respect to the stylized image.

#include <torch/torch.h>

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "least/encoders.hpp"
#include "least/grounding.hpp"
#include "least/imaging.hpp"

namespace least {

inline constexpr double kNormFloor = 1e-8;

struct LossWeights {
  double lambda_dir = 500.0;
  double lambda_patch = 1000.0;
  double lambda_content = 150.0;
  double lambda_tv = 2e-3;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// E_T(style) - E_T(source); never (numerically) zero.
class TextDelta {
 public:
  explicit TextDelta(torch::Tensor vector);
  const torch::Tensor& vector() const noexcept { return vector_; }

 private:
  torch::Tensor vector_;
};

TextDelta text_delta(const std::string& style, const std::string& source_text, TextEncoder& encoder);

/// Square patch with origin (x, y).
struct PatchBox {
  int x = 0;
  int y = 0;
  int size = 0;

  BoundingBox box() const { return {x, y, x + size, y + size}; }
  bool operator==(const PatchBox&) const = default;
};

/// `count` patches with uniformly drawn origins; the side is clamped to the
/// box so every patch stays inside it.
std::vector<PatchBox> sample_patches(const BoundingBox& box, int count, int patch_size, std::mt19937_64& rng);

/// Random perspective warp applied identically to content and stylized crops.
struct PerspectiveAugmentation {
  std::mt19937_64* rng = nullptr;
  double distortion = 0.5;
};

/// Resize to the encoder's resolution, normalize, embed: [N, D].
torch::Tensor embed_images(ImageEncoder& encoder, const torch::Tensor& nchw);
/// Resize to the extractor's resolution, normalize, extract.
std::map<std::string, torch::Tensor> extract_features(FeatureExtractor& extractor, const torch::Tensor& nchw);

/// Row-wise 1 - cos(dt, delta_image) with both norms floored at kNormFloor;
/// an exactly-zero image delta scores 1. Returns [N].
torch::Tensor directional_loss(const torch::Tensor& delta_image, const TextDelta& dt);

torch::Tensor masked_directional_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                      const torch::Tensor& mask, const TextDelta& dt, ImageEncoder& encoder);

/// Sum (not mean) of per-patch directional losses.
torch::Tensor masked_patch_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                std::span<const PatchBox> patches, const TextDelta& dt, ImageEncoder& encoder,
                                std::optional<PerspectiveAugmentation> augment = std::nullopt);

/// Mean over content_layers() of the feature MSE between box crops.
torch::Tensor masked_content_loss(const torch::Tensor& content, const torch::Tensor& stylized,
                                  const BoundingBox& box, FeatureExtractor& extractor);

/// Mean squared horizontal plus mean squared vertical forward differences of stylized * mask.
torch::Tensor masked_tv_loss(const torch::Tensor& stylized, const torch::Tensor& mask);

struct LossBreakdown {
  torch::Tensor total;
  torch::Tensor dir;
  torch::Tensor patch;
  torch::Tensor content;
  torch::Tensor tv;

  struct Values {
    double total, dir, patch, content, tv;
  };
  Values values() const;
};

/// The four masked objectives for one region with the content-side
/// embeddings and features computed once.
class RegionObjective {
 public:
  RegionObjective(const torch::Tensor& content, const RegionStyleTask& task, TextDelta dt, LossWeights weights,
                  EncoderBundle encoders);

  LossBreakdown evaluate(const torch::Tensor& stylized, std::span<const PatchBox> patches,
                         std::optional<PerspectiveAugmentation> augment = std::nullopt) const;

  const LossWeights& weights() const noexcept { return weights_; }

 private:
  torch::Tensor content_;
  torch::Tensor mask_;
  BoundingBox box_;
  TextDelta dt_;
  LossWeights weights_;
  EncoderBundle encoders_;
  torch::Tensor content_embedding_;
  std::map<std::string, torch::Tensor> content_features_;
};

LossBreakdown total_objective(const torch::Tensor& content, const torch::Tensor& stylized,
                              const RegionStyleTask& task, const TextDelta& dt, std::span<const PatchBox> patches,
                              const LossWeights& weights, const EncoderBundle& encoders);

}  // namespace least
