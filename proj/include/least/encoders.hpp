#pragma once

// Encoder contracts used by the losses: a text encoder and an image encoder
// sharing one embedding space, plus a perceptual feature extractor that
// exposes "conv4_2" and "conv5_2" activations.
//
// Each image-side encoder declares its input resolution and pixel
// normalization. Callers resize and normalize [0, 1] pixels before calling
// forward(); see embed_images() and extract_features() in losses.hpp.

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace least {

struct PixelNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  /// (x - mean) / std per channel on an NCHW tensor.
  torch::Tensor apply(const torch::Tensor& nchw) const;

  static PixelNormalization identity() { return {}; }
  static PixelNormalization clip();
  static PixelNormalization imagenet();
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int64_t embedding_dim() const = 0;
  /// [D] embedding of the text.
  virtual torch::Tensor encode(const std::string& text) = 0;
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual int64_t embedding_dim() const = 0;
  virtual int64_t input_resolution() const = 0;
  virtual PixelNormalization normalization() const = 0;
  /// [N, 3, R, R] normalized pixels -> [N, D], differentiable w.r.t. the input.
  virtual torch::Tensor forward(const torch::Tensor& normalized) = 0;
};

inline const std::vector<std::string>& content_layers() {
  static const std::vector<std::string> layers{"conv4_2", "conv5_2"};
  return layers;
}

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int64_t input_resolution() const = 0;
  virtual PixelNormalization normalization() const = 0;
  /// Named activations; must contain every entry of content_layers().
  virtual std::map<std::string, torch::Tensor> forward(const torch::Tensor& normalized) = 0;
};

struct EncoderBundle {
  std::shared_ptr<TextEncoder> text;
  std::shared_ptr<ImageEncoder> image;
  std::shared_ptr<FeatureExtractor> features;

  /// Throws config errors on missing members or mismatched embedding sizes.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Desk encoders: fixed, seeded random-feature networks. They carry no learned
// semantics, need no downloads, and are fully deterministic, which makes them
// suitable for offline runs and tests. Load exported checkpoints through the
// TorchScript classes below for real CLIP/VGG behaviour.
// ---------------------------------------------------------------------------

/// Bag of hashed word and character-trigram features projected to D dims,
/// L2-normalized.
class HashedTextEncoder final : public TextEncoder {
 public:
  explicit HashedTextEncoder(int64_t dim = 256, uint64_t seed = 0x5EED);
  int64_t embedding_dim() const override { return dim_; }
  torch::Tensor encode(const std::string& text) override;

 private:
  torch::Tensor feature_vector(const std::string& feature) const;
  int64_t dim_;
  uint64_t seed_;
};

/// Four strided 3x3 convolutions with GELU, mean pooling and a linear
/// projection; L2-normalized output.
class RandomFeatureImageEncoder final : public ImageEncoder {
 public:
  explicit RandomFeatureImageEncoder(int64_t dim = 256, int64_t resolution = 64,
                                     uint64_t seed = 0xC11F);
  int64_t embedding_dim() const override { return dim_; }
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return PixelNormalization::clip(); }
  torch::Tensor forward(const torch::Tensor& normalized) override;

 private:
  int64_t dim_;
  int64_t resolution_;
  std::vector<torch::Tensor> conv_weights_;
  torch::Tensor projection_;
};

/// VGG-19 layer layout up to conv5_2 with narrowed widths and seeded He
/// initialization. Activations are taken before the ReLU, as in the usual
/// conv4_2 / conv5_2 content-loss setup.
class RandomVggFeatures final : public FeatureExtractor {
 public:
  explicit RandomVggFeatures(int64_t resolution = 224, int64_t base_width = 8,
                             uint64_t seed = 0x7699);
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return PixelNormalization::imagenet(); }
  std::map<std::string, torch::Tensor> forward(const torch::Tensor& normalized) override;

 private:
  struct Layer {
    std::string name;  // "conv3_2", or "pool" for max pooling
    torch::Tensor weight;
    torch::Tensor bias;
  };
  int64_t resolution_;
  std::vector<Layer> layers_;
};

EncoderBundle make_desk_encoders(uint64_t seed = 0, int64_t content_resolution = 224);

// ---------------------------------------------------------------------------
// Exported checkpoints.
// ---------------------------------------------------------------------------

/// Text embeddings precomputed offline, stored as a JSON object
/// {"dim": D, "embeddings": {"text": [D reals], ...}}.
class EmbeddingTableTextEncoder final : public TextEncoder {
 public:
  explicit EmbeddingTableTextEncoder(const std::filesystem::path& path);
  int64_t embedding_dim() const override { return dim_; }
  torch::Tensor encode(const std::string& text) override;

 private:
  int64_t dim_ = 0;
  std::map<std::string, torch::Tensor> table_;
};

/// TorchScript image encoder: forward(x: [N,3,R,R]) -> [N,D].
class TorchScriptImageEncoder final : public ImageEncoder {
 public:
  TorchScriptImageEncoder(const std::filesystem::path& path, int64_t resolution,
                          PixelNormalization normalization, bool l2_normalize = true);
  ~TorchScriptImageEncoder() override;
  int64_t embedding_dim() const override { return dim_; }
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return normalization_; }
  torch::Tensor forward(const torch::Tensor& normalized) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int64_t dim_ = 0;
  int64_t resolution_;
  PixelNormalization normalization_;
  bool l2_normalize_;
};

/// TorchScript feature extractor returning either Dict[str, Tensor] or a
/// (conv4_2, conv5_2) tuple.
class TorchScriptFeatureExtractor final : public FeatureExtractor {
 public:
  TorchScriptFeatureExtractor(const std::filesystem::path& path, int64_t resolution,
                              PixelNormalization normalization);
  ~TorchScriptFeatureExtractor() override;
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return normalization_; }
  std::map<std::string, torch::Tensor> forward(const torch::Tensor& normalized) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int64_t resolution_;
  PixelNormalization normalization_;
};

}  // namespace least
