#pragma once

// Stub encoders, reference resamplers and scratch helpers shared by tests.

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "least/encoders.hpp"
#include "least/imaging.hpp"

namespace least::testing {

/// Fixed random linear map from flattened pixels to D dims. No normalization,
/// no nonlinearity.
class LinearImageEncoder final : public ImageEncoder {
 public:
  LinearImageEncoder(int64_t dim, int64_t resolution, uint64_t seed = 7) : dim_(dim), resolution_(resolution) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    weight_ = torch::randn({dim, 3 * resolution * resolution}, gen, torch::kFloat64) /
              std::sqrt(static_cast<double>(3 * resolution * resolution));
  }
  int64_t embedding_dim() const override { return dim_; }
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return PixelNormalization::identity(); }
  torch::Tensor forward(const torch::Tensor& x) override {
    return x.flatten(1).matmul(weight_.to(x.scalar_type()).t());
  }

 private:
  int64_t dim_;
  int64_t resolution_;
  torch::Tensor weight_;
};

/// Embedding = per-channel mean of the input (D = 3), which makes image
/// deltas easy to steer: adding v to every pixel moves the embedding by v.
class ChannelMeanEncoder final : public ImageEncoder {
 public:
  explicit ChannelMeanEncoder(int64_t resolution = 8) : resolution_(resolution) {}
  int64_t embedding_dim() const override { return 3; }
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return PixelNormalization::identity(); }
  torch::Tensor forward(const torch::Tensor& x) override { return x.mean({2, 3}); }

 private:
  int64_t resolution_;
};

/// Maps each known string to a fixed vector; unknown strings are an error.
class TableTextEncoder final : public TextEncoder {
 public:
  explicit TableTextEncoder(std::map<std::string, std::vector<double>> table) : table_(std::move(table)) {}
  int64_t embedding_dim() const override { return static_cast<int64_t>(table_.begin()->second.size()); }
  torch::Tensor encode(const std::string& text) override {
    return torch::tensor(table_.at(text), torch::kFloat64).to(torch::kFloat32);
  }

 private:
  std::map<std::string, std::vector<double>> table_;
};

/// One-hot over a vocabulary.
inline std::shared_ptr<TableTextEncoder> one_hot_text(const std::vector<std::string>& vocabulary) {
  std::map<std::string, std::vector<double>> table;
  for (size_t i = 0; i < vocabulary.size(); ++i) {
    std::vector<double> v(vocabulary.size(), 0.0);
    v[i] = 1.0;
    table[vocabulary[i]] = v;
  }
  return std::make_shared<TableTextEncoder>(table);
}

/// Returns the (resized, unnormalized) crop itself for both content layers.
class RawCropFeatures final : public FeatureExtractor {
 public:
  explicit RawCropFeatures(int64_t resolution) : resolution_(resolution) {}
  int64_t input_resolution() const override { return resolution_; }
  PixelNormalization normalization() const override { return PixelNormalization::identity(); }
  std::map<std::string, torch::Tensor> forward(const torch::Tensor& x) override {
    return {{"conv4_2", x}, {"conv5_2", x}};
  }

 private:
  int64_t resolution_;
};

/// Bundle of one-hot text (vocabulary order), a linear image encoder of the
/// same width and raw-crop features.
inline EncoderBundle stub_bundle(const std::vector<std::string>& vocabulary, int64_t resolution = 8,
                                 uint64_t seed = 7) {
  EncoderBundle b;
  b.text = one_hot_text(vocabulary);
  b.image = std::make_shared<LinearImageEncoder>(static_cast<int64_t>(vocabulary.size()), resolution, seed);
  b.features = std::make_shared<RawCropFeatures>(resolution);
  return b;
}

// ---------------------------------------------------------------------------

/// Straight-loop bilinear resampler with half-pixel centers and edge clamping;
/// [C, H, W] double in, [C, out_h, out_w] double out.
inline torch::Tensor reference_bilinear(const torch::Tensor& chw, int64_t out_h, int64_t out_w) {
  auto src = chw.to(torch::kFloat64).contiguous();
  const int64_t c = src.size(0), h = src.size(1), w = src.size(2);
  auto out = torch::zeros({c, out_h, out_w}, torch::kFloat64);
  auto s = src.accessor<double, 3>();
  auto o = out.accessor<double, 3>();
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int64_t y = 0; y < out_h; ++y) {
    double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    int64_t y0 = std::min<int64_t>(static_cast<int64_t>(std::floor(fy)), h - 1);
    int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
    double ty = fy - y0;
    for (int64_t x = 0; x < out_w; ++x) {
      double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      int64_t x0 = std::min<int64_t>(static_cast<int64_t>(std::floor(fx)), w - 1);
      int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
      double tx = fx - x0;
      for (int64_t k = 0; k < c; ++k) {
        o[k][y][x] = (1 - ty) * ((1 - tx) * s[k][y0][x0] + tx * s[k][y0][x1]) +
                     ty * ((1 - tx) * s[k][y1][x0] + tx * s[k][y1][x1]);
      }
    }
  }
  return out;
}

/// Relative error between an analytic gradient and central finite differences
/// of `f` at `x` (double precision).
inline double gradient_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                      const torch::Tensor& x0, double step = 1e-4) {
  auto x = x0.detach().clone().to(torch::kFloat64).set_requires_grad(true);
  auto analytic = torch::autograd::grad({f(x)}, {x})[0].detach();
  auto numeric = torch::zeros_like(analytic);
  auto flat = x.detach().clone();
  auto nf = numeric.view(-1);
  auto xf = flat.view(-1);
  torch::NoGradGuard no_grad;
  for (int64_t i = 0; i < xf.numel(); ++i) {
    const double v = xf[i].item<double>();
    xf[i] = v + step;
    const double up = f(flat).item<double>();
    xf[i] = v - step;
    const double down = f(flat).item<double>();
    xf[i] = v;
    nf[i] = (up - down) / (2 * step);
  }
  const double scale = std::max(analytic.norm().item<double>(), numeric.norm().item<double>());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).norm().item<double>() / scale;
}

inline ImageTensor random_image(int h, int w, uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return ImageTensor(torch::rand({3, h, w}, gen, dtype));
}

inline BinaryMask random_mask(int h, int w, uint64_t seed, double p = 0.5) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto m = (torch::rand({h, w}, gen, torch::kFloat64) < p).to(torch::kUInt8);
  m[h / 2][w / 2] = 1;
  return BinaryMask(m);
}

inline BinaryMask disc_mask(int h, int w, double cx, double cy, double r) {
  auto m = torch::zeros({h, w}, torch::kUInt8);
  auto a = m.accessor<uint8_t, 2>();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      a[y][x] = dx * dx + dy * dy <= r * r ? 1 : 0;
    }
  }
  return BinaryMask(m);
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("least_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path source_dir() { return LEAST_TEST_SOURCE_DIR; }

}  // namespace least::testing
