#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace least {

/// Shape of the per-image style network: a small U-Net with one 3x3
/// convolution per stage, instance normalization, additive skips and a
/// sigmoid output.
struct StyleNetworkSpec {
  int downsample_stages = 3;
  int upsample_stages = 3;
  std::vector<int64_t> channels{16, 32, 64};
  int resolution = 512;

  void validate() const;
};

class StyleNetworkImpl : public torch::nn::Module {
 public:
  explicit StyleNetworkImpl(const StyleNetworkSpec& spec);

  /// [N, 3, H, W] in [0, 1] -> same shape in [0, 1]. H and W must be
  /// divisible by 2^downsample_stages.
  torch::Tensor forward(const torch::Tensor& x);

  const StyleNetworkSpec& spec() const noexcept { return spec_; }

 private:
  struct Stage {
    torch::nn::Conv2d conv{nullptr};
    torch::nn::InstanceNorm2d norm{nullptr};
  };
  torch::Tensor run(Stage& stage, const torch::Tensor& x);

  StyleNetworkSpec spec_;
  Stage stem_;
  std::vector<Stage> down_;
  std::vector<Stage> up_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(StyleNetwork);

/// Fresh network whose weights depend only on `seed`.
StyleNetwork init_style_network(const StyleNetworkSpec& spec, uint64_t seed);

}  // namespace least
