#include "least/style_network.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "least/error.hpp"

namespace least {

namespace F = torch::nn::functional;

void StyleNetworkSpec::validate() const {
  if (downsample_stages < 1 || upsample_stages != downsample_stages) {
    throw Error(ErrorKind::Config, "style network needs matching down/up stage counts");
  }
  if (channels.empty()) throw Error(ErrorKind::Config, "style network needs channel widths");
  for (auto c : channels) {
    if (c < 1) throw Error(ErrorKind::Config, "channel widths must be positive");
  }
  const int factor = 1 << downsample_stages;
  if (resolution < factor || resolution % factor != 0) {
    throw Error(ErrorKind::Config, "resolution " + std::to_string(resolution) + " is not divisible by " +
                                       std::to_string(factor));
  }
}

namespace {

// Width after down stage i: channels are listed per stage and the last one
// repeats for deeper stages.
int64_t width_at(const std::vector<int64_t>& channels, int level) {
  return channels[static_cast<size_t>(std::min<int>(level, static_cast<int>(channels.size()) - 1))];
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

// Level 0 is the full-resolution stem (channels[0]); down stage i produces
// level i + 1. Up stage i runs a conv at level i + 1, upsamples to level i
// and adds that level's activation.
StyleNetworkImpl::StyleNetworkImpl(const StyleNetworkSpec& spec) : spec_(spec) {
  spec_.validate();
  const int depth = spec_.downsample_stages;
  auto make_stage = [this](const std::string& name, int64_t in, int64_t out, int64_t stride) {
    Stage s;
    s.conv = register_module(name + "_conv", conv3x3(in, out, stride));
    s.norm = register_module(name + "_norm", torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out).affine(true)));
    return s;
  };
  stem_ = make_stage("stem", 3, width_at(spec_.channels, 0), 1);
  for (int i = 0; i < depth; ++i) {
    down_.push_back(make_stage("down" + std::to_string(i + 1), width_at(spec_.channels, i),
                               width_at(spec_.channels, i + 1), 2));
  }
  for (int i = depth - 1; i >= 0; --i) {
    up_.push_back(make_stage("up" + std::to_string(i + 1), width_at(spec_.channels, i + 1),
                             width_at(spec_.channels, i), 1));
  }
  head_ = register_module("head", conv3x3(width_at(spec_.channels, 0), 3, 1));
}

torch::Tensor StyleNetworkImpl::run(Stage& stage, const torch::Tensor& x) {
  return F::leaky_relu(stage.norm(stage.conv(x)), F::LeakyReLUFuncOptions().negative_slope(0.2));
}

torch::Tensor StyleNetworkImpl::forward(const torch::Tensor& x) {
  const int factor = 1 << spec_.downsample_stages;
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw_invalid("style network input must be [N, 3, H, W] with H, W divisible by " + std::to_string(factor));
  }
  std::vector<torch::Tensor> levels{run(stem_, x)};
  for (auto& stage : down_) levels.push_back(run(stage, levels.back()));

  auto h = levels.back();
  for (size_t i = 0; i < up_.size(); ++i) {
    const auto& skip = levels[levels.size() - 2 - i];
    h = run(up_[i], h);
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false)) +
        skip;
  }
  // Residual in logit space: the head predicts a correction to the input, so
  // the untrained network starts near the content image.
  const auto eps = 1e-3;
  auto input_logit = torch::logit(x.clamp(eps, 1.0 - eps));
  return torch::sigmoid(input_logit + head_(h));
}

StyleNetwork init_style_network(const StyleNetworkSpec& spec, uint64_t seed) {
  StyleNetwork net(spec);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& item : net->named_parameters()) {
    auto& p = item.value();
    const auto& name = item.key();
    if (name.ends_with("norm.weight")) {
      p.fill_(1.0);
    } else if (name.ends_with("norm.bias") || name.ends_with(".bias")) {
      p.zero_();
    } else {
      // He-uniform on fan-in; the head starts small so f(x) is close to x.
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      double bound = std::sqrt(6.0 / fan_in);
      if (name.starts_with("head")) bound *= 0.1;
      p.copy_(torch::rand(p.sizes(), gen, torch::kFloat32) * (2.0 * bound) - bound);
    }
  }
  return net;
}

}  // namespace least
