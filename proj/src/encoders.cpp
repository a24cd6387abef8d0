#include "least/encoders.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <torch/script.h>

#include <cctype>
#include <cmath>
#include <fstream>

#include "least/error.hpp"

namespace least {

namespace F = torch::nn::functional;

torch::Tensor PixelNormalization::apply(const torch::Tensor& nchw) const {
  auto opts = torch::TensorOptions().dtype(nchw.scalar_type());
  auto m = torch::tensor({mean[0], mean[1], mean[2]}, opts).view({1, 3, 1, 1});
  auto s = torch::tensor({stddev[0], stddev[1], stddev[2]}, opts).view({1, 3, 1, 1});
  return (nchw - m) / s;
}

PixelNormalization PixelNormalization::clip() {
  return {{0.48145466, 0.4578275, 0.40821073}, {0.26862954, 0.26130258, 0.27577711}};
}

PixelNormalization PixelNormalization::imagenet() {
  return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};
}

void EncoderBundle::validate() const {
  if (!text || !image || !features) throw Error(ErrorKind::Config, "encoder bundle is incomplete");
  if (text->embedding_dim() != image->embedding_dim()) {
    throw Error(ErrorKind::Config, "text and image encoders disagree on embedding size");
  }
}

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

torch::Tensor seeded_normal(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::kFloat32);
}

torch::Tensor he_conv(int64_t out_c, int64_t in_c, int64_t k, uint64_t seed) {
  return seeded_normal({out_c, in_c, k, k}, seed) * std::sqrt(2.0 / static_cast<double>(in_c * k * k));
}

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

}  // namespace

// ---------------------------------------------------------------------------

HashedTextEncoder::HashedTextEncoder(int64_t dim, uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw Error(ErrorKind::Config, "embedding size must be positive");
}

torch::Tensor HashedTextEncoder::feature_vector(const std::string& feature) const {
  return seeded_normal({dim_}, seed_ ^ fnv1a(feature));
}

torch::Tensor HashedTextEncoder::encode(const std::string& text) {
  auto sum = torch::zeros({dim_}, torch::kFloat32);
  for (const auto& word : words_of(text)) {
    sum += feature_vector("w:" + word);
    const std::string padded = "#" + word + "#";
    for (size_t i = 0; i + 3 <= padded.size(); ++i) sum += 0.5 * feature_vector("t:" + padded.substr(i, 3));
  }
  const double norm = sum.norm().item<double>();
  if (norm == 0.0) return feature_vector("empty:");
  return sum / norm;
}

// ---------------------------------------------------------------------------

RandomFeatureImageEncoder::RandomFeatureImageEncoder(int64_t dim, int64_t resolution, uint64_t seed)
    : dim_(dim), resolution_(resolution) {
  if (dim < 1 || resolution < 16) throw Error(ErrorKind::Config, "bad desk image encoder geometry");
  const int64_t widths[] = {3, 32, 64, 128, 256};
  for (int i = 0; i < 4; ++i) conv_weights_.push_back(he_conv(widths[i + 1], widths[i], 3, seed + 17 * (i + 1)));
  projection_ = seeded_normal({widths[4], dim}, seed + 101) / std::sqrt(static_cast<double>(widths[4]));
}

torch::Tensor RandomFeatureImageEncoder::forward(const torch::Tensor& normalized) {
  auto x = normalized;
  for (const auto& w : conv_weights_) {
    x = F::gelu(F::conv2d(x, w.to(x.scalar_type()), F::Conv2dFuncOptions().stride(2).padding(1)));
  }
  auto pooled = x.mean({2, 3});
  auto embedding = pooled.matmul(projection_.to(x.scalar_type()));
  return embedding / embedding.norm(2, {1}, true).clamp_min(1e-12);
}

// ---------------------------------------------------------------------------

RandomVggFeatures::RandomVggFeatures(int64_t resolution, int64_t base_width, uint64_t seed)
    : resolution_(resolution) {
  if (resolution < 32 || base_width < 1) throw Error(ErrorKind::Config, "bad desk feature extractor geometry");
  const int64_t w[] = {base_width, base_width * 2, base_width * 4, base_width * 8, base_width * 8};
  const int convs_per_block[] = {2, 2, 4, 4, 2};
  int64_t in_c = 3;
  uint64_t salt = seed;
  for (int block = 0; block < 5; ++block) {
    if (block > 0) layers_.push_back({"pool", {}, {}});
    for (int i = 0; i < convs_per_block[block]; ++i) {
      Layer layer;
      layer.name = "conv" + std::to_string(block + 1) + "_" + std::to_string(i + 1);
      layer.weight = he_conv(w[block], in_c, 3, ++salt);
      layer.bias = torch::zeros({w[block]});
      layers_.push_back(std::move(layer));
      in_c = w[block];
    }
  }
}

std::map<std::string, torch::Tensor> RandomVggFeatures::forward(const torch::Tensor& normalized) {
  std::map<std::string, torch::Tensor> out;
  auto x = normalized;
  for (const auto& layer : layers_) {
    if (layer.name == "pool") {
      x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
      continue;
    }
    x = F::conv2d(x, layer.weight.to(x.scalar_type()),
                  F::Conv2dFuncOptions().padding(1).bias(layer.bias.to(x.scalar_type())));
    if (layer.name == "conv4_2" || layer.name == "conv5_2") out[layer.name] = x;
    if (layer.name == "conv5_2") break;
    x = torch::relu(x);
  }
  return out;
}

EncoderBundle make_desk_encoders(uint64_t seed, int64_t content_resolution) {
  return EncoderBundle{std::make_shared<HashedTextEncoder>(256, 0x5EED + seed),
                       std::make_shared<RandomFeatureImageEncoder>(256, 64, 0xC11F + seed),
                       std::make_shared<RandomVggFeatures>(content_resolution, 8, 0x7699 + seed)};
}

// ---------------------------------------------------------------------------

EmbeddingTableTextEncoder::EmbeddingTableTextEncoder(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot open embedding table " + path.string());
  try {
    auto j = nlohmann::json::parse(in);
    dim_ = j.at("dim").get<int64_t>();
    for (const auto& [text, values] : j.at("embeddings").items()) {
      auto v = values.get<std::vector<float>>();
      if (static_cast<int64_t>(v.size()) != dim_) {
        throw Error(ErrorKind::Config, "embedding for '" + text + "' has the wrong size");
      }
      table_[text] = torch::tensor(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, "malformed embedding table: " + std::string(e.what()));
  }
}

torch::Tensor EmbeddingTableTextEncoder::encode(const std::string& text) {
  auto it = table_.find(text);
  if (it == table_.end()) throw Error(ErrorKind::Config, "no precomputed text embedding for '" + text + "'");
  return it->second.clone();
}

struct TorchScriptImageEncoder::Impl {
  torch::jit::script::Module module;
};

namespace {
torch::jit::script::Module load_module(const std::filesystem::path& path) {
  try {
    auto module = torch::jit::load(path.string());
    module.eval();
    for (auto p : module.parameters()) p.set_requires_grad(false);
    return module;
  } catch (const c10::Error& e) {
    throw Error(ErrorKind::Config, "cannot load TorchScript module " + path.string() + ": " + e.what_without_backtrace());
  }
}
}  // namespace

TorchScriptImageEncoder::TorchScriptImageEncoder(const std::filesystem::path& path, int64_t resolution,
                                                 PixelNormalization normalization, bool l2_normalize)
    : impl_(std::make_unique<Impl>(Impl{load_module(path)})),
      resolution_(resolution),
      normalization_(normalization),
      l2_normalize_(l2_normalize) {
  torch::NoGradGuard no_grad;
  auto probe = impl_->module.forward({torch::zeros({1, 3, resolution, resolution})}).toTensor();
  if (probe.dim() != 2 || probe.size(0) != 1) throw Error(ErrorKind::Config, "image encoder must return [N, D]");
  dim_ = probe.size(1);
}

TorchScriptImageEncoder::~TorchScriptImageEncoder() = default;

torch::Tensor TorchScriptImageEncoder::forward(const torch::Tensor& normalized) {
  auto out = impl_->module.forward({normalized.to(torch::kFloat32)}).toTensor();
  if (l2_normalize_) out = out / out.norm(2, {1}, true).clamp_min(1e-12);
  return out.to(normalized.scalar_type());
}

struct TorchScriptFeatureExtractor::Impl {
  torch::jit::script::Module module;
};

TorchScriptFeatureExtractor::TorchScriptFeatureExtractor(const std::filesystem::path& path, int64_t resolution,
                                                         PixelNormalization normalization)
    : impl_(std::make_unique<Impl>(Impl{load_module(path)})), resolution_(resolution), normalization_(normalization) {}

TorchScriptFeatureExtractor::~TorchScriptFeatureExtractor() = default;

std::map<std::string, torch::Tensor> TorchScriptFeatureExtractor::forward(const torch::Tensor& normalized) {
  auto result = impl_->module.forward({normalized.to(torch::kFloat32)});
  std::map<std::string, torch::Tensor> out;
  if (result.isGenericDict()) {
    for (const auto& entry : result.toGenericDict()) {
      out[entry.key().toStringRef()] = entry.value().toTensor().to(normalized.scalar_type());
    }
  } else if (result.isTuple()) {
    const auto& elems = result.toTupleRef().elements();
    if (elems.size() != content_layers().size()) {
      throw Error(ErrorKind::Config, "feature extractor tuple must have one entry per content layer");
    }
    for (size_t i = 0; i < elems.size(); ++i) out[content_layers()[i]] = elems[i].toTensor().to(normalized.scalar_type());
  } else {
    throw Error(ErrorKind::Config, "feature extractor must return a dict or a tuple");
  }
  for (const auto& layer : content_layers()) {
    if (!out.count(layer)) throw Error(ErrorKind::Config, "feature extractor lacks layer " + layer);
  }
  return out;
}

}  // namespace least
