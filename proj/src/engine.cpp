#include "least/engine.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "least/log.hpp"

namespace least {

using nlohmann::json;

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// EngineConfig
// ---------------------------------------------------------------------------

void EngineConfig::validate() const {
  weights.validate();
  if (iterations < 1) throw Error(ErrorKind::Config, "iterations must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error(ErrorKind::Config, "learning rate must be positive");
  if (patch_count < 1) throw Error(ErrorKind::Config, "patch count must be at least 1");
  if (patch_size < 1) throw Error(ErrorKind::Config, "patch size must be positive");
  if (source_text.empty()) throw Error(ErrorKind::Config, "source text must be non-empty");
  network_spec().validate();
}

StyleNetworkSpec EngineConfig::network_spec() const {
  StyleNetworkSpec spec = network;
  spec.resolution = resolution;
  return spec;
}

json EngineConfig::to_json() const {
  return {{"lambda_dir", weights.lambda_dir},
          {"lambda_patch", weights.lambda_patch},
          {"lambda_content", weights.lambda_content},
          {"lambda_tv", weights.lambda_tv},
          {"patch_count", patch_count},
          {"patch_size", patch_size},
          {"resolution", resolution},
          {"learning_rate", learning_rate},
          {"iterations", iterations},
          {"seed", seed},
          {"source_text", source_text},
          {"augment_patches", augment_patches},
          {"network_stages", network.downsample_stages},
          {"network_channels", network.channels}};
}

EngineConfig EngineConfig::from_json(const json& j) {
  EngineConfig cfg;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("lambda_dir", cfg.weights.lambda_dir);
    get("lambda_patch", cfg.weights.lambda_patch);
    get("lambda_content", cfg.weights.lambda_content);
    get("lambda_tv", cfg.weights.lambda_tv);
    get("patch_count", cfg.patch_count);
    get("patch_size", cfg.patch_size);
    get("resolution", cfg.resolution);
    get("learning_rate", cfg.learning_rate);
    get("iterations", cfg.iterations);
    get("seed", cfg.seed);
    get("source_text", cfg.source_text);
    get("augment_patches", cfg.augment_patches);
    get("network_stages", cfg.network.downsample_stages);
    cfg.network.upsample_stages = cfg.network.downsample_stages;
    get("network_channels", cfg.network.channels);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("bad engine config: ") + e.what());
  }
  return cfg;
}

std::string EngineConfig::fingerprint() const {
  const std::string canonical = to_json().dump();
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return hex64(h);
}

json IterationRecord::to_json() const {
  return {{"iter", iter},
          {"loss_total", loss_total},
          {"loss_dir", loss_dir},
          {"loss_patch", loss_patch},
          {"loss_content", loss_content},
          {"loss_tv", loss_tv}};
}

IterationRecord IterationRecord::from(int iter, const LossBreakdown::Values& v) {
  return {iter, v.total, v.dir, v.patch, v.content, v.tv};
}

DivergenceError::DivergenceError(const std::string& message, std::vector<IterationRecord> trace)
    : Error(ErrorKind::Divergence, message, "optimize"), trace_(std::move(trace)) {}

// ---------------------------------------------------------------------------
// Single region
// ---------------------------------------------------------------------------

StylizedResult optimize_region(const ImageTensor& content, const RegionStyleTask& task, const EngineConfig& cfg,
                               const EncoderBundle& encoders, const IterationCallback& on_iteration) {
  cfg.validate();
  task.validate();
  if (content.height() != cfg.resolution || content.width() != cfg.resolution) {
    throw_invalid("content must be " + std::to_string(cfg.resolution) + "x" + std::to_string(cfg.resolution));
  }
  if (!task.mask.matches(content)) throw_invalid("task mask does not match the content image");

  StylizedResult result;
  result.task = task;
  result.config_fingerprint = cfg.fingerprint();
  result.network_seed = cfg.seed;
  result.patch_seed = splitmix64(cfg.seed);

  auto dtype = content.dtype();
  const torch::Tensor input = content.batched();
  const TextDelta dt = text_delta(task.style_phrase, cfg.source_text, *encoders.text);
  const RegionObjective objective(input, task, dt, cfg.weights, encoders);

  StyleNetwork net = init_style_network(cfg.network_spec(), result.network_seed);
  net->to(dtype);
  torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate)
                                                      .betas(std::make_tuple(0.9, 0.999))
                                                      .weight_decay(0.0));

  std::mt19937_64 patch_rng(result.patch_seed);
  std::mt19937_64 augment_rng(splitmix64(result.patch_seed));
  std::optional<PerspectiveAugmentation> augment;
  if (cfg.augment_patches) augment = PerspectiveAugmentation{&augment_rng, 0.5};

  std::vector<PatchBox> first_patches;
  result.loss_trace.reserve(static_cast<size_t>(cfg.iterations));
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const auto patches = sample_patches(task.box, cfg.patch_count, cfg.patch_size, patch_rng);
    if (iter == 0) first_patches = patches;

    optimizer.zero_grad();
    const auto stylized = net->forward(input);
    const auto losses = objective.evaluate(stylized, patches, augment);
    const auto record = IterationRecord::from(iter, losses.values());
    result.loss_trace.push_back(record);
    if (!std::isfinite(record.loss_total)) {
      throw DivergenceError("non-finite loss at iteration " + std::to_string(iter), result.loss_trace);
    }
    if (on_iteration) on_iteration(record);
    losses.total.backward();
    optimizer.step();
  }

  torch::Tensor output;
  {
    torch::NoGradGuard no_grad;
    output = net->forward(input).squeeze(0).clamp(0.0, 1.0);
  }
  {
    // Same patch set as iteration 0 so the two totals are comparable.
    torch::NoGradGuard no_grad;
    std::mt19937_64 replay(splitmix64(result.patch_seed));
    std::optional<PerspectiveAugmentation> replay_augment;
    if (cfg.augment_patches) replay_augment = PerspectiveAugmentation{&replay, 0.5};
    const auto final_losses = objective.evaluate(output.unsqueeze(0), first_patches, replay_augment);
    result.final_loss = IterationRecord::from(cfg.iterations, final_losses.values());
    if (!std::isfinite(result.final_loss.loss_total)) {
      throw DivergenceError("non-finite loss after the final update", result.loss_trace);
    }
  }
  result.raw_output = ImageTensor(output);
  result.image = composite(result.raw_output, content, task.mask);
  return result;
}

RegionStylizer make_optimizing_stylizer(EngineConfig cfg, EncoderBundle encoders, IterationCallback on_iteration) {
  return [cfg = std::move(cfg), encoders = std::move(encoders), on_iteration = std::move(on_iteration)](
             const ImageTensor& content, const RegionStyleTask& task, size_t region_index) {
    EngineConfig region_cfg = cfg;
    region_cfg.seed = cfg.seed + region_index;
    return optimize_region(content, task, region_cfg, encoders, on_iteration);
  };
}

// ---------------------------------------------------------------------------
// Multiple regions
// ---------------------------------------------------------------------------

RegionError::RegionError(const Error& cause, size_t region_index, ImageTensor partial,
                         std::vector<StylizedResult> completed, std::string raw_vlm_text)
    : Error(cause.kind(), "region " + std::to_string(region_index) + ": " + cause.detail(),
            cause.stage().empty() ? "region" : cause.stage()),
      index_(region_index),
      partial_(std::move(partial)),
      completed_(std::move(completed)),
      raw_vlm_(std::move(raw_vlm_text)) {}

MultiRegionResult stylize_multi(const ImageTensor& content, const std::vector<StyleDirective>& directives,
                                const Grounder& grounder, const RegionStylizer& stylizer) {
  if (directives.empty()) throw_invalid("at least one directive is required");
  MultiRegionResult out;
  out.image = content;
  for (size_t i = 0; i < directives.size(); ++i) {
    try {
      RegionStyleTask task = grounder(out.image, directives[i]);
      log_info("region " + std::to_string(i) + ": style '" + task.style_phrase + "', " +
               std::to_string(task.mask.foreground_count()) + " mask pixels");
      StylizedResult region = stylizer(out.image, task, i);
      // Re-applying the composite keeps the background exact even for
      // stylizers that do not composite themselves.
      out.image = composite(region.image, out.image, task.mask);
      out.regions.push_back(std::move(region));
    } catch (const ParseError& e) {
      throw RegionError(e, i, out.image, out.regions, e.raw_text());
    } catch (const Error& e) {
      throw RegionError(e, i, out.image, out.regions);
    }
  }
  return out;
}

MultiRegionResult stylize_multi(const ImageTensor& content, const std::vector<StyleDirective>& directives,
                                const Grounder& grounder, const EngineConfig& cfg, const EncoderBundle& encoders) {
  return stylize_multi(content, directives, grounder, make_optimizing_stylizer(cfg, encoders));
}

// ---------------------------------------------------------------------------

void write_trace_jsonl(std::ostream& out, const std::vector<IterationRecord>& trace, int region) {
  for (const auto& record : trace) {
    json j = record.to_json();
    if (region >= 0) j["region"] = region;
    out << j.dump() << '\n';
  }
}

json region_sidecar(const StylizedResult& result) {
  const auto& box = result.task.box;
  return {{"region_phrase", result.task.region_phrase},
          {"style_phrase", result.task.style_phrase},
          {"mask_checksum", hex64(mask_checksum(result.task.mask))},
          {"mask_pixels", result.task.mask.foreground_count()},
          {"box", {box.x0, box.y0, box.x1, box.y1}},
          {"config_fingerprint", result.config_fingerprint},
          {"network_seed", result.network_seed},
          {"patch_seed", result.patch_seed},
          {"initial_loss", result.loss_trace.empty() ? json() : result.loss_trace.front().to_json()},
          {"final_loss", result.final_loss.to_json()}};
}

}  // namespace least
