#include <gtest/gtest.h>

#include <sstream>

#include "least/engine.hpp"
#include "least/error.hpp"
#include "support.hpp"

using namespace least;
using namespace least::testing;
using nlohmann::json;

namespace {

const std::vector<std::string> kVocab{"a Photo", "ink", "neon", "chalk"};

EngineConfig tiny_config(int iterations = 3) {
  EngineConfig cfg;
  cfg.resolution = 32;
  cfg.patch_count = 4;
  cfg.patch_size = 8;
  cfg.iterations = iterations;
  cfg.network.channels = {4, 8, 8};
  return cfg;
}

RegionStyleTask task_for(const BinaryMask& mask, const std::string& style = "ink") {
  return {"thing", style, mask, tight_bbox(mask)};
}

// Returns NaN embeddings, which poisons every directional term.
class NanEncoder final : public ImageEncoder {
 public:
  int64_t embedding_dim() const override { return 4; }
  int64_t input_resolution() const override { return 8; }
  PixelNormalization normalization() const override { return PixelNormalization::identity(); }
  torch::Tensor forward(const torch::Tensor& x) override {
    return x.flatten(1).narrow(1, 0, 4) * std::numeric_limits<double>::quiet_NaN();
  }
};

bool background_identical(const ImageTensor& out, const ImageTensor& in, const BinaryMask& mask) {
  auto bg = mask.complement().tensor().to(torch::kBool);
  return torch::equal(out.tensor().masked_select(bg), in.tensor().masked_select(bg));
}

// Region stylizer that paints a constant colour everywhere (no composite of its own).
RegionStylizer paint(double value) {
  return [value](const ImageTensor& content, const RegionStyleTask& task, size_t) {
    StylizedResult r;
    r.image = ImageTensor::constant(content.height(), content.width(), value, content.dtype());
    r.raw_output = r.image;
    r.task = task;
    return r;
  };
}

Grounder masks_by_text(std::map<std::string, BinaryMask> table) {
  return [table = std::move(table)](const ImageTensor&, const StyleDirective& d) {
    auto it = table.find(d.raw_text());
    if (it == table.end()) throw Error(ErrorKind::EmptyRegion, "no region for " + d.raw_text(), "segment");
    return task_for(it->second);
  };
}

}  // namespace

TEST(EngineConfig, DefaultsAndValidation) {
  EngineConfig cfg;
  EXPECT_EQ(cfg.weights, (LossWeights{500, 1000, 150, 2e-3}));
  EXPECT_EQ(cfg.patch_count, 64);
  EXPECT_EQ(cfg.patch_size, 100);
  EXPECT_EQ(cfg.resolution, 512);
  EXPECT_DOUBLE_EQ(cfg.learning_rate, 5e-4);
  EXPECT_EQ(cfg.iterations, 200);
  EXPECT_EQ(cfg.source_text, "a Photo");
  EXPECT_NO_THROW(cfg.validate());
  for (auto mutate : std::vector<std::function<void(EngineConfig&)>>{
           [](EngineConfig& c) { c.iterations = 0; }, [](EngineConfig& c) { c.learning_rate = 0; },
           [](EngineConfig& c) { c.patch_count = 0; }, [](EngineConfig& c) { c.resolution = 100; },
           [](EngineConfig& c) { c.weights.lambda_tv = -1; }, [](EngineConfig& c) { c.source_text = ""; }}) {
    EngineConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), Error);
  }
}

TEST(EngineConfig, JsonRoundTripAndFingerprint) {
  EngineConfig cfg = tiny_config();
  cfg.seed = 42;
  cfg.augment_patches = true;
  auto back = EngineConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.fingerprint(), cfg.fingerprint());
  EXPECT_EQ(cfg.fingerprint().size(), 16u);
  back.learning_rate = 1e-3;
  EXPECT_NE(back.fingerprint(), cfg.fingerprint());
  EXPECT_THROW(EngineConfig::from_json(json{{"iterations", "many"}}), Error);
}

TEST(OptimizeRegion, BackgroundIsExactAndTraceIsComplete) {
  auto content = random_image(32, 32, 1);
  auto mask = disc_mask(32, 32, 16, 14, 9);
  std::vector<IterationRecord> seen;
  auto r = optimize_region(content, task_for(mask), tiny_config(4), stub_bundle(kVocab),
                           [&](const IterationRecord& rec) { seen.push_back(rec); });
  EXPECT_TRUE(background_identical(r.image, content, mask));
  ASSERT_EQ(r.loss_trace.size(), 4u);
  ASSERT_EQ(seen.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.loss_trace[static_cast<size_t>(i)].iter, i);
  EXPECT_EQ(r.final_loss.iter, 4);
  EXPECT_EQ(r.config_fingerprint, tiny_config(4).fingerprint());
  EXPECT_FALSE(r.image.bitwise_equal(content));
}

TEST(OptimizeRegion, ZeroWeightsStillPreserveBackground) {
  auto cfg = tiny_config(1);
  cfg.weights = {0, 0, 0, 0};
  auto content = random_image(32, 32, 2);
  auto mask = BinaryMask::from_box(32, 32, {4, 6, 20, 30});
  auto r = optimize_region(content, task_for(mask), cfg, stub_bundle(kVocab));
  EXPECT_TRUE(background_identical(r.image, content, mask));
  EXPECT_EQ(r.loss_trace.front().loss_total, 0.0);
}

TEST(OptimizeRegion, DeterministicAcrossRuns) {
  auto content = random_image(32, 32, 3);
  auto mask = disc_mask(32, 32, 12, 18, 8);
  auto a = optimize_region(content, task_for(mask), tiny_config(5), stub_bundle(kVocab));
  auto b = optimize_region(content, task_for(mask), tiny_config(5), stub_bundle(kVocab));
  ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
  for (size_t i = 0; i < a.loss_trace.size(); ++i) {
    EXPECT_EQ(a.loss_trace[i].to_json(), b.loss_trace[i].to_json());
  }
  EXPECT_TRUE(a.image.bitwise_equal(b.image));
  auto other = tiny_config(5);
  other.seed = 1;
  auto c = optimize_region(content, task_for(mask), other, stub_bundle(kVocab));
  EXPECT_NE(a.loss_trace.back().loss_total, c.loss_trace.back().loss_total);
}

TEST(OptimizeRegion, LossDescendsOnSmallProblem) {
  auto cfg = tiny_config(30);
  cfg.learning_rate = 1e-2;
  auto content = random_image(32, 32, 4);
  auto mask = disc_mask(32, 32, 16, 16, 11);
  auto r = optimize_region(content, task_for(mask), cfg, stub_bundle(kVocab));
  EXPECT_LT(r.final_loss.loss_total, r.loss_trace.front().loss_total);
}

TEST(OptimizeRegion, NonFiniteLossIsDivergence) {
  auto bundle = stub_bundle(kVocab);
  bundle.image = std::make_shared<NanEncoder>();
  auto content = random_image(32, 32, 5);
  try {
    optimize_region(content, task_for(disc_mask(32, 32, 16, 16, 8)), tiny_config(3), bundle);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
    EXPECT_EQ(e.stage(), "optimize");
    EXPECT_EQ(e.trace().size(), 1u);
  }
}

TEST(OptimizeRegion, RejectsMismatchedInputs) {
  auto content = random_image(16, 16, 1);
  EXPECT_THROW(optimize_region(content, task_for(disc_mask(16, 16, 8, 8, 4)), tiny_config(), stub_bundle(kVocab)),
               Error);
  auto content32 = random_image(32, 32, 1);
  EXPECT_THROW(
      optimize_region(content32, task_for(disc_mask(32, 32, 8, 8, 4), "a Photo"), tiny_config(), stub_bundle(kVocab)),
      Error);
}

TEST(OptimizingStylizer, SeedsFollowRegionIndex) {
  auto cfg = tiny_config(1);
  cfg.seed = 10;
  auto stylizer = make_optimizing_stylizer(cfg, stub_bundle(kVocab));
  auto content = random_image(32, 32, 6);
  auto task = task_for(disc_mask(32, 32, 16, 16, 8));
  EXPECT_EQ(stylizer(content, task, 0).network_seed, 10u);
  EXPECT_EQ(stylizer(content, task, 2).network_seed, 12u);
}

TEST(StylizeMulti, DisjointRegionsConserveBackground) {
  auto content = random_image(24, 24, 7);
  auto left = BinaryMask::from_box(24, 24, {1, 1, 10, 20});
  auto right = disc_mask(24, 24, 18, 12, 4);
  std::vector<StyleDirective> ds{StyleDirective("L"), StyleDirective("R")};
  std::vector<double> colours{0.25, 0.75};
  RegionStylizer stylizer = [&](const ImageTensor& c, const RegionStyleTask& t, size_t i) {
    return paint(colours[i])(c, t, i);
  };
  auto out = stylize_multi(content, ds, masks_by_text({{"L", left}, {"R", right}}), stylizer);
  ASSERT_EQ(out.regions.size(), 2u);
  auto uni = BinaryMask((left.tensor() | right.tensor()));
  EXPECT_TRUE(background_identical(out.image, content, uni));
  EXPECT_EQ(out.image.at(0, 5, 5), 0.25f);
  EXPECT_EQ(out.image.at(2, 12, 18), 0.75f);
}

TEST(StylizeMulti, OverlapTakesSecondRegion) {
  auto content = random_image(24, 24, 8);
  auto a = BinaryMask::from_box(24, 24, {2, 2, 14, 14});
  auto b = BinaryMask::from_box(24, 24, {8, 8, 20, 20});
  std::vector<StyleDirective> ds{StyleDirective("A"), StyleDirective("B")};
  std::vector<double> colours{0.1, 0.9};
  RegionStylizer stylizer = [&](const ImageTensor& c, const RegionStyleTask& t, size_t i) {
    return paint(colours[i])(c, t, i);
  };
  auto out = stylize_multi(content, ds, masks_by_text({{"A", a}, {"B", b}}), stylizer);
  EXPECT_FLOAT_EQ(out.image.at(0, 10, 10), 0.9f);
  EXPECT_FLOAT_EQ(out.image.at(1, 3, 3), 0.1f);
  EXPECT_FLOAT_EQ(out.image.at(2, 19, 19), 0.9f);
  EXPECT_TRUE(background_identical(out.image, content, BinaryMask(a.tensor() | b.tensor())));
}

TEST(StylizeMulti, FailureKeepsPartialResult) {
  auto content = random_image(24, 24, 9);
  auto a = BinaryMask::from_box(24, 24, {2, 2, 10, 10});
  std::vector<StyleDirective> ds{StyleDirective("A"), StyleDirective("missing")};
  try {
    stylize_multi(content, ds, masks_by_text({{"A", a}}), paint(0.5));
    FAIL();
  } catch (const RegionError& e) {
    EXPECT_EQ(e.region_index(), 1u);
    EXPECT_EQ(e.kind(), ErrorKind::EmptyRegion);
    EXPECT_EQ(e.stage(), "segment");
    ASSERT_EQ(e.completed().size(), 1u);
    EXPECT_FLOAT_EQ(e.partial().at(0, 4, 4), 0.5f);
    EXPECT_TRUE(background_identical(e.partial(), content, a));
  }
  Grounder parse_fails = [](const ImageTensor&, const StyleDirective&) -> RegionStyleTask {
    throw ParseError("no box", "raw reply");
  };
  try {
    stylize_multi(content, {StyleDirective("x")}, parse_fails, paint(0.5));
    FAIL();
  } catch (const RegionError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
    EXPECT_EQ(e.raw_vlm_text(), "raw reply");
    EXPECT_TRUE(e.partial().bitwise_equal(content));
  }
  EXPECT_THROW(stylize_multi(content, {}, masks_by_text({}), paint(0.5)), Error);
}

TEST(Artifacts, TraceJsonlAndSidecar) {
  std::vector<IterationRecord> trace{{0, 3.0, 1.0, 1.0, 0.5, 0.5}, {1, 2.0, 0.5, 1.0, 0.25, 0.25}};
  std::ostringstream plain, tagged;
  write_trace_jsonl(plain, trace);
  write_trace_jsonl(tagged, trace, 2);
  std::istringstream lines(tagged.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    auto j = json::parse(line);
    EXPECT_EQ(j["iter"], n);
    EXPECT_EQ(j["region"], 2);
    for (const char* key : {"loss_total", "loss_dir", "loss_patch", "loss_content", "loss_tv"}) {
      EXPECT_TRUE(j.contains(key));
    }
    ++n;
  }
  EXPECT_EQ(n, 2);
  EXPECT_EQ(plain.str().find("region"), std::string::npos);

  StylizedResult r;
  r.task = task_for(BinaryMask::from_box(8, 8, {1, 2, 5, 6}));
  r.loss_trace = trace;
  r.final_loss = {2, 1.0, 0, 0, 0, 0};
  auto s = region_sidecar(r);
  EXPECT_EQ(s["box"], json::parse("[1,2,5,6]"));
  EXPECT_EQ(s["mask_pixels"], 16);
  EXPECT_EQ(s["initial_loss"]["loss_total"], 3.0);
  EXPECT_EQ(s["final_loss"]["iter"], 2);
}
