#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "least/cli.hpp"
#include "least/error.hpp"
#include "least/run_config.hpp"
#include "support.hpp"

using namespace least;
using namespace least::testing;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::vector<std::string> kTiny{"--resolution", "32",         "--iterations",         "2",
                                     "--patch-count", "2",         "--patch-size",         "8",
                                     "--network-channels", "4,8,8", "--content-resolution", "32",
                                     "--verbosity",  "quiet"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

std::string fixture(const std::string& name) { return (source_dir() / "fixtures" / name).string(); }

}  // namespace

TEST(FlagNames, MirrorKeys) {
  EXPECT_EQ(flag_for_key("lambda_dir"), "--lambda-dir");
  EXPECT_EQ(flag_for_key("seed"), "--seed");
}

TEST(RunConfigKeys, SetValidateAndErrors) {
  RunConfig cfg;
  cfg.set("iterations", "7");
  cfg.set("lambda_tv", "0.5");
  cfg.set("network_channels", "4, 8,16");
  cfg.set("augment_patches", "yes");
  EXPECT_EQ(cfg.engine.iterations, 7);
  EXPECT_EQ(cfg.engine.weights.lambda_tv, 0.5);
  EXPECT_EQ(cfg.engine.network.channels, (std::vector<int64_t>{4, 8, 16}));
  EXPECT_TRUE(cfg.engine.augment_patches);
  try {
    cfg.set("no_such_key", "1");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
  try {
    cfg.set("iterations", "lots");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
  for (const auto& key : RunConfig::keys()) EXPECT_TRUE(cfg.to_json().contains(key)) << key;
}

TEST(RunConfigFile, ParsesCommentsAndRejectsJunk) {
  auto kv = parse_key_values("# settings\n iterations = 5 \n\nseed=3 # trailing\n");
  EXPECT_EQ(kv.at("iterations"), "5");
  EXPECT_EQ(kv.at("seed"), "3");
  EXPECT_THROW(parse_key_values("iterations 5\n"), Error);
  try {
    read_config_file("/nonexistent/least.conf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
}

TEST(RunConfigLayers, LaterLayersWinForEveryKeySubset) {
  // Values per layer for a handful of keys; each trial assigns every key to a
  // random subset of layers and checks the merged value is the last layer set.
  const std::vector<std::pair<std::string, std::array<std::string, 3>>> keys{
      {"iterations", {"11", "22", "33"}},
      {"seed", {"1", "2", "3"}},
      {"source_text", {"env text", "file text", "flag text"}},
      {"vlm_endpoint", {"http://e:1/v", "http://f:1/v", "http://g:1/v"}},
      {"lambda_content", {"1.5", "2.5", "3.5"}}};
  std::mt19937 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<KeyValues, 3> layers;
    RunConfig expected;
    for (const auto& [key, values] : keys) {
      for (size_t layer = 0; layer < 3; ++layer) {
        if (rng() % 2) {
          layers[layer][key] = values[layer];
          expected.set(key, values[layer]);
        }
      }
    }
    EXPECT_EQ(resolve_run_config(layers[0], layers[1], layers[2]).to_json(), expected.to_json());
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"stylize"}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--manifest", "/nonexistent/manifest.json"}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--manifest", "m.json", "--bogus-flag"}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--manifest", "m.json", "--no-such-key", "3"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST(Cli, BadSettingValueIsPipelineError) {
  ScratchDir dir("cli");
  save_image(random_image(16, 16, 1), dir / "in.png");
  auto r = run({"ground", "--image", (dir / "in.png").string(), "--prompt", "apply cubism style to the building",
                "--fixture", fixture("vlm_transcripts.jsonl"), "--iterations", "0"});
  EXPECT_EQ(r.code, kExitPipeline);
}

TEST(Cli, GroundWithFixture) {
  ScratchDir dir("cli");
  save_image(random_image(64, 64, 1), dir / "in.png");
  auto r = run(with_tiny({"ground", "--image", (dir / "in.png").string(), "--prompt",
                          "apply cubism style to the building", "--fixture", fixture("vlm_transcripts.jsonl"),
                          "--segmenter", "box", "--output-dir", dir.path().string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto report = json::parse(slurp(dir / "ground.json"));
  EXPECT_EQ(report["box"], json::parse("[8,8,24,24]"));
  EXPECT_EQ(report["style"], "cubism");
  EXPECT_EQ(report["mask_pixels"], 256);
  EXPECT_EQ(load_mask(dir / "mask.png"), BinaryMask::from_box(32, 32, {8, 8, 24, 24}));
}

TEST(Cli, UnparseableReplyExitsTwoAndDumpsRawText) {
  ScratchDir dir("cli");
  save_image(random_image(32, 32, 1), dir / "in.png");
  for (const std::string cmd : {"ground", "stylize"}) {
    auto r = run(with_tiny({cmd, "--image", (dir / "in.png").string(), "--prompt", "apply neon style to the sign",
                            "--fixture", fixture("vlm_transcripts.jsonl"), "--segmenter", "box", "--output-dir",
                            dir.path().string()}));
    EXPECT_EQ(r.code, kExitParse) << cmd;
    EXPECT_NE(r.err.find("Still unsure, sorry."), std::string::npos) << cmd;
    EXPECT_EQ(slurp(dir / "vlm_raw.txt"), "Still unsure, sorry.");
  }
  auto sidecar = json::parse(slurp(dir / "result.json"));
  EXPECT_EQ(sidecar["error"]["stage"], "parse");
  EXPECT_TRUE(std::filesystem::exists(dir / "partial.png"));
}

TEST(Cli, StylizeWithoutVlmNeedsMask) {
  ScratchDir dir("cli");
  save_image(random_image(32, 32, 1), dir / "in.png");
  auto r = run(with_tiny({"stylize", "--image", (dir / "in.png").string(), "--prompt", "apply ink style to it",
                          "--output-dir", dir.path().string()}));
  EXPECT_EQ(r.code, kExitUsage);
}

TEST(Cli, MaskOverrideRunsAreByteIdentical) {
  ScratchDir dir("cli");
  save_image(random_image(32, 32, 1), dir / "in.png");
  save_mask(disc_mask(32, 32, 16, 16, 9), dir / "m.png");
  std::string first_result, first_trace;
  for (int k = 0; k < 2; ++k) {
    auto r = run(with_tiny({"stylize", "--image", (dir / "in.png").string(), "--prompt",
                            "apply ink wash style to the disc", "--mask", (dir / "m.png").string(), "--output-dir",
                            dir.path().string()}));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    if (k == 0) {
      first_result = slurp(dir / "result.json");
      first_trace = slurp(dir / "trace.jsonl");
    } else {
      EXPECT_EQ(slurp(dir / "result.json"), first_result);
      EXPECT_EQ(slurp(dir / "trace.jsonl"), first_trace);
    }
  }
  auto sidecar = json::parse(first_result);
  EXPECT_EQ(sidecar["regions"][0]["style_phrase"], "ink wash");
  EXPECT_EQ(sidecar["regions"][0]["region_phrase"], "the disc");
  EXPECT_EQ(sidecar["config"]["iterations"], 2);
  EXPECT_EQ(sidecar["engine_fingerprint"], sidecar["regions"][0]["config_fingerprint"]);
  std::istringstream lines(first_trace);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(json::parse(line)["region"], 0);
    ++n;
  }
  EXPECT_EQ(n, 2);

  auto stylized = load_image(dir / "stylized.png", 32);
  auto content = load_image(dir / "in.png", 32);
  auto bg = disc_mask(32, 32, 16, 16, 9).complement().tensor().to(torch::kBool);
  EXPECT_TRUE(torch::equal(stylized.tensor().masked_select(bg), content.tensor().masked_select(bg)));

  auto two_prompts = run(with_tiny({"stylize", "--image", (dir / "in.png").string(), "--prompt", "apply a style to b",
                                    "--prompt", "apply c style to d", "--mask", (dir / "m.png").string()}));
  EXPECT_EQ(two_prompts.code, kExitUsage);
}

TEST(Cli, SidecarConfigFollowsFileThenFlags) {
  ScratchDir dir("cli");
  save_image(random_image(32, 32, 1), dir / "in.png");
  save_mask(disc_mask(32, 32, 16, 16, 9), dir / "m.png");
  std::ofstream(dir / "run.conf") << "iterations = 3\nseed = 5\nlambda_tv = 0.25\n";
  auto r = run(with_tiny({"stylize", "--image", (dir / "in.png").string(), "--prompt", "apply ink style to the disc",
                          "--mask", (dir / "m.png").string(), "--config", (dir / "run.conf").string(), "--seed", "9",
                          "--output-dir", dir.path().string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto cfg = json::parse(slurp(dir / "result.json"))["config"];
  EXPECT_EQ(cfg["iterations"], 2);  // flag beats file
  EXPECT_EQ(cfg["seed"], 9);
  EXPECT_EQ(cfg["lambda_tv"], 0.25);
  EXPECT_EQ(cfg["lambda_dir"], 500.0);
}

TEST(Cli, EvalWritesSummary) {
  ScratchDir dir("cli");
  save_image(random_image(32, 32, 1), dir / "a.png");
  save_mask(disc_mask(32, 32, 16, 16, 9), dir / "a_mask.png");
  std::ofstream(dir / "manifest.json")
      << R"({"entries": [{"id": "a", "image_path": "a.png", "prompt": "apply ink style to the disc", "mask_path": "a_mask.png"}]})";
  auto r = run(with_tiny({"eval", "--manifest", (dir / "manifest.json").string(), "--no-grids", "--output-dir",
                          (dir / "out").string()}));
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto summary = json::parse(r.out);
  EXPECT_EQ(summary["succeeded"], 1);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "summary.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / "grid_a.png"));
}
