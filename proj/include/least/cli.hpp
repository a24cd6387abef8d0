#pragma once

// The `least` command: stylize, ground and eval subcommands.
//
// Exit codes: 0 success, 1 pipeline error, 2 grounding parse error, 64 usage error.

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "least/encoders.hpp"
#include "least/grounding.hpp"
#include "least/run_config.hpp"

namespace least {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPipeline = 1;
inline constexpr int kExitParse = 2;
inline constexpr int kExitUsage = 64;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// "--lambda-dir" for "lambda_dir".
std::string flag_for_key(const std::string& key);

// Backend construction from an effective configuration.
std::shared_ptr<VlmBackend> make_vlm_backend(const RunConfig& cfg);  // null when none configured
std::shared_ptr<SegmentationBackend> make_segmentation_backend(const RunConfig& cfg);
EncoderBundle make_encoders(const RunConfig& cfg);

}  // namespace least
