#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

#include "least/imaging.hpp"

namespace least::rle {

/// Uncompressed run-length encoding of a binary mask, row-major. Runs
/// alternate background/foreground and always start with a (possibly empty)
/// background run.
struct RunLengths {
  int height = 0;
  int width = 0;
  std::vector<int64_t> counts;
};

RunLengths encode(const BinaryMask& mask);
BinaryMask decode(const RunLengths& runs);

/// Wire form: {"size": [H, W], "counts": [...]}.
nlohmann::json to_json(const RunLengths& runs);
RunLengths from_json(const nlohmann::json& j);

}  // namespace least::rle
