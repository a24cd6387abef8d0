#include "least/rle.hpp"

#include "least/error.hpp"

namespace least::rle {

RunLengths encode(const BinaryMask& mask) {
  RunLengths runs{mask.height(), mask.width(), {}};
  auto flat = mask.tensor().contiguous().flatten();
  const uint8_t* p = flat.data_ptr<uint8_t>();
  uint8_t current = 0;
  int64_t length = 0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    if (p[i] != current) {
      runs.counts.push_back(length);
      current = p[i];
      length = 0;
    }
    ++length;
  }
  runs.counts.push_back(length);
  return runs;
}

BinaryMask decode(const RunLengths& runs) {
  if (runs.height < 1 || runs.width < 1) throw_invalid("RLE mask has zero area");
  const int64_t total = int64_t{runs.height} * runs.width;
  auto t = torch::zeros({total}, torch::kUInt8);
  uint8_t* p = t.data_ptr<uint8_t>();
  int64_t pos = 0;
  uint8_t value = 0;
  for (int64_t count : runs.counts) {
    if (count < 0 || pos + count > total) throw_invalid("RLE counts overflow the mask");
    std::fill(p + pos, p + pos + count, value);
    pos += count;
    value ^= 1;
  }
  if (pos != total) throw_invalid("RLE counts do not cover the mask");
  return BinaryMask(t.reshape({runs.height, runs.width}));
}

nlohmann::json to_json(const RunLengths& runs) {
  return {{"size", {runs.height, runs.width}}, {"counts", runs.counts}};
}

RunLengths from_json(const nlohmann::json& j) {
  try {
    const auto& size = j.at("size");
    if (!size.is_array() || size.size() != 2) throw_invalid("RLE size must be [H, W]");
    return RunLengths{size[0].get<int>(), size[1].get<int>(),
                      j.at("counts").get<std::vector<int64_t>>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed RLE mask: ") + e.what());
  }
}

}  // namespace least::rle
