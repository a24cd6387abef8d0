#include "least/error.hpp"

namespace least {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Decode: return "decode";
    case ErrorKind::Write: return "write";
    case ErrorKind::EmptyRegion: return "empty-region";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Backend: return "backend";
    case ErrorKind::DegenerateStyle: return "degenerate-style";
    case ErrorKind::Config: return "config";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

namespace {
std::string format(ErrorKind kind, const std::string& message, const std::string& stage) {
  std::string out(to_string(kind));
  if (!stage.empty()) out += " [" + stage + "]";
  out += ": " + message;
  return out;
}
}  // namespace

Error::Error(ErrorKind kind, const std::string& message, std::string stage)
    : std::runtime_error(format(kind, message, stage)),
      kind_(kind),
      stage_(std::move(stage)),
      detail_(message) {}

Error Error::with_stage(std::string stage) const { return Error(kind_, detail_, std::move(stage)); }

ParseError::ParseError(const std::string& message, std::string raw_text)
    : Error(ErrorKind::Parse, message, "parse"), raw_(std::move(raw_text)) {}

void throw_invalid(const std::string& message) { throw Error(ErrorKind::InvalidInput, message); }

}  // namespace least

