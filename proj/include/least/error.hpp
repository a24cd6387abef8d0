#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace least {

enum class ErrorKind {
  InvalidInput,
  Decode,
  Write,
  EmptyRegion,
  Parse,
  Backend,
  DegenerateStyle,
  Config,
  Divergence,
  Usage,
};

std::string_view to_string(ErrorKind kind);

/// Every failure the pipeline raises. `stage()` names the pipeline step that
/// produced it ("vlm", "parse", "segment", "optimize", ...) when known.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string stage = {});

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& stage() const noexcept { return stage_; }
  const std::string& detail() const noexcept { return detail_; }

  /// Copy of this error re-attributed to `stage`, keeping the original message.
  Error with_stage(std::string stage) const;

 private:
  ErrorKind kind_;
  std::string stage_;
  std::string detail_;
};

/// Parse failure that carries the raw text it could not parse.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::string raw_text);
  const std::string& raw_text() const noexcept { return raw_; }

 private:
  std::string raw_;
};

[[noreturn]] void throw_invalid(const std::string& message);

}  // namespace least
