#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace triad {

enum class ErrorKind {
  format,
  unsupported_dtype,
  corrupt_header,
  io,
  geometry,
  spacing,
  validation,
  parse,
  orientation,
  data,
  metadata,
  input,
  shape,
  config,
  batch_size,
  schedule,
  divergence,
  compatibility,
  integrity,
  transfer,
  label,
  degenerate,
  placement,
  eval,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace triad
