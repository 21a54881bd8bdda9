#include "triad/error.hpp"

namespace triad {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::unsupported_dtype: return "unsupported-dtype";
    case ErrorKind::corrupt_header: return "corrupt-header";
    case ErrorKind::io: return "io";
    case ErrorKind::geometry: return "geometry";
    case ErrorKind::spacing: return "spacing";
    case ErrorKind::validation: return "validation";
    case ErrorKind::parse: return "parse";
    case ErrorKind::orientation: return "orientation";
    case ErrorKind::data: return "data";
    case ErrorKind::metadata: return "metadata";
    case ErrorKind::input: return "input";
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::batch_size: return "batch-size";
    case ErrorKind::schedule: return "schedule";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::transfer: return "transfer";
    case ErrorKind::label: return "label";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::placement: return "placement";
    case ErrorKind::eval: return "eval";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace triad
