#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ovam {

enum class ErrorKind {
  argument,
  dimension,
  numeric_input,
  configuration,
  io,
  load,
  partial_trace,
  over_length,
  divergence,
  scorer_unavailable,
  not_found,
  conflict,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::argument: return "argument_error";
    case ErrorKind::dimension: return "dimension_error";
    case ErrorKind::numeric_input: return "numeric_input_error";
    case ErrorKind::configuration: return "configuration_error";
    case ErrorKind::io: return "io_error";
    case ErrorKind::load: return "load_error";
    case ErrorKind::partial_trace: return "partial_trace_error";
    case ErrorKind::over_length: return "over_length_error";
    case ErrorKind::divergence: return "divergence_error";
    case ErrorKind::scorer_unavailable: return "scorer_unavailable";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::conflict: return "conflict";
  }
  return "error";
}

/// Every failure raised by the library carries a machine-readable kind so the
/// CLI and the HTTP service can map it onto exit codes and status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view code() const noexcept { return to_string(kind_); }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace ovam
