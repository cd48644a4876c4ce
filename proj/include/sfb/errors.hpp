#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sfb {

enum class ErrorCategory {
  usage,
  precondition,
  invalid_field,
  condition_violation,
  blow_up,
  non_convergence,
  format,
  version_mismatch,
  io,
};

std::string_view category_name(ErrorCategory c);

// Process exit code for a failure of this category (see README for the table).
int exit_code(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

// A trajectory left the finite range. last_finite_index is the last time
// index at which every component was finite.
class BlowUpError : public Error {
 public:
  BlowUpError(std::size_t last_finite_index, const std::string& what)
      : Error(ErrorCategory::blow_up, what), last_finite_index_(last_finite_index) {}
  std::size_t last_finite_index() const noexcept { return last_finite_index_; }

 private:
  std::size_t last_finite_index_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t byte_offset, const std::string& what)
      : Error(ErrorCategory::format, what), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& what) { throw Error(c, what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCategory::precondition, what);
}

}  // namespace sfb
