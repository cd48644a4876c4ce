#include "sfb/errors.hpp"

namespace sfb {

std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::precondition: return "precondition";
    case ErrorCategory::invalid_field: return "invalid_field";
    case ErrorCategory::condition_violation: return "condition_violation";
    case ErrorCategory::blow_up: return "blow_up";
    case ErrorCategory::non_convergence: return "non_convergence";
    case ErrorCategory::format: return "format";
    case ErrorCategory::version_mismatch: return "version_mismatch";
    case ErrorCategory::io: return "io";
  }
  return "unknown";
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return 2;
    case ErrorCategory::precondition: return 3;
    case ErrorCategory::invalid_field: return 3;
    case ErrorCategory::condition_violation: return 4;
    case ErrorCategory::blow_up: return 5;
    case ErrorCategory::non_convergence: return 6;
    case ErrorCategory::format: return 7;
    case ErrorCategory::version_mismatch: return 7;
    case ErrorCategory::io: return 8;
  }
  return 1;
}

}  // namespace sfb
