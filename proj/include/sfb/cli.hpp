#pragma once

// Command-line front end: subcommands simulate, frozen, skeleton, rate,
// experiment and check over a JSON config with flag overrides.

#include <iosfwd>

namespace sfb::cli {

// Exit codes beyond the error-category table (see README).
inline constexpr int exit_ok = 0;
inline constexpr int exit_checks_failed = 9;  // experiment ran, a protocol check failed

// Runs one command line. Summaries go to out, progress and errors to err.
// Errors print "sfb: error[<category>]: <message>" and return the category's
// exit code.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sfb::cli
