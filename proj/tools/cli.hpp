#pragma once

#include <iosfwd>

namespace oslsel::cli {

/// Runs the oslsel command line. Returns 0 on success, 2 on invalid input and
/// 3 when a solver fails; errors are also written to `err` as a JSON object.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace oslsel::cli
