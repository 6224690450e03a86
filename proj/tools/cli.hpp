#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace caap::cli {

/// Process exit codes. Library errors map one-to-one onto ErrorKind.
enum Exit : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitFormat = 4,
  kExitConfig = 5,
  kExitShape = 6,
  kExitRange = 7,
};

/// Runs one command line (without the program name). Failures print a single
/// `error: kind=<kind> exit=<code> message="<text>"` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace caap::cli
