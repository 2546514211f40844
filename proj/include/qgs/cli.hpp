#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qgs::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kMalformedDataset = 4,
  kDiverged = 5,
};

// Runs the command line `qgs <args...>`; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qgs::cli
