#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cap/error.hpp"

namespace cap::cli {

// Process exit codes, one per error class.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kNotFound = 3,
  kBadInput = 4,
  kBadConfig = 5,
  kAgentFailure = 6,
  kCorrupt = 7,
  kConflict = 8,
};

int exit_code(ErrorCode code);

struct Streams {
  std::ostream& out;
  std::ostream& err;
  bool color = false;
};

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, Streams io);

}  // namespace cap::cli
