#pragma once

#include <string>
#include <vector>

namespace latentbank::cli {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitBadFlags = 2;
inline constexpr int kExitCorpus = 3;
inline constexpr int kExitDiverged = 4;
inline constexpr int kExitDimMismatch = 5;

// Full CLI: train / accumulate / evaluate / generate. argv excludes the
// program name. Exposed for tests; main() forwards to this.
int run(const std::vector<std::string>& args);

} // namespace latentbank::cli
