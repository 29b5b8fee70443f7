#pragma once

// Command-line entry points: gen-corpus, train-lm, pretrain, eval, sweep,
// report and config. Exit codes: 0 success, 1 user or config error,
// 2 contract violation.

#include <iosfwd>

namespace wavprompt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUserError = 1;
inline constexpr int kExitContract = 2;

// Output root when --out is absent.
inline constexpr const char * kOutEnv = "WAVPROMPT_OUT";

int run_cli(int argc, const char * const * argv, std::ostream & out, std::ostream & err);

}  // namespace wavprompt
