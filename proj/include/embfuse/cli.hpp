// SPDX-License-Identifier: Apache-2.0
//
// `embfuse` command line. Exit codes: 0 ok, 2 usage/schema/format, 3
// alignment, 4 every sweep cell failed, 5 nothing to report, 130 sweep
// interrupted.

#pragma once

#include <atomic>
#include <ostream>
#include <string>
#include <vector>

namespace embfuse {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kAlignment = 3;
inline constexpr int kAllFailed = 4;
inline constexpr int kEmptyReport = 5;
inline constexpr int kInterrupted = 130;
}  // namespace exit_code

/// `args` excludes the program name. `cancel`, when set, stops a running
/// sweep after the cells in flight.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* cancel = nullptr);

}  // namespace embfuse
