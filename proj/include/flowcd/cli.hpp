// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace flowcd::cli {

/// Entry point behind main(). Exit codes: 0 success, 1 IO failure,
/// 2 validation failure, 3 numerical abort.
int run(int argc, const char* const* argv);

} // namespace flowcd::cli
