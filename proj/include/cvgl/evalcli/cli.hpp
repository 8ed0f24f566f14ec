#pragma once

// Command-line surface. Exit status: 0 success, 1 usage / contract / config
// errors, 2 I/O errors.

#include <iosfwd>
#include <string>
#include <vector>

namespace cvgl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitIo = 2;

// args excludes the program name.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cvgl
