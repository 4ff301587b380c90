#pragma once

#include <iosfwd>

namespace adn {

// Entry point of the `adn` tool. Returns 0 on success, 1 on validation errors
// (bad input, usage, failed verification) and 2 on internal errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace adn
