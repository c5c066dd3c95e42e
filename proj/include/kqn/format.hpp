#pragma once

#include <cstdio>
#include <string>

namespace kqn {

// Canonical numeric formatting for CSV output: 9 significant digits.
inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace kqn
