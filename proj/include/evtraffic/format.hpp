#pragma once

#include <string>

namespace evtraffic {

/// Shortest decimal text that parses back to exactly `v`.
std::string fmt_real(double v);

}  // namespace evtraffic
