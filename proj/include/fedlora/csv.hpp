#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fedlora::csv {

/// Shortest round-trip form with at most 17 significant digits.
std::string format_real(double v);
double parse_real(std::string_view s);
long long parse_int(std::string_view s);
std::vector<std::string_view> split(std::string_view line, char sep = ',');

}  // namespace fedlora::csv
