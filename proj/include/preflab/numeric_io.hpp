#pragma once

#include <cstdio>
#include <cstdlib>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace preflab {

// Doubles are persisted as base-10 strings with 17 significant digits, which
// round-trips every finite IEEE-754 double bit-exactly.
inline std::string decimal17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

inline double parse_decimal(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw std::invalid_argument("not a decimal number: '" + s + "'");
  }
  return v;
}

inline std::vector<std::string> decimal17_vec(std::span<const double> xs) {
  std::vector<std::string> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(decimal17(x));
  return out;
}

inline std::vector<double> parse_decimal_vec(const std::vector<std::string>& ss) {
  std::vector<double> out;
  out.reserve(ss.size());
  for (const auto& s : ss) out.push_back(parse_decimal(s));
  return out;
}

}  // namespace preflab
