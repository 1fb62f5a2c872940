#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace tdpo::io {

/// Shortest round-trippable decimal form; NaN renders as an empty field so
/// CSV consumers see a missing value.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }

}  // namespace tdpo::io
