#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace hybridflow {

inline constexpr const char* kToolkitVersion = "0.3.0";

/// Raised for invalid inputs and configuration. The message names the
/// offending element (edge id, detector id, config key, ...).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline double distance(const Point& a, const Point& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

}  // namespace hybridflow
