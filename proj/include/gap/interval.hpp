#pragma once

#include <algorithm>

namespace gap {

// Normalized or absolute time span; callers keep start <= end.
struct Interval {
    double start = 0.0;
    double end = 0.0;

    double length() const { return end - start; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

inline Interval ordered(Interval iv) {
    if (iv.start > iv.end) std::swap(iv.start, iv.end);
    return iv;
}

// Temporal IoU; zero when the union has no extent.
inline double tiou(const Interval& a, const Interval& b) {
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = a.length() + b.length() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace gap
