#pragma once

#include <array>
#include <cmath>

// Planar local-frame geometry. Everything lives in a single East-North-Up
// frame per scenario; headings are counterclockwise from East, in radians,
// normalized to [0, 2*pi). Road geometry is horizontal; the up component is
// carried but ignored by distances and headings.

namespace roadkf::geo {

constexpr double kTwoPi = 2.0 * M_PI;

struct EnuPoint {
    double east = 0.0;
    double north = 0.0;
    double up = 0.0;
};

inline EnuPoint operator+(const EnuPoint& a, const EnuPoint& b) {
    return {a.east + b.east, a.north + b.north, a.up + b.up};
}
inline EnuPoint operator-(const EnuPoint& a, const EnuPoint& b) {
    return {a.east - b.east, a.north - b.north, a.up - b.up};
}
inline EnuPoint operator*(double s, const EnuPoint& p) {
    return {s * p.east, s * p.north, s * p.up};
}

/// Horizontal (east/north) Euclidean distance between two points.
double horizontal_distance(const EnuPoint& a, const EnuPoint& b);

/// Wrap an angle to [0, 2*pi).
double wrap_angle(double theta);

/// A directed road segment from a to b. Construct through make_segment so the
/// cached length/heading/midpoint stay consistent with the endpoints.
struct Segment {
    EnuPoint a;
    EnuPoint b;
    double length = 0.0;    // horizontal meters, > 0
    double heading = 0.0;   // azimuth of b-a, CCW from East, [0, 2*pi)
    EnuPoint midpoint;
};

/// Throws std::invalid_argument on a degenerate (zero-length) segment.
Segment make_segment(const EnuPoint& a, const EnuPoint& b);

/// Min over t in [0,1] of |p - (a + t(b-a))| in the horizontal plane.
double point_segment_distance(const EnuPoint& p, const Segment& s);

/// Closest point on the segment to p (horizontal metric; up interpolated).
EnuPoint closest_point_on_segment(const EnuPoint& p, const Segment& s);

/// Direction-agnostic heading mismatch: 1 - |cos(theta_user - theta_road)|.
/// 0 when aligned (either way along the road), 1 when perpendicular.
double heading_cost(double theta_user, double theta_road);

/// Clockwise 2x2 rotation that maps the road direction (cos t, sin t) onto
/// (1, 0): row 0 is the parallel axis, row 1 the perpendicular axis.
struct Rot2 {
    // [[c, s], [-s, c]]
    double c = 1.0;
    double s = 0.0;

    std::array<double, 2> apply(double east, double north) const {
        return {c * east + s * north, -s * east + c * north};
    }
    std::array<std::array<double, 2>, 2> matrix() const {
        return {{{c, s}, {-s, c}}};
    }
};

Rot2 rotation_to_road(double theta_road);

}  // namespace roadkf::geo
