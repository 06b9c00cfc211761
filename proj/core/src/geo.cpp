#include "roadkf/geo.hpp"

#include <algorithm>
#include <stdexcept>

namespace roadkf::geo {

double horizontal_distance(const EnuPoint& a, const EnuPoint& b) {
    return std::hypot(a.east - b.east, a.north - b.north);
}

double wrap_angle(double theta) {
    double w = std::fmod(theta, kTwoPi);
    if (w < 0.0) w += kTwoPi;
    // fmod can return exactly kTwoPi after the correction when theta is a
    // tiny negative number.
    if (w >= kTwoPi) w = 0.0;
    return w;
}

Segment make_segment(const EnuPoint& a, const EnuPoint& b) {
    const double de = b.east - a.east;
    const double dn = b.north - a.north;
    const double len = std::hypot(de, dn);
    if (!(len > 0.0)) {
        throw std::invalid_argument("make_segment: zero-length segment");
    }
    Segment s;
    s.a = a;
    s.b = b;
    s.length = len;
    s.heading = wrap_angle(std::atan2(dn, de));
    s.midpoint = 0.5 * (a + b);
    return s;
}

static double closest_param(const EnuPoint& p, const Segment& s) {
    const double de = s.b.east - s.a.east;
    const double dn = s.b.north - s.a.north;
    const double t = ((p.east - s.a.east) * de + (p.north - s.a.north) * dn) /
                     (de * de + dn * dn);
    return std::clamp(t, 0.0, 1.0);
}

double point_segment_distance(const EnuPoint& p, const Segment& s) {
    const double t = closest_param(p, s);
    const EnuPoint q = s.a + t * (s.b - s.a);
    return horizontal_distance(p, q);
}

EnuPoint closest_point_on_segment(const EnuPoint& p, const Segment& s) {
    const double t = closest_param(p, s);
    return s.a + t * (s.b - s.a);
}

double heading_cost(double theta_user, double theta_road) {
    return 1.0 - std::abs(std::cos(theta_user - theta_road));
}

Rot2 rotation_to_road(double theta_road) {
    return Rot2{std::cos(theta_road), std::sin(theta_road)};
}

}  // namespace roadkf::geo
