#include "crowdiv/geometry.hpp"

#include <algorithm>
#include <limits>

namespace crowdiv {

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  constexpr double two_pi = 2.0 * std::numbers::pi;
  if (a > -pi && a <= pi) return a;
  double r = std::fmod(a + pi, two_pi);
  if (r <= 0.0) r += two_pi;
  // r in (0, 2pi]
  return r - pi;
}

std::optional<double> ray_circle(Vec2 origin, Vec2 dir, const Circle& c) {
  const Vec2 oc = origin - c.center;
  const double b = dot(oc, dir);
  const double cc = oc.squared_norm() - c.radius * c.radius;
  const double disc = b * b - cc;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  // Roots of t^2 + 2bt + cc = 0. The numerically stable form avoids
  // cancellation when the origin is far from the circle.
  double t0, t1;
  if (b > 0.0) {
    const double q = -b - sq;
    t0 = q;
    t1 = (q != 0.0) ? cc / q : 0.0;
  } else {
    const double q = -b + sq;
    t1 = q;
    t0 = (q != 0.0) ? cc / q : 0.0;
  }
  if (t0 > t1) std::swap(t0, t1);
  if (t0 > 0.0) return t0;
  if (t1 > 0.0) return t1;
  return std::nullopt;
}

std::optional<double> ray_rect(Vec2 origin, Vec2 dir, const Rect& r) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  const double o[2] = {origin.x, origin.y};
  const double d[2] = {dir.x, dir.y};
  const double lo[2] = {r.lo.x, r.lo.y};
  const double hi[2] = {r.hi.x, r.hi.y};
  for (int k = 0; k < 2; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < lo[k] || o[k] > hi[k]) return std::nullopt;
      continue;
    }
    double t1 = (lo[k] - o[k]) / d[k];
    double t2 = (hi[k] - o[k]) / d[k];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (tmax < tmin) return std::nullopt;
  if (tmin > 0.0) return tmin;
  if (tmax > 0.0) return tmax;  // origin inside: exit point
  return std::nullopt;
}

Vec2 closest_point_on_rect(Vec2 p, const Rect& r) {
  return {std::clamp(p.x, r.lo.x, r.hi.x), std::clamp(p.y, r.lo.y, r.hi.y)};
}

double distance_to_rect(Vec2 p, const Rect& r) {
  return (p - closest_point_on_rect(p, r)).norm();
}

double distance_to_rect_boundary_from_inside(Vec2 p, const Rect& r) {
  return std::min({p.x - r.lo.x, r.hi.x - p.x, p.y - r.lo.y, r.hi.y - p.y});
}

}  // namespace crowdiv
