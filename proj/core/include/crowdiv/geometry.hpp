#pragma once

#include <cmath>
#include <numbers>
#include <optional>

namespace crowdiv {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator-() const { return {-x, -y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2 operator/(double s) const { return {x / s, y / s}; }
  constexpr Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  constexpr Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  constexpr bool operator==(const Vec2&) const = default;

  double norm() const { return std::hypot(x, y); }
  constexpr double squared_norm() const { return x * x + y * y; }
};

constexpr Vec2 operator*(double s, Vec2 v) { return v * s; }
constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
/// z-component of the 3D cross product (a, 0) x (b, 0).
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline Vec2 unit_from_angle(double a) { return {std::cos(a), std::sin(a)}; }
inline Vec2 rotate(Vec2 v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

struct Circle {
  Vec2 center;
  double radius = 0.0;
};

/// Axis-aligned rectangle, lo <= hi component-wise.
struct Rect {
  Vec2 lo;
  Vec2 hi;

  constexpr bool contains(Vec2 p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
  }
  constexpr double width() const { return hi.x - lo.x; }
  constexpr double height() const { return hi.y - lo.y; }
};

// Ray casts return the smallest t > 0 with origin + t*dir on the shape's
// boundary. `dir` must be a unit vector.
std::optional<double> ray_circle(Vec2 origin, Vec2 dir, const Circle& c);
std::optional<double> ray_rect(Vec2 origin, Vec2 dir, const Rect& r);

/// Distance from p to the closest point of a solid rectangle (0 inside).
double distance_to_rect(Vec2 p, const Rect& r);
/// Closest point of the rectangle's solid region to p.
Vec2 closest_point_on_rect(Vec2 p, const Rect& r);
/// Distance from an interior point to the rectangle's boundary.
double distance_to_rect_boundary_from_inside(Vec2 p, const Rect& r);

}  // namespace crowdiv
