#pragma once

// Scalar-generic kernels for the ray construction chain. They are
// instantiated with double by the geometry module and with ad::Var by the
// loss, so forward values and gradients come from the same code.

#include <array>
#include <cmath>

namespace gazekit::kernels {

template <typename T>
using Vec3 = std::array<T, 3>;

template <typename T>
using Vec2 = std::array<T, 2>;

/// Pinhole intrinsics as plain doubles.
struct Intrinsics {
  double fx, fy, cx, cy;
};

using std::sqrt;

template <typename T>
T dot(const Vec3<T>& a, const Vec3<T>& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

template <typename T>
Vec3<T> cross(const Vec3<T>& a, const Vec3<T>& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

template <typename T>
T norm(const Vec3<T>& a) {
  return sqrt(dot(a, a));
}

template <typename T, typename S>
Vec3<T> scale(const Vec3<T>& a, const S& s) {
  return {a[0] * s, a[1] * s, a[2] * s};
}

template <typename T>
Vec3<T> add(const Vec3<T>& a, const Vec3<T>& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

template <typename T>
Vec3<T> sub(const Vec3<T>& a, const Vec3<T>& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

/// Row-major 3x3 matrix times vector.
template <typename T>
Vec3<T> mat_vec(const std::array<double, 9>& m, const Vec3<T>& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

/// Point on the pixel ray at Euclidean distance `depth` from the camera centre.
template <typename T>
Vec3<T> back_project(const Vec2<T>& p, const T& depth, const Intrinsics& k) {
  Vec3<T> u{(p[0] - k.cx) / k.fx, (p[1] - k.cy) / k.fy, T(1.0)};
  T n = norm(u);
  return scale(u, depth / n);
}

template <typename T>
struct Basis {
  Vec3<T> x, y, z;
};

/// z points from the origin towards the camera; x is perpendicular to the
/// camera y-axis with a positive camera-x component; y = z cross x.
template <typename T>
Basis<T> gaze_basis(const Vec3<T>& origin) {
  T n = norm(origin);
  Vec3<T> z = scale(origin, T(-1.0) / n);
  Vec3<T> xr{-z[2], T(0.0), z[0]};
  T nx = sqrt(xr[0] * xr[0] + xr[2] * xr[2]);
  Vec3<T> x = scale(xr, T(1.0) / nx);
  Vec3<T> y = cross(z, x);
  return {x, y, z};
}

template <typename T>
struct Ray {
  Vec3<T> origin;
  Vec3<T> direction;
};

/// rho = c * rhoRough; origin back-projected to rho; d = [x y] d2D + z.
template <typename T>
Ray<T> assemble_ray(const Vec2<T>& o2d, const Vec2<T>& d2d, const T& c, double rhoRough,
                    const Intrinsics& normCam) {
  T rho = c * rhoRough;
  Vec3<T> origin = back_project(o2d, rho, normCam);
  Basis<T> b = gaze_basis(origin);
  Vec3<T> dir = add(add(scale(b.x, d2d[0]), scale(b.y, d2d[1])), b.z);
  return {origin, dir};
}

/// Distance from `target` to the infinite line origin + t * direction.
template <typename T>
T miss_distance(const Vec3<T>& origin, const Vec3<T>& direction, const Vec3<T>& target) {
  Vec3<T> w = sub(target, origin);
  Vec3<T> c = cross(w, direction);
  return norm(c) / norm(direction);
}

}  // namespace gazekit::kernels
