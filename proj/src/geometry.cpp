#include "gazekit/geometry.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "gazekit/errors.hpp"

namespace gazekit {

namespace {

constexpr double kOrthoTol = 1e-9;

kernels::Vec3<double> to_k(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 from_k(const kernels::Vec3<double>& v) { return {v[0], v[1], v[2]}; }

}  // namespace

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || width <= 0 || height <= 0) {
    std::ostringstream os;
    os << "invalid camera: fx=" << fx << " fy=" << fy << " size=" << width << "x" << height;
    throw DomainError(os.str());
  }
}

Mat3 Camera::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

Mat3 Camera::inverse_matrix() const {
  Mat3 k;
  k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
  return k;
}

Vec3 Camera::pixel_ray(const Vec2& p) const { return {(p.x() - cx) / fx, (p.y() - cy) / fy, 1.0}; }

Vec2 Camera::project(const Vec3& x) const {
  if (!(x.z() > 0.0)) throw DomainError("cannot project a point at or behind the camera");
  return {fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy};
}

bool Camera::contains(const Vec2& p) const {
  return p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= width - 1.0 && p.y() <= height - 1.0;
}

Rotation3::Rotation3(const Mat3& m) : m_(m) {
  if (!m_.allFinite() || orthogonality_error() >= kOrthoTol) {
    throw DomainError("matrix is not orthogonal");
  }
}

Rotation3 Rotation3::about_x(double a) {
  Mat3 m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return Rotation3(m);
}

Rotation3 Rotation3::about_y(double a) {
  Mat3 m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return Rotation3(m);
}

Rotation3 Rotation3::about_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return Rotation3(m);
}

Rotation3 Rotation3::inverse() const {
  Rotation3 r;
  r.m_ = m_.transpose();
  return r;
}

double Rotation3::orthogonality_error() const {
  return (m_.transpose() * m_ - Mat3::Identity()).cwiseAbs().maxCoeff();
}

std::array<double, 9> Rotation3::row_major() const {
  return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
}

Rotation3 Rotation3::operator*(const Rotation3& o) const { return Rotation3(m_ * o.m_); }

Vec2 NormalizationContext::crop_center() const {
  return {(cropWidth - 1) / 2.0, (cropHeight - 1) / 2.0};
}

namespace geometry {

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

Rotation3 conversion_matrix(const Vec3& refRay, const Vec2& interocular2D, const Camera& cam,
                            bool mirror) {
  if (!(refRay.z() > 0.0)) throw DomainError("reference ray points behind the camera");
  if (!(interocular2D.norm() > 0.0)) throw DomainError("interocular vector is zero");
  const Vec3 z = refRay.normalized();
  // Image displacement at the reference point expressed as a camera-space direction.
  const Vec3 v(interocular2D.x() / cam.fx, interocular2D.y() / cam.fy, 0.0);
  Vec3 y = z.cross(v);
  const double ny = y.norm();
  if (!(ny > 1e-15 * v.norm())) throw DomainError("interocular vector parallel to reference ray");
  y /= ny;
  const Vec3 x = y.cross(z);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  if (mirror) r.row(0) *= -1.0;
  return Rotation3(r);
}

Camera normalized_camera(const Vec2& detL, const Vec2& detR, const Camera& realCam,
                         const Rotation3& rotation, double targetInterocPx, int cropW, int cropH) {
  if ((detL - detR).norm() == 0.0) throw DomainError("coincident eye detections");
  const Vec3 l = rotation * realCam.pixel_ray(detL);
  const Vec3 r = rotation * realCam.pixel_ray(detR);
  if (!(l.z() > 0.0) || !(r.z() > 0.0)) throw DomainError("detection behind normalized camera");
  const Vec2 ul = l.head<2>() / l.z();
  const Vec2 ur = r.head<2>() / r.z();
  const double sep = (ul - ur).norm();
  if (!(sep > 0.0)) throw DomainError("degenerate detections after rotation");
  Camera n;
  n.fx = n.fy = targetInterocPx / sep;
  n.cx = (cropW - 1) / 2.0;
  n.cy = (cropH - 1) / 2.0;
  n.width = cropW;
  n.height = cropH;
  return n;
}

NormalizationContext eye_context(const Vec2& detR, const Vec2& detL, const Camera& cam,
                                 bool leftEye) {
  NormalizationContext ctx;
  ctx.realCam = cam;
  ctx.refPoint = leftEye ? detL : detR;
  ctx.mirrored = leftEye;
  ctx.cropWidth = kEyeCropWidth;
  ctx.cropHeight = kEyeCropHeight;
  ctx.rotation = conversion_matrix(cam.pixel_ray(ctx.refPoint), detL - detR, cam, leftEye);
  ctx.normCam = normalized_camera(detL, detR, cam, ctx.rotation, kEyeInterocularPx,
                                  kEyeCropWidth, kEyeCropHeight);
  return ctx;
}

NormalizationContext face_context(const Vec2& detR, const Vec2& detL, const Camera& cam) {
  NormalizationContext ctx;
  ctx.realCam = cam;
  ctx.refPoint = 0.5 * (detL + detR);
  ctx.mirrored = false;
  ctx.cropWidth = kFaceCropWidth;
  ctx.cropHeight = kFaceCropHeight;
  ctx.rotation = conversion_matrix(cam.pixel_ray(ctx.refPoint), detL - detR, cam, false);
  ctx.normCam = normalized_camera(detL, detR, cam, ctx.rotation, kFaceInterocularPx,
                                  kFaceCropWidth, kFaceCropHeight);
  return ctx;
}

Vec2 warp_point(const Vec2& p, const NormalizationContext& ctx) {
  const Vec3 h = ctx.normCam.matrix() * (ctx.rotation * ctx.realCam.pixel_ray(p));
  if (std::abs(h.z()) < 1e-12) throw DomainError("point maps to the plane at infinity");
  return h.head<2>() / h.z();
}

Vec2 unwarp_point(const Vec2& q, const NormalizationContext& ctx) {
  const Vec3 h =
      ctx.realCam.matrix() * (ctx.rotation.inverse() * ctx.normCam.pixel_ray(q));
  if (std::abs(h.z()) < 1e-12) throw DomainError("point maps to the plane at infinity");
  return h.head<2>() / h.z();
}

double rough_distance(const Vec2& detL, const Vec2& detR, const Camera& cam) {
  const Vec3 a = cam.pixel_ray(detL).normalized();
  const Vec3 b = cam.pixel_ray(detR).normalized();
  // atan2 form keeps precision for nearly parallel rays.
  const double alpha = std::atan2(a.cross(b).norm(), a.dot(b));
  if (!(alpha > 0.0)) throw DomainError("coincident eye detections");
  return kMeanInterocularMm / (2.0 * std::sin(alpha / 2.0));
}

Vec3 back_project(const Vec2& p, double depth, const Camera& cam) {
  if (!(depth > 0.0)) throw DomainError("back-projection depth must be positive");
  return from_k(kernels::back_project<double>({p.x(), p.y()}, depth, cam.intrinsics()));
}

Basis gaze_basis(const Vec3& origin) {
  if (origin.x() == 0.0 && origin.z() == 0.0) {
    throw DomainError("gaze origin on the camera y-axis; basis x is undefined");
  }
  const auto b = kernels::gaze_basis(to_k(origin));
  return {from_k(b.x), from_k(b.y), from_k(b.z)};
}

GazeRay assemble_ray(const Vec2& o2D, const Vec2& d2D, double c, double rhoRough,
                     const Camera& normCam, Frame frame) {
  if (!(c > 0.0)) throw DomainError("distance correction must be positive");
  const double rho = c * rhoRough;
  const Vec3 origin = back_project(o2D, rho, normCam);
  const Basis b = gaze_basis(origin);
  GazeRay ray;
  ray.origin = origin;
  ray.direction = b.x * d2D.x() + b.y * d2D.y() + b.z;
  ray.frame = frame;
  return ray;
}

GazeRay denormalize_ray(const GazeRay& ray, const Rotation3& rotation) {
  const Rotation3 inv = rotation.inverse();
  return {inv * ray.origin, inv * ray.direction, Frame::Real};
}

double miss_distance(const GazeRay& ray, const Vec3& target) {
  return kernels::miss_distance(to_k(ray.origin), to_k(ray.direction), to_k(target));
}

double angular_error(const Vec3& trueEye, const Vec3& target, const GazeRay& ray) {
  const Vec3 et = target - trueEye;
  const double denom = ray.direction.dot(et);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (std::abs(denom) <= 1e-12 * ray.direction.norm() * et.norm()) return nan;
  const double t = (target - ray.origin).dot(et) / denom;
  const Vec3 eg = ray.at(t) - trueEye;
  if (!(eg.norm() > 0.0)) return nan;
  return rad2deg(std::atan2(et.cross(eg).norm(), et.dot(eg)));
}

}  // namespace geometry
}  // namespace gazekit
