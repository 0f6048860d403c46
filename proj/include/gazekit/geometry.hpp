#pragma once

// Camera, normalization and gaze-ray geometry.
//
// Conventions: right-handed camera frames looking along +z with y pointing
// down; pixel centres at integer coordinates with the origin at the top-left
// pixel; all lengths in millimetres.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>

#include "gazekit/ray_kernels.hpp"

namespace gazekit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Assumed mean interocular distance used for the rough distance estimate.
inline constexpr double kMeanInterocularMm = 63.0;

inline constexpr int kEyeCropWidth = 224;
inline constexpr int kEyeCropHeight = 112;
inline constexpr int kFaceCropWidth = 224;
inline constexpr int kFaceCropHeight = 56;
inline constexpr double kEyeInterocularPx = 320.0;
inline constexpr double kFaceInterocularPx = 84.0;

/// Pinhole camera: focal lengths and principal point in pixels.
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Throws DomainError unless fx, fy, width and height are positive.
  void validate() const;

  Mat3 matrix() const;
  Mat3 inverse_matrix() const;

  /// K^-1 [p; 1], i.e. the ray through pixel p with unit z.
  Vec3 pixel_ray(const Vec2& p) const;
  /// Perspective projection; throws DomainError for z <= 0.
  Vec2 project(const Vec3& x) const;
  bool contains(const Vec2& p) const;

  kernels::Intrinsics intrinsics() const { return {fx, fy, cx, cy}; }

  bool operator==(const Camera&) const = default;
};

/// Orthogonal 3x3 matrix. A determinant of -1 marks a mirrored conversion.
class Rotation3 {
 public:
  Rotation3() : m_(Mat3::Identity()) {}
  /// Throws DomainError if `m` is not orthogonal to 1e-9.
  explicit Rotation3(const Mat3& m);

  static Rotation3 identity() { return Rotation3(); }
  static Rotation3 about_x(double radians);
  static Rotation3 about_y(double radians);
  static Rotation3 about_z(double radians);

  const Mat3& matrix() const { return m_; }
  Rotation3 inverse() const;
  double determinant() const { return m_.determinant(); }
  bool mirrored() const { return determinant() < 0.0; }
  /// max |M^T M - I|
  double orthogonality_error() const;
  std::array<double, 9> row_major() const;

  Vec3 operator*(const Vec3& v) const { return m_ * v; }
  Rotation3 operator*(const Rotation3& o) const;

 private:
  Mat3 m_;
};

enum class Frame : std::uint8_t { Real, NormalizedRight, NormalizedLeft };

/// Ray origin + t * direction; direction need not be unit length.
struct GazeRay {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  Frame frame = Frame::Real;

  Vec3 at(double t) const { return origin + t * direction; }
};

/// Everything needed to move points between a real image and one crop.
struct NormalizationContext {
  Rotation3 rotation;
  Camera realCam;
  Camera normCam;
  int cropWidth = kEyeCropWidth;
  int cropHeight = kEyeCropHeight;
  Vec2 refPoint = Vec2::Zero();
  bool mirrored = false;

  Vec2 crop_center() const;
};

namespace geometry {

/// Conversion matrix R mapping real-camera coordinates into a camera that
/// looks along `refRay` with the image interocular vector on its +x axis.
/// With `mirror` the result is diag(-1, 1, 1) * R.
Rotation3 conversion_matrix(const Vec3& refRay, const Vec2& interocular2D, const Camera& cam,
                            bool mirror);

/// Normalized camera whose scale puts the warped detections
/// `targetInterocPx` apart, principal point at the crop centre.
Camera normalized_camera(const Vec2& detL, const Vec2& detR, const Camera& realCam,
                         const Rotation3& rotation, double targetInterocPx, int cropW, int cropH);

/// Context for an eye crop (224x112, 320 px interocular). The left eye is
/// mirrored so it looks like a right eye.
NormalizationContext eye_context(const Vec2& detR, const Vec2& detL, const Camera& cam,
                                 bool leftEye);
/// Context for the face crop centred between the detections (224x56, 84 px).
NormalizationContext face_context(const Vec2& detR, const Vec2& detL, const Camera& cam);

/// Applies C_n R C_r^-1 to a real-image pixel.
Vec2 warp_point(const Vec2& p, const NormalizationContext& ctx);
/// Inverse of warp_point.
Vec2 unwarp_point(const Vec2& q, const NormalizationContext& ctx);

/// Distance at which the two detections are 63 mm apart (chord formula).
double rough_distance(const Vec2& detL, const Vec2& detR, const Camera& cam);

/// Point at Euclidean distance `depth` along the ray through pixel p.
Vec3 back_project(const Vec2& p, double depth, const Camera& cam);

struct Basis {
  Vec3 x, y, z;
};
Basis gaze_basis(const Vec3& origin);

/// Gaze ray in the normalized frame from network outputs.
GazeRay assemble_ray(const Vec2& o2D, const Vec2& d2D, double c, double rhoRough,
                     const Camera& normCam, Frame frame = Frame::NormalizedRight);

/// Maps a normalized-frame ray back to the real camera with R^-1.
GazeRay denormalize_ray(const GazeRay& ray, const Rotation3& rotation);

double miss_distance(const GazeRay& ray, const Vec3& target);

/// Angle in degrees between ET and EG, where G is the point on the ray with
/// GT perpendicular to ET. Returns NaN when no such G exists.
double angular_error(const Vec3& trueEye, const Vec3& target, const GazeRay& ray);

double deg2rad(double deg);
double rad2deg(double rad);

}  // namespace geometry
}  // namespace gazekit
