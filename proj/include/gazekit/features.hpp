#pragma once

// Landmark normalization: warps a Sample's 2D features into the two eye
// crops and the face crop and flattens them into network input vectors.

#include <Eigen/Core>

#include <array>

#include "gazekit/eyesim.hpp"
#include "gazekit/geometry.hpp"

namespace gazekit::features {

inline constexpr int kEyeInputs = 35;
inline constexpr int kFaceInputs = 7;

using EyeVector = Eigen::Matrix<double, kEyeInputs, 1>;
using FaceVector = Eigen::Matrix<double, kFaceInputs, 1>;

enum Eye : int { kRight = 0, kLeft = 1 };

/// One sample after normalization; index 0 is the right eye, 1 the left.
struct NormalizedSample {
  int sampleIndex = 0;
  int personId = 0;
  std::array<EyeVector, 2> eyeInputs;
  FaceVector faceInput;
  /// Face input of the interocular mirror image, used to symmetrize the
  /// distance head.
  FaceVector faceInputMirrored;
  std::array<NormalizationContext, 2> contexts;
  double rhoRough = 0.0;
  Vec3 target = Vec3::Zero();
  /// Iris centre in crop pixels.
  std::array<Vec2, 2> irisCenter;
  bool irisAnchor = false;
  std::array<Vec3, 2> trueEye;
};

/// Normalizes with the sample's own detections.
NormalizedSample normalize(const eyesim::Sample& sample, int sampleIndex = 0);

/// Eye feature vector in crop coordinates of `ctx`.
EyeVector eye_vector(const eyesim::FeatureSet& fs, const NormalizationContext& ctx);

/// Copy of `sample` with both detections replaced (face features follow).
eyesim::Sample with_detections(const eyesim::Sample& sample, const Vec2& detR, const Vec2& detL);

/// Interocular mirror image of a sample about the vertical line through the
/// principal point: pixel x -> 2 cx - x, eyes swapped, 3D x negated.
eyesim::Sample mirror_sample(const eyesim::Sample& sample);

}  // namespace gazekit::features
