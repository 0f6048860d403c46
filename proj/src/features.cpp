#include "gazekit/features.hpp"

#include "gazekit/errors.hpp"

namespace gazekit::features {

namespace {

constexpr double kPointScale = 50.0;
constexpr double kPupilGlintScale = 10.0;
constexpr double kIrisScale = 20.0;
constexpr double kInterocScale = 400.0;

}  // namespace

EyeVector eye_vector(const eyesim::FeatureSet& fs, const NormalizationContext& ctx) {
  const Vec2 center = ctx.crop_center();
  auto q = [&](const Vec2& p) -> Vec2 { return geometry::warp_point(p, ctx) - center; };
  EyeVector v;
  const Vec2 pupil = q(fs.pupilCenter);
  v.segment<2>(0) = pupil / kPointScale;
  if (fs.glintPresent) {
    const Vec2 glint = q(fs.glint);
    v.segment<2>(2) = glint / kPointScale;
    v(4) = 1.0;
    v.segment<2>(5) = (pupil - glint) / kPupilGlintScale;
  } else {
    v.segment<5>(2).setZero();
  }
  for (int k = 0; k < eyesim::kIrisPoints; ++k) {
    v.segment<2>(7 + 2 * k) = (q(fs.irisPoints[k]) - pupil) / kIrisScale;
  }
  for (int k = 0; k < eyesim::kLidPoints; ++k) {
    v.segment<2>(7 + 2 * eyesim::kIrisPoints + 2 * k) = q(fs.lidPoints[k]) / kPointScale;
  }
  return v;
}

NormalizedSample normalize(const eyesim::Sample& s, int sampleIndex) {
  NormalizedSample n;
  n.sampleIndex = sampleIndex;
  n.personId = s.personId;
  n.contexts[kRight] = geometry::eye_context(s.detR, s.detL, s.camera, false);
  n.contexts[kLeft] = geometry::eye_context(s.detR, s.detL, s.camera, true);
  n.eyeInputs[kRight] = eye_vector(s.right, n.contexts[kRight]);
  n.eyeInputs[kLeft] = eye_vector(s.left, n.contexts[kLeft]);
  n.irisCenter[kRight] = geometry::warp_point(s.right.iris_center(), n.contexts[kRight]);
  n.irisCenter[kLeft] = geometry::warp_point(s.left.iris_center(), n.contexts[kLeft]);

  const NormalizationContext face = geometry::face_context(s.face.detR, s.face.detL, s.camera);
  const Vec2 fc = face.crop_center();
  const Vec2 qr = (geometry::warp_point(s.face.detR, face) - fc) / kPointScale;
  const Vec2 ql = (geometry::warp_point(s.face.detL, face) - fc) / kPointScale;
  const Vec2 qn = (geometry::warp_point(s.face.nose, face) - fc) / kPointScale;
  const double io = s.face.interocularPx / kInterocScale;
  n.faceInput << qr.x(), qr.y(), ql.x(), ql.y(), qn.x(), qn.y(), io;
  n.faceInputMirrored << -ql.x(), ql.y(), -qr.x(), qr.y(), -qn.x(), qn.y(), io;

  n.rhoRough = geometry::rough_distance(s.detL, s.detR, s.camera);
  n.target = s.gazeTarget;
  n.trueEye[kRight] = s.truth.eyeRight;
  n.trueEye[kLeft] = s.truth.eyeLeft;
  return n;
}

eyesim::Sample with_detections(const eyesim::Sample& sample, const Vec2& detR, const Vec2& detL) {
  eyesim::Sample s = sample;
  s.detR = detR;
  s.detL = detL;
  s.face.detR = detR;
  s.face.detL = detL;
  s.face.interocularPx = (detL - detR).norm();
  return s;
}

eyesim::Sample mirror_sample(const eyesim::Sample& s) {
  const double cx2 = 2.0 * s.camera.cx;
  auto m2 = [&](const Vec2& p) { return Vec2(cx2 - p.x(), p.y()); };
  auto m3 = [](const Vec3& p) { return Vec3(-p.x(), p.y(), p.z()); };
  auto mfs = [&](const eyesim::FeatureSet& f) {
    eyesim::FeatureSet o = f;
    o.pupilCenter = m2(f.pupilCenter);
    o.glint = f.glintPresent ? m2(f.glint) : f.glint;
    for (auto& p : o.irisPoints) p = m2(p);
    for (auto& p : o.lidPoints) p = m2(p);
    return o;
  };
  eyesim::Sample o = s;
  o.detR = m2(s.detL);
  o.detL = m2(s.detR);
  o.right = mfs(s.left);
  o.left = mfs(s.right);
  o.face.detR = m2(s.face.detL);
  o.face.detL = m2(s.face.detR);
  o.face.nose = m2(s.face.nose);
  o.gazeTarget = m3(s.gazeTarget);
  o.truth.eyeRight = m3(s.truth.eyeLeft);
  o.truth.eyeLeft = m3(s.truth.eyeRight);
  std::swap(o.truth.foveaRight, o.truth.foveaLeft);
  std::swap(o.truth.kRight, o.truth.kLeft);
  return o;
}

}  // namespace gazekit::features
