#include <doctest.h>

#include "gazekit/diffnet.hpp"
#include "gazekit/eyesim.hpp"
#include "gazekit/features.hpp"

using namespace gazekit;
using features::kLeft;
using features::kRight;

namespace {

eyesim::Dataset small_dataset() {
  eyesim::SimConfig cfg;
  cfg.nPersons = 2;
  cfg.samplesPerPerson = 10;
  cfg.seed = 21;
  return eyesim::generate_dataset(cfg);
}

Vec3 mx(const Vec3& v) { return Vec3(-v.x(), v.y(), v.z()); }

}  // namespace

TEST_SUITE("features") {

TEST_CASE("mirrored scene turns the left eye into the right eye") {
  const auto ds = small_dataset();
  for (const auto& s : ds.samples) {
    const auto n = features::normalize(s);
    const auto m = features::normalize(features::mirror_sample(s));
    CHECK((n.eyeInputs[kLeft] - m.eyeInputs[kRight]).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((n.eyeInputs[kRight] - m.eyeInputs[kLeft]).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((n.faceInputMirrored - m.faceInput).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(n.rhoRough == doctest::Approx(m.rhoRough).epsilon(1e-12));
  }
}

TEST_CASE("mirrored-left rays equal rays of the unmirrored pipeline on the mirrored scene") {
  const auto ds = small_dataset();
  diffnet::NetworkOutput out;
  out.eyes[kRight] = {Vec2(100.0, 60.0), Vec2(0.05, -0.1), 1.1};
  out.eyes[kLeft] = {Vec2(120.0, 50.0), Vec2(-0.08, 0.02), 0.95};
  diffnet::NetworkOutput swapped;
  swapped.eyes[kRight] = out.eyes[kLeft];
  swapped.eyes[kLeft] = out.eyes[kRight];
  for (const auto& s : ds.samples) {
    const auto n = features::normalize(s);
    const auto m = features::normalize(features::mirror_sample(s));
    const auto rays = diffnet::output_rays(n, out);
    const auto mrays = diffnet::output_rays(m, swapped);
    CHECK((rays[kLeft].origin - mx(mrays[kRight].origin)).norm() < 1e-9);
    CHECK((rays[kLeft].direction.normalized() - mx(mrays[kRight].direction).normalized()).norm() < 1e-12);
  }
}

TEST_CASE("eye inputs are finite and detections sit on the crop axis") {
  const auto ds = small_dataset();
  for (const auto& s : ds.samples) {
    const auto n = features::normalize(s);
    CHECK(n.eyeInputs[kRight].allFinite());
    CHECK(n.eyeInputs[kLeft].allFinite());
    CHECK(n.faceInput.allFinite());
    for (int e : {kRight, kLeft}) {
      const auto& ctx = n.contexts[e];
      const Vec2 r = geometry::warp_point(s.detR, ctx), l = geometry::warp_point(s.detL, ctx);
      CHECK(std::abs(r.y() - l.y()) < 1e-9);
      CHECK((l - r).norm() == doctest::Approx(kEyeInterocularPx).epsilon(1e-9));
    }
  }
}

TEST_CASE("with_detections moves the face detections too") {
  const auto ds = small_dataset();
  const auto& s = ds.samples.front();
  const auto moved = features::with_detections(s, s.detR + Vec2(3, 1), s.detL - Vec2(2, 0));
  CHECK((moved.detR - (s.detR + Vec2(3, 1))).norm() == 0.0);
  CHECK((moved.face.detR - moved.detR).norm() == 0.0);
  CHECK(moved.face.interocularPx == doctest::Approx((moved.detL - moved.detR).norm()));
}

}  // TEST_SUITE
