#include "gazekit/eyesim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "gazekit/errors.hpp"

namespace gazekit::eyesim {

using geometry::deg2rad;
using geometry::rad2deg;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  if (sd <= 0.0) return std::clamp(mean, lo, hi);
  std::normal_distribution<double> dist(mean, sd);
  for (;;) {
    const double v = dist(rng);
    if (v >= lo && v <= hi) return v;
  }
}

double uniform(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Lid landmarks relative to the eye rotation centre in head coordinates with
// +x pointing nasally (mirrored for the left eye), y down, -z forward.
constexpr std::array<std::array<double, 3>, kLidPoints> kLidTemplate{{
    {14.0, 1.0, -8.0},    // inner corner
    {-15.0, 0.0, -6.0},   // outer corner
    {6.0, -8.0, -11.0},   // upper lid, nasal
    {-6.0, -8.0, -11.0},  // upper lid, temporal
    {6.0, 6.0, -11.0},    // lower lid, nasal
    {-6.0, 6.0, -11.0},   // lower lid, temporal
}};

const Vec3 kNoseInHead(0.0, 40.0, -30.0);
const Vec3 kForward(0.0, 0.0, -1.0);

Vec2 noisy(const Vec2& p, Rng& rng, double sigma) {
  if (sigma <= 0.0) return p;
  std::normal_distribution<double> n(0.0, sigma);
  const double dx = n(rng);
  const double dy = n(rng);
  return p + Vec2(dx, dy);
}

/// Fick angles (yaw, pitch) with R_y(yaw) R_x(pitch) (0,0,-1) = d.
Rotation3 fick_frame(double yaw, double pitch) {
  return Rotation3::about_y(yaw) * Rotation3::about_x(pitch);
}

/// Eye frame F (no torsion) such that F * q = w for unit q, w.
Rotation3 solve_frame(const Vec3& q, const Vec3& w) {
  const double a = std::hypot(q.y(), q.z());
  const double delta = std::atan2(q.z(), q.y());
  const double ratio = std::clamp(w.y() / a, -1.0, 1.0);
  const double base = std::acos(ratio);
  auto wrap = [](double x) { return std::remainder(x, 2.0 * std::numbers::pi); };
  const double p1 = wrap(base - delta);
  const double p2 = wrap(-base - delta);
  const double pitch = std::abs(p1) < std::abs(p2) ? p1 : p2;
  const Vec3 u = Rotation3::about_x(pitch) * q;
  const double yaw = std::atan2(w.x(), w.z()) - std::atan2(u.x(), u.z());
  return fick_frame(yaw, pitch);
}

}  // namespace

Rotation3 HeadPose::rotation() const {
  return Rotation3::about_y(deg2rad(yawDeg)) * Rotation3::about_x(deg2rad(pitchDeg)) *
         Rotation3::about_z(deg2rad(rollDeg));
}

Vec2 FeatureSet::iris_center() const {
  Vec2 c = Vec2::Zero();
  for (const auto& p : irisPoints) c += p;
  return c / static_cast<double>(kIrisPoints);
}

void SimConfig::validate() const {
  camera.validate();
  auto fail = [](const std::string& what) { throw DomainError("invalid SimConfig: " + what); };
  if (nPersons <= 0) fail("nPersons must be positive");
  if (samplesPerPerson <= 0) fail("samplesPerPerson must be positive");
  if (targetPlanes.empty()) fail("targetPlanes must be nonempty");
  if (targetRegion.xMax < targetRegion.xMin || targetRegion.yMax < targetRegion.yMin) {
    fail("targetRegion is inverted");
  }
  if (distanceMin <= 0.0 || distanceMax < distanceMin) fail("distance range");
  if (detectionJitterFrac < 0.0) fail("detectionJitterFrac must be >= 0");
  if (landmarkNoisePx < 0.0) fail("landmarkNoisePx must be >= 0");
  if (personVariation < 0.0) fail("personVariation must be >= 0");
}

Rng substream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
}

Person sample_person(Rng& rng, const SimConfig& cfg, int id) {
  const double s = cfg.personVariation;
  Person p;
  p.id = id;
  p.interocular = truncated_normal(rng, 63.0, 3.5, 50.0, 76.0);
  auto eye = [&] {
    PersonEye e;
    const double h = truncated_normal(rng, 0.0, 2.0 * s, -8.0, 8.0);
    const double v = truncated_normal(rng, 0.0, 2.0 * s, -8.0, 8.0);
    e.foveaOffset = Vec2(h, v);
    e.corneaPupilDist = truncated_normal(rng, 4.2, 0.4 * s, 3.0, 6.0);
    e.corneaRadius = truncated_normal(rng, 7.8, 0.25 * s, 7.0, 9.0);
    return e;
  };
  p.rightEye = eye();
  p.leftEye = eye();
  p.rightEyeInHead = Vec3(-p.interocular / 2.0, 0.0, 0.0);
  p.leftEyeInHead = Vec3(p.interocular / 2.0, 0.0, 0.0);
  return p;
}

Vec3 optical_axis(const Vec3& corneaCenter, const Vec3& pupilCenter) {
  const Vec3 d = pupilCenter - corneaCenter;
  const double n = d.norm();
  if (!(n > 0.0)) throw DomainError("cornea and pupil centres coincide");
  return d / n;
}

Rotation3 eye_frame(const Vec3& axis) {
  const Vec3 d = axis.normalized();
  const double pitch = std::asin(std::clamp(d.y(), -1.0, 1.0));
  const double yaw = std::atan2(-d.x(), -d.z());
  return fick_frame(yaw, pitch);
}

Vec3 visual_axis(const Vec3& optAxis, const Vec2& foveaOffsetDeg, const Rotation3& eyeFrame) {
  const Rotation3 local = Rotation3::about_y(deg2rad(foveaOffsetDeg.x())) *
                          Rotation3::about_x(deg2rad(foveaOffsetDeg.y()));
  const Mat3 m = eyeFrame.matrix() * local.matrix() * eyeFrame.matrix().transpose();
  return (m * optAxis).normalized();
}

const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::TargetBehindEye: return "target-behind-eye";
    case RejectReason::Eccentricity: return "eccentricity";
    case RejectReason::OutOfFrame: return "out-of-frame";
    case RejectReason::NoConvergence: return "no-convergence";
  }
  return "unknown";
}

std::variant<EyeState, Rejection> fixate(const Vec3& rotationCenter, const PersonEye& eye,
                                          int side, const Vec3& target, const Rotation3& head) {
  const Vec3 headForward = head * kForward;
  if ((target - rotationCenter).dot(headForward) <= 0.0) {
    return Rejection{RejectReason::TargetBehindEye};
  }
  const Vec2 offset(side * eye.foveaOffset.x(), eye.foveaOffset.y());
  const Rotation3 local =
      Rotation3::about_y(deg2rad(offset.x())) * Rotation3::about_x(deg2rad(offset.y()));
  const Vec3 q = local * kForward;

  Vec3 w = (target - rotationCenter).normalized();
  Rotation3 frame = solve_frame(q, w);
  bool converged = false;
  for (int it = 0; it < 50; ++it) {
    const Vec3 opt = frame * kForward;
    const Vec3 cornea = rotationCenter + kRotationToCorneaMm * opt;
    const Vec3 wNext = (target - cornea).normalized();
    const double change = (wNext - w).norm();
    w = wNext;
    frame = solve_frame(q, w);
    if (change < 1e-12) {
      converged = true;
      break;
    }
  }
  if (!converged) return Rejection{RejectReason::NoConvergence};

  EyeState s;
  s.rotationCenter = rotationCenter;
  s.opticalAxis = frame * kForward;
  s.corneaCenter = rotationCenter + kRotationToCorneaMm * s.opticalAxis;
  s.pupilCenter = s.corneaCenter + eye.corneaPupilDist * s.opticalAxis;
  s.visualAxis = frame * q;
  const double ecc = rad2deg(std::acos(std::clamp(s.visualAxis.dot(headForward), -1.0, 1.0)));
  if (ecc > kMaxEccentricityDeg) return Rejection{RejectReason::Eccentricity};
  return s;
}

std::variant<Sample, Rejection> render_sample(const Person& person, const Scene& scene,
                                               const Camera& cam, const SimConfig& cfg,
                                               Rng& rng) {
  const Rotation3 head = scene.head.rotation();
  const Vec3 eR = scene.head.position + head * person.rightEyeInHead;
  const Vec3 eL = scene.head.position + head * person.leftEyeInHead;

  auto solvedR = fixate(eR, person.rightEye, +1, scene.gazeTarget, head);
  if (auto* rej = std::get_if<Rejection>(&solvedR)) return *rej;
  auto solvedL = fixate(eL, person.leftEye, -1, scene.gazeTarget, head);
  if (auto* rej = std::get_if<Rejection>(&solvedL)) return *rej;
  const EyeState& stR = std::get<EyeState>(solvedR);
  const EyeState& stL = std::get<EyeState>(solvedL);

  // Every projected 3D point must lie in front of the camera and inside the image.
  bool inFrame = true;
  auto proj = [&](const Vec3& x) -> Vec2 {
    if (!(x.z() > 1.0)) {
      inFrame = false;
      return Vec2::Zero();
    }
    const Vec2 p = cam.project(x);
    if (!cam.contains(p)) inFrame = false;
    return p;
  };

  const double sigma = cfg.landmarkNoisePx;
  auto render_eye = [&](const EyeState& st, const PersonEye& eye, int side) {
    FeatureSet fs;
    fs.pupilCenter = proj(st.pupilCenter);
    if (cfg.illuminator) {
      const Vec3 glint3 = st.corneaCenter - eye.corneaRadius * st.corneaCenter.normalized();
      fs.glint = proj(glint3);
      fs.glintPresent = true;
    }
    const Rotation3 frame = eye_frame(st.opticalAxis);
    const Vec3 xe = frame * Vec3::UnitX();
    const Vec3 ye = frame * Vec3::UnitY();
    for (int k = 0; k < kIrisPoints; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / kIrisPoints;
      const Vec3 pt =
          st.pupilCenter + kIrisRadiusMm * (side * std::cos(phi) * xe + std::sin(phi) * ye);
      fs.irisPoints[k] = proj(pt);
    }
    for (int k = 0; k < kLidPoints; ++k) {
      const auto& t = kLidTemplate[k];
      fs.lidPoints[k] = proj(st.rotationCenter + head * Vec3(side * t[0], t[1], t[2]));
    }
    return fs;
  };

  Sample s;
  s.personId = person.id;
  s.camera = cam;
  s.gazeTarget = scene.gazeTarget;
  s.right = render_eye(stR, person.rightEye, +1);
  s.left = render_eye(stL, person.leftEye, -1);
  const Vec2 trueR = proj(stR.rotationCenter);
  const Vec2 trueL = proj(stL.rotationCenter);
  const Vec2 nose = proj(scene.head.position + head * kNoseInHead);
  if (!inFrame) return Rejection{RejectReason::OutOfFrame};

  // Noise is drawn in a fixed order after acceptance so that a rejected
  // scene consumes no noise draws.
  for (FeatureSet* fs : {&s.right, &s.left}) {
    fs->pupilCenter = noisy(fs->pupilCenter, rng, sigma);
    if (fs->glintPresent) fs->glint = noisy(fs->glint, rng, sigma);
    for (auto& p : fs->irisPoints) p = noisy(p, rng, sigma);
    for (auto& p : fs->lidPoints) p = noisy(p, rng, sigma);
  }
  const double jitterRadius = cfg.detectionJitterFrac * (trueL - trueR).norm();
  s.detR = trueR + disk_offset(rng, jitterRadius);
  s.detL = trueL + disk_offset(rng, jitterRadius);
  s.face.detR = s.detR;
  s.face.detL = s.detL;
  s.face.nose = noisy(nose, rng, sigma);
  s.face.interocularPx = (s.detL - s.detR).norm();

  s.truth.eyeRight = stR.corneaCenter;
  s.truth.eyeLeft = stL.corneaCenter;
  s.truth.foveaRight = person.rightEye.foveaOffset;
  s.truth.foveaLeft = person.leftEye.foveaOffset;
  s.truth.kRight = person.rightEye.corneaPupilDist;
  s.truth.kLeft = person.leftEye.corneaPupilDist;
  s.truth.interocular = person.interocular;
  return s;
}

GazeRay pccr_oracle(const Sample& sample, const PersonEye& person, double knownDistance,
                    bool leftEye) {
  const FeatureSet& fs = leftEye ? sample.left : sample.right;
  if (!fs.glintPresent) throw UnsupportedConfiguration("PCCR requires a glint");
  if (!(knownDistance > 0.0)) throw DomainError("known distance must be positive");
  const Camera& cam = sample.camera;
  const Vec3 cornea = geometry::back_project(fs.glint, knownDistance, cam);
  const Vec3 u = cam.pixel_ray(fs.pupilCenter).normalized();
  const double b = u.dot(cornea);
  const double disc = b * b - cornea.squaredNorm() + person.corneaPupilDist * person.corneaPupilDist;
  // Nearer intersection; a ray that misses the sphere is snapped to the tangent point.
  const double s = b - std::sqrt(std::max(disc, 0.0));
  const Vec3 pupil = s * u;
  const Vec3 opt = optical_axis(cornea, pupil);
  const int side = leftEye ? -1 : +1;
  const Vec2 offset(side * person.foveaOffset.x(), person.foveaOffset.y());
  GazeRay ray;
  ray.origin = cornea;
  ray.direction = visual_axis(opt, offset, eye_frame(opt));
  ray.frame = Frame::Real;
  return ray;
}

Scene sample_scene(Rng& rng, const SimConfig& cfg, const Person& /*person*/) {
  Scene sc;
  sc.head.yawDeg = uniform(rng, -cfg.headYawRange, cfg.headYawRange);
  sc.head.pitchDeg = uniform(rng, -cfg.headPitchRange, cfg.headPitchRange);
  sc.head.rollDeg = uniform(rng, -cfg.headRollRange, cfg.headRollRange);
  sc.head.position = Vec3(uniform(rng, -cfg.headOffsetX, cfg.headOffsetX),
                          uniform(rng, -cfg.headOffsetY, cfg.headOffsetY),
                          uniform(rng, cfg.distanceMin, cfg.distanceMax));
  const auto plane = std::uniform_int_distribution<std::size_t>(0, cfg.targetPlanes.size() - 1)(rng);
  sc.gazeTarget = Vec3(uniform(rng, cfg.targetRegion.xMin, cfg.targetRegion.xMax),
                       uniform(rng, cfg.targetRegion.yMin, cfg.targetRegion.yMax),
                       cfg.targetPlanes[plane]);
  return sc;
}

Vec2 disk_offset(Rng& rng, double radius) {
  if (radius <= 0.0) return Vec2::Zero();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = radius * std::sqrt(u(rng));
  const double a = 2.0 * std::numbers::pi * u(rng);
  return {r * std::cos(a), r * std::sin(a)};
}

Dataset generate_dataset(const SimConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.samples.reserve(static_cast<std::size_t>(cfg.nPersons) * cfg.samplesPerPerson);
  const std::int64_t maxAttempts = 20LL * cfg.samplesPerPerson;
  for (int id = 0; id < cfg.nPersons; ++id) {
    Rng rng = substream(cfg.seed, static_cast<std::uint64_t>(id));
    Person person = sample_person(rng, cfg, id);
    ds.persons.push_back(person);
    int accepted = 0;
    std::int64_t attempts = 0;
    while (accepted < cfg.samplesPerPerson) {
      if (++attempts > maxAttempts) break;
      const Scene scene = sample_scene(rng, cfg, person);
      auto result = render_sample(person, scene, cfg.camera, cfg, rng);
      if (auto* s = std::get_if<Sample>(&result)) {
        ds.samples.push_back(std::move(*s));
        ++accepted;
        ++ds.stats.accepted;
      } else {
        ++ds.stats.rejected;
      }
    }
    if (accepted < cfg.samplesPerPerson || ds.stats.rejection_rate() > 0.5) {
      std::ostringstream os;
      os << "sample rejection rate too high (" << ds.stats.rejected << " rejected, "
         << ds.stats.accepted << " accepted after person " << id
         << "); check head, target and camera ranges";
      throw NumericalError(os.str());
    }
  }
  return ds;
}

}  // namespace gazekit::eyesim
