#pragma once

// Synthetic PCCR eye-model data generator.
//
// Each eye is a rotation centre E, a spherical cornea whose centre sits a
// fixed distance in front of E along the optical axis, and a pupil a
// person-specific distance further along the same axis. The visual axis is
// the optical axis rotated by the person's fovea offset and passes through
// the cornea centre. A single illuminator is collocated with the camera.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "gazekit/geometry.hpp"

namespace gazekit::eyesim {

inline constexpr int kIrisPoints = 8;
inline constexpr int kLidPoints = 6;
inline constexpr double kIrisRadiusMm = 6.0;
/// Eye rotation centre to cornea centre.
inline constexpr double kRotationToCorneaMm = 5.3;
inline constexpr double kMaxEccentricityDeg = 60.0;

struct PersonEye {
  /// Horizontal and vertical offset of the visual axis, degrees.
  Vec2 foveaOffset = Vec2::Zero();
  double corneaPupilDist = 4.2;
  double corneaRadius = 7.8;
};

struct Person {
  int id = 0;
  PersonEye rightEye;
  PersonEye leftEye;
  double interocular = kMeanInterocularMm;
  /// Eye rotation centres in the head frame.
  Vec3 rightEyeInHead = Vec3(-kMeanInterocularMm / 2, 0, 0);
  Vec3 leftEyeInHead = Vec3(kMeanInterocularMm / 2, 0, 0);
};

struct HeadPose {
  double yawDeg = 0.0;
  double pitchDeg = 0.0;
  double rollDeg = 0.0;
  Vec3 position = Vec3(0, 0, 650);

  Rotation3 rotation() const;
};

struct Scene {
  HeadPose head;
  Vec3 gazeTarget = Vec3::Zero();
};

struct FeatureSet {
  Vec2 pupilCenter = Vec2::Zero();
  Vec2 glint = Vec2::Zero();
  bool glintPresent = false;
  std::array<Vec2, kIrisPoints> irisPoints{};
  std::array<Vec2, kLidPoints> lidPoints{};

  Vec2 iris_center() const;
};

struct FaceFeatures {
  Vec2 detL = Vec2::Zero();
  Vec2 detR = Vec2::Zero();
  Vec2 nose = Vec2::Zero();
  double interocularPx = 0.0;
};

struct SampleTruth {
  /// Cornea centres; the visual axes pass through them.
  Vec3 eyeRight = Vec3::Zero();
  Vec3 eyeLeft = Vec3::Zero();
  Vec2 foveaRight = Vec2::Zero();
  Vec2 foveaLeft = Vec2::Zero();
  double kRight = 0.0;
  double kLeft = 0.0;
  double interocular = 0.0;
};

struct Sample {
  int personId = 0;
  Camera camera;
  Vec2 detR = Vec2::Zero();
  Vec2 detL = Vec2::Zero();
  FeatureSet right;
  FeatureSet left;
  FaceFeatures face;
  Vec3 gazeTarget = Vec3::Zero();
  SampleTruth truth;
};

struct Rect {
  double xMin = -200, xMax = 200, yMin = -250, yMax = 50;
};

struct SimConfig {
  int nPersons = 200;
  int samplesPerPerson = 300;
  Camera camera{3679.0, 3679.0, 1023.5, 767.5, 2048, 1536};
  /// Target z coordinates in camera space, mm.
  std::vector<double> targetPlanes{0.0};
  Rect targetRegion;
  double headYawRange = 15.0;    ///< +- degrees
  double headPitchRange = 10.0;  ///< +- degrees
  double headRollRange = 5.0;    ///< +- degrees
  double headOffsetX = 60.0;     ///< +- mm
  double headOffsetY = 40.0;     ///< +- mm
  double distanceMin = 550.0;
  double distanceMax = 750.0;
  bool illuminator = true;
  double detectionJitterFrac = 0.03;
  /// Gaussian landmark noise, real-image pixels.
  double landmarkNoisePx = 0.05;
  /// Scales the spread of the per-eye personal parameters; 0 gives every
  /// person the population-mean eye.
  double personVariation = 1.0;
  std::uint64_t seed = 1;

  /// Throws DomainError on invalid settings.
  void validate() const;
};

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream), used for per-person substreams.
Rng substream(std::uint64_t seed, std::uint64_t stream);

Person sample_person(Rng& rng, const SimConfig& cfg, int id = 0);

/// Unit vector from the cornea centre through the pupil centre.
Vec3 optical_axis(const Vec3& corneaCenter, const Vec3& pupilCenter);

/// Frame whose -z axis is `axis` and whose x axis is perpendicular to the
/// camera y-axis (no torsion).
Rotation3 eye_frame(const Vec3& axis);

/// Optical axis rotated by the horizontal offset about the eye-frame vertical
/// axis, then by the vertical offset about the horizontal axis.
Vec3 visual_axis(const Vec3& optAxis, const Vec2& foveaOffsetDeg, const Rotation3& eyeFrame);

/// Eye state solved so the visual axis passes through a target.
struct EyeState {
  Vec3 rotationCenter;
  Vec3 corneaCenter;
  Vec3 pupilCenter;
  Vec3 opticalAxis;
  Vec3 visualAxis;
};

enum class RejectReason : std::uint8_t { TargetBehindEye, Eccentricity, OutOfFrame, NoConvergence };
const char* to_string(RejectReason r);

struct Rejection {
  RejectReason reason;
};

/// Solves the fixation for one eye. `side` is +1 for the right eye, -1 for the left.
std::variant<EyeState, Rejection> fixate(const Vec3& rotationCenter, const PersonEye& eye,
                                          int side, const Vec3& target, const Rotation3& head);

/// Renders one observation. Landmark noise and detection jitter are drawn from `rng`.
std::variant<Sample, Rejection> render_sample(const Person& person, const Scene& scene,
                                               const Camera& cam, const SimConfig& cfg, Rng& rng);

/// Model-based reference: cornea centre behind the glint at `knownDistance`,
/// pupil on the sphere of radius corneaPupilDist around it, then the fovea
/// offset. `leftEye` selects which feature set is used.
GazeRay pccr_oracle(const Sample& sample, const PersonEye& person, double knownDistance,
                    bool leftEye = false);

/// Random scene for `person` drawn from the configured ranges.
Scene sample_scene(Rng& rng, const SimConfig& cfg, const Person& person);

struct SimStats {
  std::int64_t accepted = 0;
  std::int64_t rejected = 0;
  double rejection_rate() const {
    const auto total = accepted + rejected;
    return total == 0 ? 0.0 : static_cast<double>(rejected) / static_cast<double>(total);
  }
};

struct Dataset {
  SimConfig config;
  std::vector<Sample> samples;
  std::vector<Person> persons;
  SimStats stats;
};

/// nPersons x samplesPerPerson accepted samples, reproducible from cfg.seed.
/// Throws NumericalError if more than half of the attempts are rejected.
Dataset generate_dataset(const SimConfig& cfg);

/// Uniform offset in a disk of the given radius.
Vec2 disk_offset(Rng& rng, double radius);

}  // namespace gazekit::eyesim
