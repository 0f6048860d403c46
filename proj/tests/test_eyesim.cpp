#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "gazekit/dataset_io.hpp"
#include "gazekit/errors.hpp"
#include "gazekit/eyesim.hpp"

using namespace gazekit;
using namespace gazekit::eyesim;

namespace {

double angle_deg(const Vec3& a, const Vec3& b) {
  return geometry::rad2deg(std::atan2(a.cross(b).norm(), a.dot(b)));
}

SimConfig clean_config() {
  SimConfig c;
  c.landmarkNoisePx = 0.0;
  c.detectionJitterFrac = 0.0;
  return c;
}

Sample render_or_fail(const Person& p, const Scene& sc, const SimConfig& cfg) {
  Rng rng(1);
  auto r = render_sample(p, sc, cfg.camera, cfg, rng);
  REQUIRE(std::holds_alternative<Sample>(r));
  return std::get<Sample>(r);
}

bool same_person(const Person& a, const Person& b) {
  auto eq = [](const PersonEye& x, const PersonEye& y) {
    return x.foveaOffset == y.foveaOffset && x.corneaPupilDist == y.corneaPupilDist &&
           x.corneaRadius == y.corneaRadius;
  };
  return a.id == b.id && eq(a.rightEye, b.rightEye) && eq(a.leftEye, b.leftEye) &&
         a.interocular == b.interocular && a.rightEyeInHead == b.rightEyeInHead &&
         a.leftEyeInHead == b.leftEyeInHead;
}

}  // namespace

TEST_SUITE("eyesim") {

TEST_CASE("sample_person is deterministic") {
  SimConfig cfg;
  Rng a = substream(11, 3), b = substream(11, 3);
  CHECK(same_person(sample_person(a, cfg, 3), sample_person(b, cfg, 3)));
  Rng c = substream(11, 4);
  CHECK_FALSE(same_person(sample_person(a, cfg, 3), sample_person(c, cfg, 3)));
}

TEST_CASE("interocular distribution") {
  SimConfig cfg;
  Rng rng(2024);
  double sum = 0.0, lo = 1e9, hi = -1e9;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double d = sample_person(rng, cfg, i).interocular;
    sum += d;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  CHECK(sum / n >= 62.8);
  CHECK(sum / n <= 63.2);
  CHECK(lo >= 50.0);
  CHECK(hi <= 76.0);
}

TEST_CASE("person variation zero gives the mean eye") {
  SimConfig cfg;
  cfg.personVariation = 0.0;
  Rng rng(5);
  const Person p = sample_person(rng, cfg);
  CHECK(p.rightEye.foveaOffset.norm() == 0.0);
  CHECK(p.leftEye.corneaPupilDist == 4.2);
}

TEST_CASE("optical axis") {
  CHECK((optical_axis(Vec3(0, 0, 650), Vec3(0, 0, 645.8)) - Vec3(0, 0, -1)).norm() < 1e-15);
  const Vec3 a(1, 2, 600), b(3, -1, 596);
  CHECK((optical_axis(a, b) + optical_axis(b, a)).norm() < 1e-15);
}

TEST_CASE("visual axis") {
  const Vec3 opt(0, 0, -1);
  const Rotation3 frame = eye_frame(opt);
  CHECK((visual_axis(opt, Vec2(0, 0), frame) - opt).norm() < 1e-15);
  CHECK(std::abs(angle_deg(visual_axis(opt, Vec2(5, 0), frame), opt) - 5.0) < 1e-6);
  CHECK(std::abs(angle_deg(visual_axis(opt, Vec2(0, 5), frame), opt) - 5.0) < 1e-6);
  CHECK(std::abs(angle_deg(visual_axis(opt, Vec2(3, 4), frame), opt) - 5.0) < 0.01);
}

TEST_CASE("fixation with zero fovea offset passes through the target") {
  PersonEye eye;
  const Vec3 target(-80, -120, 0);
  const Rotation3 head = Rotation3::about_y(0.1);
  auto r = fixate(Vec3(30, 10, 640), eye, +1, target, head);
  REQUIRE(std::holds_alternative<EyeState>(r));
  const EyeState& s = std::get<EyeState>(r);
  const Vec3 dir = (s.pupilCenter - s.corneaCenter).normalized();
  const Vec3 w = target - s.corneaCenter;
  CHECK((w - w.dot(dir) * dir).norm() < 1e-3);
  CHECK((s.corneaCenter - s.rotationCenter).norm() == doctest::Approx(kRotationToCorneaMm));
}

TEST_CASE("fixation with a fovea offset puts the visual axis on the target") {
  PersonEye eye;
  eye.foveaOffset = Vec2(4.0, -2.0);
  const Vec3 target(50, -100, 0);
  auto r = fixate(Vec3(-30, 0, 650), eye, +1, target, Rotation3());
  REQUIRE(std::holds_alternative<EyeState>(r));
  const EyeState& s = std::get<EyeState>(r);
  CHECK(angle_deg(s.visualAxis, target - s.corneaCenter) < 1e-6);
  CHECK(std::abs(angle_deg(s.visualAxis, s.opticalAxis) - std::hypot(4.0, 2.0)) < 0.01);
}

TEST_CASE("fixation rejects targets behind the eye") {
  auto r = fixate(Vec3(0, 0, 650), PersonEye{}, +1, Vec3(0, 0, 900), Rotation3());
  REQUIRE(std::holds_alternative<Rejection>(r));
}

TEST_CASE("coaxial glint sits on the cornea centre projection") {
  const SimConfig cfg = clean_config();
  Rng rng(8);
  const Person p = sample_person(rng, cfg);
  for (int i = 0; i < 50; ++i) {
    const Scene sc = sample_scene(rng, cfg, p);
    auto r = render_sample(p, sc, cfg.camera, cfg, rng);
    if (!std::holds_alternative<Sample>(r)) continue;
    const Sample& s = std::get<Sample>(r);
    CHECK(s.right.glintPresent);
    CHECK((s.right.glint - s.camera.project(s.truth.eyeRight)).norm() < 0.05);
    CHECK((s.left.glint - s.camera.project(s.truth.eyeLeft)).norm() < 0.05);
  }
}

TEST_CASE("no illuminator means no glint and PCCR refuses") {
  SimConfig cfg = clean_config();
  cfg.illuminator = false;
  Person p;
  Scene sc;
  sc.gazeTarget = Vec3(0, -100, 0);
  const Sample s = render_or_fail(p, sc, cfg);
  CHECK_FALSE(s.right.glintPresent);
  CHECK_THROWS_AS(pccr_oracle(s, p.rightEye, s.truth.eyeRight.norm()), UnsupportedConfiguration);
}

TEST_CASE("doubling corneaPupilDist doubles the pupil-glint vector") {
  const SimConfig cfg = clean_config();
  Person p;
  Scene sc;
  sc.gazeTarget = Vec3(150, -180, 0);
  const Sample a = render_or_fail(p, sc, cfg);
  p.rightEye.corneaPupilDist *= 2.0;
  const Sample b = render_or_fail(p, sc, cfg);
  const double ra = (a.right.pupilCenter - a.right.glint).norm();
  const double rb = (b.right.pupilCenter - b.right.glint).norm();
  CHECK(rb / ra == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("PCCR oracle closes the loop") {
  SimConfig cfg = clean_config();
  cfg.nPersons = 3;
  cfg.samplesPerPerson = 30;
  const Dataset ds = generate_dataset(cfg);
  std::map<int, Person> persons;
  for (const auto& p : ds.persons) persons[p.id] = p;
  for (const auto& s : ds.samples) {
    const Person& p = persons.at(s.personId);
    const GazeRay r = pccr_oracle(s, p.rightEye, s.truth.eyeRight.norm());
    CHECK(geometry::angular_error(s.truth.eyeRight, s.gazeTarget, r) < 0.1);
    const GazeRay l = pccr_oracle(s, p.leftEye, s.truth.eyeLeft.norm(), true);
    CHECK(geometry::angular_error(s.truth.eyeLeft, s.gazeTarget, l) < 0.1);

    // Without the fovea offset the error is the size of the offset.
    PersonEye noOffset = p.rightEye;
    noOffset.foveaOffset = Vec2::Zero();
    const GazeRay z = pccr_oracle(s, noOffset, s.truth.eyeRight.norm());
    CHECK(std::abs(geometry::angular_error(s.truth.eyeRight, s.gazeTarget, z) -
                   p.rightEye.foveaOffset.norm()) < 0.15);
  }
}

TEST_CASE("wrong known distance still passes near single-plane targets") {
  SimConfig cfg = clean_config();
  cfg.nPersons = 1;
  cfg.samplesPerPerson = 40;
  cfg.personVariation = 0.0;
  const Dataset ds = generate_dataset(cfg);
  const Person& p = ds.persons.front();
  for (const auto& s : ds.samples) {
    const double d = s.truth.eyeRight.norm();
    const GazeRay exact = pccr_oracle(s, p.rightEye, d);
    const GazeRay off = pccr_oracle(s, p.rightEye, 1.1 * d);
    CHECK((off.origin - exact.origin).norm() > 50.0);
    // The far ray is nearly parallel; it still lands within a few cm.
    CHECK(geometry::miss_distance(off, s.gazeTarget) < 0.1 * d);
  }
}

TEST_CASE("dataset files are reproducible") {
  SimConfig cfg;
  cfg.nPersons = 3;
  cfg.samplesPerPerson = 20;
  cfg.seed = 42;
  std::ostringstream a, b;
  io::write_dataset(a, generate_dataset(cfg));
  io::write_dataset(b, generate_dataset(cfg));
  CHECK(a.str() == b.str());
  cfg.seed = 43;
  std::ostringstream c;
  io::write_dataset(c, generate_dataset(cfg));
  CHECK(a.str() != c.str());
}

TEST_CASE("dataset round trip through JSON Lines") {
  SimConfig cfg;
  cfg.nPersons = 2;
  cfg.samplesPerPerson = 5;
  const Dataset ds = generate_dataset(cfg);
  std::ostringstream os;
  io::write_dataset(os, ds);
  const auto path = std::filesystem::temp_directory_path() / "gazekit_test_roundtrip.jsonl";
  io::write_text_file(path, os.str());
  const Dataset back = io::read_dataset(path);
  std::ostringstream again;
  io::write_dataset(again, back);
  CHECK(os.str() == again.str());
  io::write_text_file(path, os.str().substr(0, os.str().size() / 2));
  CHECK_THROWS_AS(io::read_dataset(path), FormatError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(io::read_dataset(path), IoError);
}

TEST_CASE("single target plane") {
  SimConfig cfg;
  cfg.nPersons = 5;
  cfg.samplesPerPerson = 40;
  const Dataset ds = generate_dataset(cfg);
  for (const auto& s : ds.samples) CHECK(std::abs(s.gazeTarget.z()) < 1e-9);
}

TEST_CASE("three target planes are equally likely") {
  SimConfig cfg;
  cfg.nPersons = 50;
  cfg.samplesPerPerson = 200;
  cfg.targetPlanes = {-300.0, 0.0, 300.0};
  const Dataset ds = generate_dataset(cfg);
  std::map<double, int> counts;
  for (const auto& s : ds.samples) counts[s.gazeTarget.z()]++;
  REQUIRE(counts.size() == 3);
  for (const auto& [z, n] : counts) {
    const double f = static_cast<double>(n) / ds.samples.size();
    CHECK(f == doctest::Approx(1.0 / 3.0).epsilon(0.06));
  }
}

TEST_CASE("config validation") {
  SimConfig cfg;
  cfg.nPersons = 0;
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  cfg = SimConfig{};
  cfg.targetPlanes.clear();
  CHECK_THROWS_AS(cfg.validate(), DomainError);
  CHECK_THROWS_AS(io::sim_config_from_json(io::Json{{"n_persons", 3}}, {"samples_per_person"}),
                  FormatError);
}

}  // TEST_SUITE
