#include "gazekit/dataset_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "gazekit/errors.hpp"

namespace gazekit::io {

using eyesim::FeatureSet;
using eyesim::Sample;
using eyesim::SimConfig;

namespace {

Json vec(const Vec2& v) { return Json::array({v.x(), v.y()}); }
Json vec(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

Vec2 vec2(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw FormatError("expected [x,y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

Vec3 vec3(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected [x,y,z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Json camera_json(const Camera& c) {
  return Json{{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"w", c.width}, {"h", c.height}};
}

Camera camera_from(const Json& j) {
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("w").get<int>();
  c.height = j.at("h").get<int>();
  return c;
}

Json features_json(const FeatureSet& f) {
  Json iris = Json::array();
  for (const auto& p : f.irisPoints) iris.push_back(vec(p));
  Json lid = Json::array();
  for (const auto& p : f.lidPoints) lid.push_back(vec(p));
  return Json{{"pupil", vec(f.pupilCenter)},
              {"glint", vec(f.glint)},
              {"glint_present", f.glintPresent},
              {"iris", iris},
              {"lid", lid}};
}

FeatureSet features_from(const Json& j) {
  FeatureSet f;
  f.pupilCenter = vec2(j.at("pupil"));
  f.glint = vec2(j.at("glint"));
  f.glintPresent = j.at("glint_present").get<bool>();
  const Json& iris = j.at("iris");
  const Json& lid = j.at("lid");
  if (iris.size() != eyesim::kIrisPoints || lid.size() != eyesim::kLidPoints) {
    throw FormatError("wrong landmark count");
  }
  for (int k = 0; k < eyesim::kIrisPoints; ++k) f.irisPoints[k] = vec2(iris[k]);
  for (int k = 0; k < eyesim::kLidPoints; ++k) f.lidPoints[k] = vec2(lid[k]);
  return f;
}

}  // namespace

Json to_json(const SimConfig& c) {
  return Json{{"n_persons", c.nPersons},
              {"samples_per_person", c.samplesPerPerson},
              {"camera", camera_json(c.camera)},
              {"target_planes", c.targetPlanes},
              {"target_region",
               {{"x_min", c.targetRegion.xMin},
                {"x_max", c.targetRegion.xMax},
                {"y_min", c.targetRegion.yMin},
                {"y_max", c.targetRegion.yMax}}},
              {"head_yaw_range", c.headYawRange},
              {"head_pitch_range", c.headPitchRange},
              {"head_roll_range", c.headRollRange},
              {"head_offset_x", c.headOffsetX},
              {"head_offset_y", c.headOffsetY},
              {"distance_min", c.distanceMin},
              {"distance_max", c.distanceMax},
              {"illuminator", c.illuminator},
              {"detection_jitter_frac", c.detectionJitterFrac},
              {"landmark_noise_px", c.landmarkNoisePx},
              {"person_variation", c.personVariation},
              {"seed", c.seed}};
}

SimConfig sim_config_from_json(const Json& j, std::initializer_list<const char*> required) {
  if (!j.is_object()) throw FormatError("simulation config must be a JSON object");
  for (const char* key : required) {
    if (!j.contains(key)) throw FormatError(std::string("missing required field '") + key + "'");
  }
  static const std::set<std::string> known{
      "n_persons",      "samples_per_person", "camera",         "target_planes",
      "target_region",  "head_yaw_range",     "head_pitch_range", "head_roll_range",
      "head_offset_x",  "head_offset_y",      "distance_min",   "distance_max",
      "illuminator",    "detection_jitter_frac", "landmark_noise_px", "person_variation",
      "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw FormatError("unknown field '" + key + "'");
  }
  SimConfig c;
  try {
    auto get = [&](const char* key, auto& out) {
      if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
    };
    get("n_persons", c.nPersons);
    get("samples_per_person", c.samplesPerPerson);
    if (j.contains("camera")) c.camera = camera_from(j.at("camera"));
    get("target_planes", c.targetPlanes);
    if (j.contains("target_region")) {
      const Json& r = j.at("target_region");
      c.targetRegion.xMin = r.at("x_min").get<double>();
      c.targetRegion.xMax = r.at("x_max").get<double>();
      c.targetRegion.yMin = r.at("y_min").get<double>();
      c.targetRegion.yMax = r.at("y_max").get<double>();
    }
    get("head_yaw_range", c.headYawRange);
    get("head_pitch_range", c.headPitchRange);
    get("head_roll_range", c.headRollRange);
    get("head_offset_x", c.headOffsetX);
    get("head_offset_y", c.headOffsetY);
    get("distance_min", c.distanceMin);
    get("distance_max", c.distanceMax);
    get("illuminator", c.illuminator);
    get("detection_jitter_frac", c.detectionJitterFrac);
    get("landmark_noise_px", c.landmarkNoisePx);
    get("person_variation", c.personVariation);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("simulation config: ") + e.what());
  }
  return c;
}

Json to_json(const Sample& s) {
  const auto& t = s.truth;
  return Json{
      {"person_id", s.personId},
      {"cam", camera_json(s.camera)},
      {"det", Json::array({vec(s.detR), vec(s.detL)})},
      {"right", features_json(s.right)},
      {"left", features_json(s.left)},
      {"face",
       {{"detL", vec(s.face.detL)},
        {"detR", vec(s.face.detR)},
        {"nose", vec(s.face.nose)},
        {"interoc_px", s.face.interocularPx}}},
      {"target_mm", vec(s.gazeTarget)},
      {"truth",
       {{"eye_r", vec(t.eyeRight)},
        {"eye_l", vec(t.eyeLeft)},
        {"person",
         {{"fovea_r", vec(t.foveaRight)},
          {"fovea_l", vec(t.foveaLeft)},
          {"kr", t.kRight},
          {"kl", t.kLeft},
          {"interoc", t.interocular}}}}}};
}

Sample sample_from_json(const Json& j) {
  Sample s;
  try {
    s.personId = j.at("person_id").get<int>();
    s.camera = camera_from(j.at("cam"));
    const Json& det = j.at("det");
    if (!det.is_array() || det.size() != 2) throw FormatError("det must hold two detections");
    s.detR = vec2(det[0]);
    s.detL = vec2(det[1]);
    s.right = features_from(j.at("right"));
    s.left = features_from(j.at("left"));
    const Json& f = j.at("face");
    s.face.detL = vec2(f.at("detL"));
    s.face.detR = vec2(f.at("detR"));
    s.face.nose = vec2(f.at("nose"));
    s.face.interocularPx = f.at("interoc_px").get<double>();
    s.gazeTarget = vec3(j.at("target_mm"));
    const Json& t = j.at("truth");
    s.truth.eyeRight = vec3(t.at("eye_r"));
    s.truth.eyeLeft = vec3(t.at("eye_l"));
    const Json& p = t.at("person");
    s.truth.foveaRight = vec2(p.at("fovea_r"));
    s.truth.foveaLeft = vec2(p.at("fovea_l"));
    s.truth.kRight = p.at("kr").get<double>();
    s.truth.kLeft = p.at("kl").get<double>();
    s.truth.interocular = p.at("interoc").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("sample: ") + e.what());
  }
  return s;
}

void write_dataset(std::ostream& os, const eyesim::Dataset& ds) {
  Json header{{"format", kDatasetFormat},
              {"config", to_json(ds.config)},
              {"stats", {{"accepted", ds.stats.accepted}, {"rejected", ds.stats.rejected}}}};
  os << header.dump() << '\n';
  for (const auto& s : ds.samples) os << to_json(s).dump() << '\n';
}

void write_dataset(const std::filesystem::path& path, const eyesim::Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset(os, ds);
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

eyesim::Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": empty dataset file");
  eyesim::Dataset ds;
  Json header = parse_json_text(line, path.string() + ":1");
  if (!header.is_object() || header.value("format", std::string()) != kDatasetFormat) {
    throw FormatError(path.string() + ": not a " + std::string(kDatasetFormat) + " file");
  }
  ds.config = sim_config_from_json(header.at("config"));
  if (header.contains("stats")) {
    ds.stats.accepted = header["stats"].value("accepted", std::int64_t{0});
    ds.stats.rejected = header["stats"].value("rejected", std::int64_t{0});
  }
  std::size_t lineNo = 1;
  while (std::getline(is, line)) {
    ++lineNo;
    if (line.empty()) continue;
    try {
      ds.samples.push_back(sample_from_json(parse_json_text(line, "")));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineNo) + ": " + e.what());
    }
  }
  if (is.bad()) throw IoError("failed reading " + path.string());
  return ds;
}

Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte is 1-based; convert to line/column.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::ostringstream os;
    if (!origin.empty()) os << origin << ": ";
    os << "JSON parse error at line " << line << ", column " << col;
    throw FormatError(os.str());
  }
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_json_text(ss.str(), path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace gazekit::io
