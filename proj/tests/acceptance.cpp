// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--out DIR] [--reuse] [--only 1,2,...]
//
// With --reuse, sweeps whose summary in DIR is complete are read back
// instead of rerun.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gazekit/calib.hpp"
#include "gazekit/dataset_io.hpp"
#include "gazekit/diffnet.hpp"
#include "gazekit/experiment.hpp"
#include "gazekit/eyesim.hpp"
#include "gazekit/features.hpp"
#include "gazekit/geometry.hpp"

#ifndef GAZEKIT_CLI
#define GAZEKIT_CLI "gazekit"
#endif

namespace fs = std::filesystem;
using namespace gazekit;
using Json = io::Json;
using Clock = std::chrono::steady_clock;

namespace {

struct Options {
  fs::path out = "acceptance_out";
  bool reuse = false;
  std::set<int> only;
};

int g_failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// --- sweep results -----------------------------------------------------------

struct KStats {
  double mean = NAN, se = NAN, band = NAN;
};

struct Sweep {
  Json summary;
  /// rows[value][k][person] -> per-repeat errors
  std::map<std::string, std::map<int, std::map<int, std::vector<double>>>> rows;

  const Json& point(const std::string& value) const {
    for (const auto& p : summary.at("points")) {
      if (p.at("value").get<std::string>() == value) return p;
    }
    throw std::runtime_error("no point " + value);
  }
  bool failed(const std::string& value) const { return point(value).at("failed").get<bool>(); }
  KStats k(const std::string& value, int k) const {
    for (const auto& r : point(value).at("k_results")) {
      if (r.at("k").get<int>() == k) {
        auto get = [](const Json& j) { return j.is_null() ? NAN : j.get<double>(); };
        return {get(r.at("mean_error_deg")), get(r.at("stderr_deg")), get(r.at("consistency_band_deg"))};
      }
    }
    throw std::runtime_error("no k=" + std::to_string(k) + " at " + value);
  }
  double origin(const std::string& value, const char* key) const {
    const Json& o = point(value).at("origin").at(key);
    return o.is_null() ? NAN : o.get<double>();
  }
  /// Person means over repeats at (value, k).
  std::map<int, double> person_means(const std::string& value, int k) const {
    std::map<int, double> out;
    for (const auto& [pid, reps] : rows.at(value).at(k)) {
      double s = 0.0;
      for (double e : reps) s += e;
      out[pid] = s / static_cast<double>(reps.size());
    }
    return out;
  }
};

Sweep load_sweep(const fs::path& dir, const std::string& kind) {
  Sweep s;
  s.summary = io::read_json_file(dir / (kind + ".json"));
  std::ifstream in(dir / (kind + ".csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string exp, value, pid, rep, k, err;
    std::getline(ss, exp, ',');
    std::getline(ss, value, ',');
    std::getline(ss, pid, ',');
    std::getline(ss, rep, ',');
    std::getline(ss, k, ',');
    std::getline(ss, err, ',');
    s.rows[value][std::stoi(k)][std::stoi(pid)].push_back(std::stod(err));
  }
  return s;
}

Sweep run_or_reuse(const Options& o, experiment::ExperimentSpec spec) {
  const std::string kind = experiment::to_string(spec.kind);
  spec.outDir = o.out;
  const fs::path summary = o.out / (kind + ".json");
  if (o.reuse && fs::exists(summary) && io::read_json_file(summary).at("complete").get<bool>()) {
    std::cout << "  reusing " << summary.string() << '\n';
    return load_sweep(o.out, kind);
  }
  const auto t0 = Clock::now();
  experiment::run_experiment(spec);
  std::cout << "  " << kind << " sweep took " << fmt("%.0f", seconds_since(t0)) << " s\n";
  return load_sweep(o.out, kind);
}

// --- criterion 1: geometry ---------------------------------------------------

Rotation3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return Rotation3(q.toRotationMatrix());
}

void criterion_geometry() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double orth = 0.0, roundTrip = 0.0, dz = 0.0, iso = 0.0;
  int nanCases = 0;
  const int cases = 10000;
  for (int i = 0; i < cases; ++i) {
    Camera cam{2000.0 + 1500.0 * u(rng), 2000.0 + 1500.0 * u(rng), 1023.5 + 50.0 * u(rng),
               767.5 + 50.0 * u(rng), 2048, 1536};
    // Two eyes of a head somewhere in front of the camera.
    const Vec3 mid(150.0 * u(rng), 100.0 * u(rng), 650.0 + 150.0 * u(rng));
    const Vec3 half = Rotation3::about_z(0.3 * u(rng)) * Rotation3::about_y(0.3 * u(rng)) * Vec3(31.5, 0, 0);
    const Vec2 detR = cam.project(mid - half), detL = cam.project(mid + half);
    const bool left = i % 2 == 1;
    const NormalizationContext ctx = geometry::eye_context(detR, detL, cam, left);
    orth = std::max(orth, ctx.rotation.orthogonality_error());
    const Rotation3 Rm = geometry::conversion_matrix(Vec3(u(rng), u(rng), 1.0), Vec2(u(rng), u(rng)),
                                                     cam, i % 3 == 0);
    orth = std::max(orth, Rm.orthogonality_error());

    const Vec2 p(1024.0 + 900.0 * u(rng), 768.0 + 700.0 * u(rng));
    roundTrip = std::max(roundTrip, (geometry::unwarp_point(geometry::warp_point(p, ctx), ctx) - p).norm());

    const Vec2 o2D(112.0 + 112.0 * u(rng), 56.0 + 56.0 * u(rng));
    const Vec2 d2D(0.5 * u(rng), 0.5 * u(rng));
    const double c = 1.0 + 0.4 * u(rng);
    const double rho = geometry::rough_distance(detL, detR, cam);
    const GazeRay ray = geometry::assemble_ray(o2D, d2D, c, rho, ctx.normCam);
    const geometry::Basis b = geometry::gaze_basis(ray.origin);
    dz = std::max(dz, std::abs(ray.direction.dot(b.z) - 1.0));

    const GazeRay real = geometry::denormalize_ray(ray, ctx.rotation);
    const Vec3 eye = mid - half + Vec3(3.0 * u(rng), 3.0 * u(rng), 3.0 * u(rng));
    const Vec3 target(200.0 * u(rng), 150.0 * u(rng) - 100.0, 100.0 * u(rng));
    const double e0 = geometry::angular_error(eye, target, real);
    const double m0 = geometry::miss_distance(real, target);
    const Rotation3 Q = random_rotation(rng);
    const Vec3 t(100.0 * u(rng), 100.0 * u(rng), 100.0 * u(rng));
    GazeRay moved = real;
    moved.origin = Q * real.origin + t;
    moved.direction = Q * real.direction;
    const double e1 = geometry::angular_error(Q * eye + t, Q * target + t, moved);
    const double m1 = geometry::miss_distance(moved, Q * target + t);
    if (std::isnan(e0) != std::isnan(e1)) {
      ++nanCases;
    } else if (!std::isnan(e0)) {
      iso = std::max(iso, std::abs(e0 - e1));
    }
    iso = std::max(iso, std::abs(m0 - m1));
  }
  const double secs = seconds_since(t0);
  const bool pass = orth < 1e-9 && roundTrip < 1e-9 && dz < 1e-12 && iso < 1e-9 && nanCases == 0 &&
                    secs < 10.0;
  std::ostringstream d;
  d << cases << " cases: orthogonality " << orth << ", warp round trip " << roundTrip << " px, |d.z-1| "
    << dz << ", isometry " << iso << ", " << fmt("%.2f", secs) << " s";
  report(1, pass, d.str());
}

// --- criterion 2: gradients --------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  const double worst = experiment::gradient_check_suite(20, 1);
  const double secs = seconds_since(t0);
  report(2, worst < 1e-4 && secs < 60.0,
         "max relative error " + fmt("%.3g", worst) + " over 20 instances, " + fmt("%.1f", secs) + " s");
}

// --- criterion 3: simulator closure ------------------------------------------

void criterion_simulator() {
  eyesim::SimConfig cfg;
  cfg.nPersons = 10;
  cfg.samplesPerPerson = 100;
  cfg.landmarkNoisePx = 0.0;
  cfg.seed = 77;
  const eyesim::Dataset ds = eyesim::generate_dataset(cfg);
  std::map<int, const eyesim::Person*> persons;
  for (const auto& p : ds.persons) persons[p.id] = &p;
  double sum = 0.0, worstGlint = 0.0;
  int n = 0;
  for (const auto& s : ds.samples) {
    const eyesim::Person& person = *persons.at(s.personId);
    for (int e = 0; e < 2; ++e) {
      const bool left = e == 1;
      const Vec3& eye = left ? s.truth.eyeLeft : s.truth.eyeRight;
      const eyesim::FeatureSet& fs = left ? s.left : s.right;
      const GazeRay ray = eyesim::pccr_oracle(s, left ? person.leftEye : person.rightEye, eye.norm(), left);
      sum += geometry::angular_error(eye, s.gazeTarget, ray);
      ++n;
      worstGlint = std::max(worstGlint, (fs.glint - s.camera.project(eye)).norm());
    }
  }
  const double mean = sum / n;
  report(3, ds.samples.size() == 1000 && mean < 0.1 && worstGlint < 0.05,
         std::to_string(ds.samples.size()) + " samples: PCCR mean error " + fmt("%.2e", mean) +
             " deg, worst glint offset " + fmt("%.2e", worstGlint) + " px");
}

// --- criteria 4, 5, 6, 10: N sweep and k sweep ------------------------------

void criteria_nparams(const Options& o, bool want4, bool want5, bool want10, bool want6) {
  auto spec = experiment::default_spec(experiment::Kind::NParams, 1);
  spec.ks = {9, 16};
  const Sweep s = run_or_reuse(o, spec);
  const std::vector<std::string> Ns{"0", "1", "2", "3", "4", "5"};

  if (want4) {
    if (s.failed("3")) {
      report(4, false, "N=3 training failed");
    } else {
      const KStats unc = s.k("3", 0), cal = s.k("3", 9);
      const auto m0 = s.person_means("3", 0), m9 = s.person_means("3", 9);
      int improved = 0;
      for (const auto& [pid, e] : m9) improved += e < m0.at(pid) ? 1 : 0;
      const double frac = static_cast<double>(improved) / m9.size();
      const bool ratioOk = cal.mean + cal.band <= 0.5 * unc.mean;
      std::ostringstream d;
      d << "uncalibrated " << fmt("%.3f", unc.mean) << " deg, k=9 " << fmt("%.3f", cal.mean) << " +- "
        << fmt("%.3f", cal.band) << " deg (ratio " << fmt("%.3f", cal.mean / unc.mean) << "), "
        << improved << "/" << m9.size() << " persons improve";
      report(4, ratioOk && frac >= 0.95, d.str());
    }
  }

  if (want5) {
    std::vector<double> e;
    bool anyFailed = false;
    for (const auto& n : Ns) {
      anyFailed |= s.failed(n);
      e.push_back(anyFailed ? NAN : s.k(n, 16).mean);
    }
    std::ostringstream d;
    d << "k=16 errors:";
    for (std::size_t i = 0; i < e.size(); ++i) d << " N" << i << "=" << fmt("%.3f", e[i]);
    const double plateau = (e[3] - e[5]) / e[3];
    d << "; plateau " << fmt("%.3f", plateau);
    const bool pass = !anyFailed && e[0] > e[1] && e[1] > e[2] && e[2] >= e[3] && plateau < 0.10;
    report(5, pass, d.str());
  }

  if (want10) {
    const Json& p = s.point("3");
    if (!p.contains("latent_r2")) {
      report(10, false, "no latent R2 for N=3");
    } else {
      const auto r2 = p.at("latent_r2").get<std::vector<double>>();
      static const char* names[] = {"R.h", "R.v", "R.K", "L.h", "L.v", "L.K"};
      std::ostringstream d;
      d << "R2";
      bool pass = r2.size() == 6;
      for (std::size_t i = 0; i < r2.size(); ++i) {
        d << " " << names[i] << "=" << fmt("%.3f", r2[i]);
        pass = pass && r2[i] > 0.8;
      }
      report(10, pass, d.str());
    }
  }

  if (want6) {
    auto ks = experiment::default_spec(experiment::Kind::KSweep, 1);
    ks.values = {"1", "2", "4", "8", "16", "32", "64"};
    ks.model = o.out / "nparams_3.model.json";
    const Sweep k = run_or_reuse(o, ks);
    std::vector<KStats> st;
    for (const auto& v : ks.values) st.push_back(k.k(v, std::stoi(v)));
    std::ostringstream d;
    d << "k:";
    bool mono = true;
    for (std::size_t i = 0; i < st.size(); ++i) {
      d << " " << ks.values[i] << "=" << fmt("%.3f", st[i].mean) << "(" << fmt("%.3f", st[i].se) << ")";
      if (i > 0) {
        const double tol = std::hypot(st[i - 1].se, st[i].se);
        mono = mono && st[i].mean <= st[i - 1].mean + tol;
      }
    }
    const double band = std::max(st.front().band, st.back().band);
    const double drop = st.front().mean - st.back().mean;
    d << "; k1-k64 " << fmt("%.3f", drop) << " vs band " << fmt("%.3f", band);
    report(6, mono && drop >= band, d.str());
  }
}

// --- criterion 7: distance modes ---------------------------------------------

void criterion_distmode(const Options& o) {
  const auto spec = experiment::default_spec(experiment::Kind::DistMode, 1);
  const Sweep s = run_or_reuse(o, spec);
  for (const auto& v : spec.values) {
    if (s.failed(v)) {
      report(7, false, v + " training failed");
      return;
    }
  }
  const KStats none0 = s.k("none", 0), pe0 = s.k("per-eye", 0), eo0 = s.k("eyes-only", 0),
               ef0 = s.k("eyes-and-face", 0);
  const KStats none9 = s.k("none", 9), pe9 = s.k("per-eye", 9), eo9 = s.k("eyes-only", 9),
               ef9 = s.k("eyes-and-face", 9);
  const double bEfEo = std::max(ef9.band, eo9.band);
  const double bEoPe = std::max(eo9.band, pe9.band);
  const bool o1 = ef0.mean + bEfEo <= eo0.mean;
  const bool o2 = eo0.mean + bEoPe <= pe0.mean;
  const bool o3 = std::abs(pe0.mean - none0.mean) <= 0.1 * none0.mean;
  const double gap0 = none0.mean - ef0.mean, gap9 = none9.mean - ef9.mean;
  const double shrink = 1.0 - gap9 / gap0;
  const bool o4 = gap0 > 0.0 && shrink >= 0.5;
  std::ostringstream d;
  d << "uncalibrated none " << fmt("%.3f", none0.mean) << ", per-eye " << fmt("%.3f", pe0.mean)
    << ", eyes-only " << fmt("%.3f", eo0.mean) << ", eyes-and-face " << fmt("%.3f", ef0.mean)
    << " (bands " << fmt("%.3f", bEfEo) << ", " << fmt("%.3f", bEoPe) << "); gap " << fmt("%.3f", gap0)
    << " -> " << fmt("%.3f", gap9) << " at k=9 (shrink " << fmt("%.2f", shrink) << ")";
  d << " [" << (o1 ? "ok" : "no") << " " << (o2 ? "ok" : "no") << " " << (o3 ? "ok" : "no") << " "
    << (o4 ? "ok" : "no") << "]";
  report(7, o1 && o2 && o3 && o4, d.str());
}

// --- criteria 8, 9: origins --------------------------------------------------

void criterion_depth(const Options& o) {
  const Sweep s = run_or_reuse(o, experiment::default_spec(experiment::Kind::DepthPlanes, 1));
  if (s.failed("single") || s.failed("three")) {
    report(8, false, "training failed");
    return;
  }
  const double single = s.origin("single", "median_ray_to_eye_mm");
  const double three = s.origin("three", "median_ray_to_eye_mm");
  std::ostringstream d;
  d << "median ray-to-eye distance: single plane " << fmt("%.2f", single) << " mm, three planes "
    << fmt("%.2f", three) << " mm (ratio " << fmt("%.2f", single / three) << ")";
  report(8, single >= 3.0 * three, d.str());
}

void criterion_iris(const Options& o) {
  const Sweep s = run_or_reuse(o, experiment::default_spec(experiment::Kind::IrisAnchor, 1));
  if (s.failed("off") || s.failed("on")) {
    report(9, false, "training failed");
    return;
  }
  const double off = s.origin("off", "depth_error_iqr_mm");
  const double on = s.origin("on", "depth_error_iqr_mm");
  const double red = 1.0 - on / off;
  std::ostringstream d;
  d << "origin distance IQR: off " << fmt("%.2f", off) << " mm, on " << fmt("%.2f", on) << " mm (reduction "
    << fmt("%.2f", red) << ")";
  report(9, red >= 0.30, d.str());
}

// --- criterion 11: determinism -----------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + GAZEKIT_CLI + "\" " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

void criterion_determinism(const Options& o) {
  const fs::path dir = o.out / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const char* name) { return (dir / name).string(); };
  io::write_text_file(dir / "sim.json", R"({"n_persons": 4, "samples_per_person": 60, "seed": 5})");
  io::write_text_file(dir / "train.json", R"({"epochs": 3, "batch_size": 32, "seed": 9})");
  const Json exp = {
      {"kind", "ksweep"},
      {"values", {"1", "4"}},
      {"bench",
       {{"train", {{"n_persons", 6}, {"samples_per_person", 50}}},
        {"eval", {{"n_persons", 3}, {"samples_per_person", 40}}},
        {"pool_size", 10},
        {"training", {{"epochs", 2}, {"batch_size", 32}}}}},
      {"policy", {{"min_repeats", 3}, {"max_repeats", 3}}}};
  io::write_text_file(dir / "exp.json", exp.dump(2));

  std::vector<std::string> diffs;
  int rc = 0;
  for (const char* tag : {"a", "b"}) {
    const std::string t(tag);
    rc |= run("simulate --config " + p("sim.json") + " --out " + p("") + "ds_" + t + ".jsonl");
    rc |= run("train --data " + p("ds_a.jsonl") + " --config " + p("train.json") + " --out " + p("") +
              "model_" + t + ".json");
    rc |= run("evaluate --model " + p("model_a.json") + " --data " + p("ds_a.jsonl") + " --out " + p("") +
              "eval_" + t);
    rc |= run("experiment --config " + p("exp.json") + " --out " + p("") + "exp_" + t);
  }
  auto same = [&](const std::string& a, const std::string& b) {
    if (!fs::exists(dir / a) || slurp(dir / a) != slurp(dir / b)) diffs.push_back(a + " vs " + b);
  };
  same("ds_a.jsonl", "ds_b.jsonl");
  same("model_a.json", "model_b.json");
  same("model_a.report.json", "model_b.report.json");
  same("model_a.loss.csv", "model_b.loss.csv");
  same("eval_a/eval.csv", "eval_b/eval.csv");
  same("eval_a/eval.json", "eval_b/eval.json");
  same("exp_a/ksweep.csv", "exp_b/ksweep.csv");
  same("exp_a/ksweep.json", "exp_b/ksweep.json");
  std::string d = "datasets, models, reports and metric CSVs compared byte for byte";
  if (rc != 0) d += "; a command failed";
  for (const auto& x : diffs) d += "; differs: " + x;
  report(11, rc == 0 && diffs.empty(), d);
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      o.out = argv[++i];
    } else if (a == "--reuse") {
      o.reuse = true;
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string t;
      while (std::getline(ss, t, ',')) o.only.insert(std::stoi(t));
    } else {
      std::cerr << "usage: acceptance [--out DIR] [--reuse] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(o.out);
  auto want = [&](int c) { return o.only.empty() || o.only.count(c) > 0; };
  const auto t0 = Clock::now();
  try {
    if (want(1)) criterion_geometry();
    if (want(2)) criterion_gradients();
    if (want(3)) criterion_simulator();
    if (want(11)) criterion_determinism(o);
    if (want(8)) criterion_depth(o);
    if (want(9)) criterion_iris(o);
    if (want(4) || want(5) || want(6) || want(10)) criteria_nparams(o, want(4), want(5), want(10), want(6));
    if (want(7)) criterion_distmode(o);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed; total %.0f s\n", g_failures, seconds_since(t0));
  return g_failures == 0 ? 0 : 1;
}
