#include "gazekit/experiment.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "gazekit/dataset_io.hpp"
#include "gazekit/errors.hpp"
#include "gazekit/log.hpp"

namespace gazekit::experiment {

using Json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kEvalSeedOffset = 1000003;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL ^ (b + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Json num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

BenchmarkConfig default_benchmark(std::uint64_t seed) {
  BenchmarkConfig b;
  b.train.seed = seed;
  b.eval.nPersons = 40;
  b.eval.samplesPerPerson = 64 + 100;
  b.eval.seed = seed + kEvalSeedOffset;
  b.poolSize = 64;
  b.training.seed = seed;
  return b;
}

BenchmarkConfig depth_benchmark(std::uint64_t seed, bool threePlanes) {
  BenchmarkConfig b = default_benchmark(seed);
  const std::vector<double> three{-300.0, 0.0, 300.0};
  b.train.personVariation = 0.0;
  b.train.targetPlanes = threePlanes ? three : std::vector<double>{0.0};
  b.eval.personVariation = 0.0;
  b.eval.targetPlanes = three;
  b.eval.samplesPerPerson = 100;
  b.poolSize = 0;
  b.training.arch.calibDims = 0;
  return b;
}

Json to_json(const BenchmarkConfig& b) {
  return Json{{"train", io::to_json(b.train)},
              {"eval", io::to_json(b.eval)},
              {"pool_size", b.poolSize},
              {"training", trainer::to_json(b.training)}};
}

BenchmarkConfig benchmark_from_json(const Json& j, const BenchmarkConfig& base) {
  if (!j.is_object()) throw FormatError("bench must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "train" && key != "eval" && key != "pool_size" && key != "training") {
      throw FormatError("unknown field 'bench." + key + "'");
    }
  }
  Json merged = to_json(base);
  merged.update(j, true);
  BenchmarkConfig b;
  b.train = io::sim_config_from_json(merged.at("train"));
  b.eval = io::sim_config_from_json(merged.at("eval"));
  b.poolSize = merged.at("pool_size").get<int>();
  b.training = trainer::train_config_from_json(merged.at("training"));
  if (b.poolSize < 0 || b.poolSize >= b.eval.samplesPerPerson) {
    throw FormatError("bench.pool_size must leave at least one test sample per person");
  }
  return b;
}

std::vector<EvalPerson> split_eval(const eyesim::Dataset& ds, int poolSize) {
  std::map<int, EvalPerson> byId;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const eyesim::Sample& s = ds.samples[i];
    EvalPerson& p = byId[s.personId];
    p.personId = s.personId;
    NormalizedSample n = features::normalize(s, static_cast<int>(i));
    if (static_cast<int>(p.pool.size()) < poolSize) {
      p.pool.push_back(std::move(n));
    } else {
      p.test.push_back(std::move(n));
    }
  }
  std::vector<EvalPerson> out;
  for (auto& [id, p] : byId) {
    if (p.test.empty()) throw DomainError("person " + std::to_string(id) + " has no test samples");
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<double> KResult::person_means() const {
  std::vector<double> out;
  for (const auto& row : mu) out.push_back(mean_of(row));
  return out;
}

Evaluator::Evaluator(const diffnet::ModelParams& theta, std::span<const EvalPerson> persons)
    : theta_(&theta), persons_(persons) {
  test_.reserve(persons.size());
  for (const EvalPerson& p : persons) test_.emplace_back(theta, p.test);
}

std::vector<calib::SampleError> Evaluator::test_errors(std::size_t person,
                                                       std::span<const double> p) const {
  return calib::sample_errors(test_.at(person), persons_[person].test, p);
}

KResult Evaluator::run(int k, std::span<const double> pInit, const TrialPolicy& policy,
                       std::uint64_t seed, const TrialSink& sink) const {
  if (k < 0) throw DomainError("k must be >= 0");
  KResult res;
  res.k = k;
  const std::size_t M = persons_.size();
  res.mu.assign(M, {});
  for (const EvalPerson& p : persons_) res.personIds.push_back(p.personId);
  bool deterministic = k == 0;
  for (const EvalPerson& p : persons_) {
    if (k > 0 && static_cast<std::size_t>(k) > p.pool.size()) {
      throw DomainError("k = " + std::to_string(k) + " exceeds the calibration pool of person " +
                        std::to_string(p.personId));
    }
  }
  if (k > 0 && std::all_of(persons_.begin(), persons_.end(), [&](const EvalPerson& p) {
        return static_cast<std::size_t>(k) == p.pool.size();
      })) {
    deterministic = true;
  }

  std::vector<double> repeatMeans;
  double pooledSum = 0.0;
  std::size_t pooledCount = 0;
  std::vector<NormalizedSample> cal;
  for (int r = 0; r < policy.maxRepeats; ++r) {
    double sumPersons = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const EvalPerson& person = persons_[m];
      std::vector<double> p(pInit.begin(), pInit.end());
      if (k > 0) {
        eyesim::Rng rng = eyesim::substream(
            mix(seed, static_cast<std::uint64_t>(k)),
            static_cast<std::uint64_t>(person.personId) * 1000003ULL + static_cast<std::uint64_t>(r));
        std::vector<std::size_t> idx(person.pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < k; ++i) {
          std::uniform_int_distribution<std::size_t> u(i, idx.size() - 1);
          std::swap(idx[i], idx[u(rng)]);
        }
        std::sort(idx.begin(), idx.begin() + k);
        cal.clear();
        for (int i = 0; i < k; ++i) cal.push_back(person.pool[idx[i]]);
        p = calib::calibrate(*theta_, pInit, cal).p;
      }
      const auto errs = test_errors(m, p);
      double s = 0.0;
      int n = 0;
      for (const auto& e : errs) {
        if (!std::isfinite(e.errorDeg)) continue;
        s += e.errorDeg;
        ++n;
      }
      const double mu = n > 0 ? s / n : std::numeric_limits<double>::quiet_NaN();
      pooledSum += s;
      pooledCount += static_cast<std::size_t>(n);
      res.mu[m].push_back(mu);
      sumPersons += mu;
      if (sink) sink({person.personId, r, k, mu});
    }
    repeatMeans.push_back(sumPersons / static_cast<double>(M));
    res.repeats = r + 1;
    if (deterministic) break;
    if (res.repeats >= std::max(2, policy.minRepeats)) {
      const double m = mean_of(repeatMeans);
      double ss = 0.0;
      for (double v : repeatMeans) ss += (v - m) * (v - m);
      const double se = std::sqrt(ss / (res.repeats - 1) / res.repeats);
      if (se < policy.targetStdErrDeg) break;
    }
  }
  res.meanDeg = mean_of(repeatMeans);
  res.pooledMeanDeg = pooledCount > 0 ? pooledSum / static_cast<double>(pooledCount)
                                      : std::numeric_limits<double>::quiet_NaN();
  if (res.repeats >= 2) {
    double ss = 0.0;
    for (double v : repeatMeans) ss += (v - res.meanDeg) * (v - res.meanDeg);
    res.stdErrDeg = std::sqrt(ss / (res.repeats - 1) / res.repeats);
    res.bandDeg = calib::consistency_band(res.mu);
  }
  return res;
}

OriginStats Evaluator::origins(std::span<const double> p) const {
  std::vector<double> ray, dist, depth;
  for (std::size_t m = 0; m < persons_.size(); ++m) {
    for (const auto& e : test_errors(m, p)) {
      for (int eye = 0; eye < 2; ++eye) {
        ray.push_back(e.rayToEye[eye]);
        dist.push_back(e.originDistance[eye]);
        depth.push_back(e.originDepthError[eye]);
      }
    }
  }
  OriginStats s;
  s.medianRayToEyeMm = calib::quantile(ray, 0.5);
  s.medianOriginDistanceMm = calib::quantile(dist, 0.5);
  s.medianDepthErrorMm = calib::quantile(depth, 0.5);
  s.depthErrorIqrMm = calib::quantile(depth, 0.75) - calib::quantile(depth, 0.25);
  return s;
}

std::vector<double> ols_r2(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows() || X.rows() <= X.cols() + 1) {
    throw DomainError("least squares needs more rows than regressors");
  }
  Eigen::MatrixXd A(X.rows(), X.cols() + 1);
  A.leftCols(X.cols()) = X;
  A.col(X.cols()).setOnes();
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  std::vector<double> r2;
  for (long c = 0; c < Y.cols(); ++c) {
    const Eigen::VectorXd y = Y.col(c);
    const Eigen::VectorXd beta = qr.solve(y);
    const double ssRes = (A * beta - y).squaredNorm();
    const double ssTot = (y.array() - y.mean()).square().sum();
    r2.push_back(ssTot > 0.0 ? 1.0 - ssRes / ssTot : std::numeric_limits<double>::quiet_NaN());
  }
  return r2;
}

std::vector<double> latent_r2(const trainer::TrainReport& report,
                              std::span<const eyesim::Person> persons) {
  std::map<int, const eyesim::Person*> byId;
  for (const auto& p : persons) byId[p.id] = &p;
  const long M = report.P.rows();
  Eigen::MatrixXd Y(M, 6);
  for (long m = 0; m < M; ++m) {
    const auto it = byId.find(report.personIds[m]);
    if (it == byId.end()) {
      throw DomainError("no ground truth for person " + std::to_string(report.personIds[m]));
    }
    const eyesim::Person& p = *it->second;
    Y.row(m) << p.rightEye.foveaOffset.x(), p.rightEye.foveaOffset.y(), p.rightEye.corneaPupilDist,
        p.leftEye.foveaOffset.x(), p.leftEye.foveaOffset.y(), p.leftEye.corneaPupilDist;
  }
  return ols_r2(report.P, Y);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        {
          std::lock_guard<std::mutex> lock(mu);
          if (first) return;
        }
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

const char* to_string(Kind k) {
  switch (k) {
    case Kind::NParams: return "nparams";
    case Kind::KSweep: return "ksweep";
    case Kind::DistMode: return "distmode";
    case Kind::DepthPlanes: return "depthplanes";
    case Kind::IrisAnchor: return "irisanchor";
    case Kind::GradCheck: return "gradcheck";
  }
  return "unknown";
}

Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::NParams, Kind::KSweep, Kind::DistMode, Kind::DepthPlanes, Kind::IrisAnchor,
                 Kind::GradCheck}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("unknown experiment kind '" + s + "'");
}

ExperimentSpec default_spec(Kind kind, std::uint64_t seed) {
  ExperimentSpec s;
  s.kind = kind;
  s.seed = seed;
  s.bench = default_benchmark(seed);
  switch (kind) {
    case Kind::NParams:
      s.values = {"0", "1", "2", "3", "4", "5"};
      s.ks = {16};
      break;
    case Kind::KSweep:
      s.values = {"1", "2", "4", "8", "9", "16", "32", "64"};
      break;
    case Kind::DistMode:
      s.values = {"none", "per-eye", "eyes-only", "eyes-and-face"};
      s.ks = {9};
      break;
    case Kind::DepthPlanes:
      s.values = {"single", "three"};
      s.bench = depth_benchmark(seed, true);
      break;
    case Kind::IrisAnchor:
      s.values = {"off", "on"};
      s.bench = depth_benchmark(seed, true);
      break;
    case Kind::GradCheck:
      s.values = {"20"};
      break;
  }
  return s;
}

ExperimentSpec spec_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("experiment spec must be a JSON object");
  static const std::set<std::string> known{"kind",  "values",        "ks",           "bench",
                                           "policy", "train_dataset", "eval_dataset", "model",
                                           "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw FormatError("unknown field '" + key + "'");
  }
  if (!j.contains("kind")) throw FormatError("missing required field 'kind'");
  try {
    const Kind kind = parse_kind(j.at("kind").get<std::string>());
    const std::uint64_t seed = j.value("seed", std::uint64_t{1});
    ExperimentSpec s = default_spec(kind, seed);
    if (j.contains("values")) {
      s.values.clear();
      for (const auto& v : j.at("values")) {
        s.values.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      }
    }
    if (j.contains("ks")) s.ks = j.at("ks").get<std::vector<int>>();
    if (j.contains("bench")) s.bench = benchmark_from_json(j.at("bench"), s.bench);
    if (j.contains("policy")) {
      const Json& p = j.at("policy");
      s.policy.minRepeats = p.value("min_repeats", s.policy.minRepeats);
      s.policy.maxRepeats = p.value("max_repeats", s.policy.maxRepeats);
      s.policy.targetStdErrDeg = p.value("target_stderr_deg", s.policy.targetStdErrDeg);
    }
    if (j.contains("train_dataset")) s.trainDataset = j.at("train_dataset").get<std::string>();
    if (j.contains("eval_dataset")) s.evalDataset = j.at("eval_dataset").get<std::string>();
    if (j.contains("model")) s.model = j.at("model").get<std::string>();
    if (s.values.empty()) throw FormatError("experiment needs at least one sweep value");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("experiment spec: ") + e.what());
  }
}

Json to_json(const ExperimentSpec& s) {
  Json j{{"kind", to_string(s.kind)},
         {"values", s.values},
         {"ks", s.ks},
         {"bench", to_json(s.bench)},
         {"policy",
          {{"min_repeats", s.policy.minRepeats},
           {"max_repeats", s.policy.maxRepeats},
           {"target_stderr_deg", s.policy.targetStdErrDeg}}},
         {"seed", s.seed}};
  if (s.trainDataset) j["train_dataset"] = s.trainDataset->string();
  if (s.evalDataset) j["eval_dataset"] = s.evalDataset->string();
  if (s.model) j["model"] = s.model->string();
  return j;
}

bool ExperimentResult::ok() const {
  return std::none_of(points.begin(), points.end(), [](const PointResult& p) { return p.failed; });
}

double gradient_check_suite(int instances, std::uint64_t seed) {
  if (instances <= 0) throw DomainError("instance count must be positive");
  eyesim::SimConfig sc;
  sc.nPersons = 2;
  sc.samplesPerPerson = 4;
  sc.seed = seed;
  const eyesim::Dataset ds = eyesim::generate_dataset(sc);
  double worst = 0.0;
  const diffnet::DistanceMode modes[] = {diffnet::DistanceMode::EyesAndFace,
                                         diffnet::DistanceMode::EyesOnly,
                                         diffnet::DistanceMode::PerEye, diffnet::DistanceMode::None};
  for (int inst = 0; inst < instances; ++inst) {
    eyesim::Rng rng = eyesim::substream(mix(seed, 0x6c6b), static_cast<std::uint64_t>(inst));
    diffnet::Architecture arch;
    arch.hidden = 6;
    arch.eyeFeatures = 4;
    arch.calibDims = 1 + inst % 3;
    arch.mode = modes[inst % 4];
    diffnet::ModelParams theta(arch);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (double& w : theta.flat()) w = 0.3 * n01(rng);
    std::vector<NormalizedSample> samples;
    for (int b = 0; b < 3; ++b) {
      const std::size_t idx = (static_cast<std::size_t>(inst) * 3 + b) % ds.samples.size();
      NormalizedSample s = features::normalize(ds.samples[idx], static_cast<int>(idx));
      s.irisAnchor = b == 0;
      samples.push_back(std::move(s));
    }
    Eigen::MatrixXd calib(2 * arch.calibDims, 3);
    for (long i = 0; i < calib.size(); ++i) calib.data()[i] = 0.5 * n01(rng);
    diffnet::LossConfig cfg;
    cfg.irisAnchor = true;
    const diffnet::Batch batch{samples, calib};
    const auto r = diffnet::gradient_check(theta, batch, cfg);
    worst = std::max(worst, r.maxRelError);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Sweep runner

namespace {

struct Shared {
  const ExperimentSpec& spec;
  std::mutex ioMu;
  std::ofstream partial;
  std::vector<std::string> rows;
  std::atomic<bool> abort{false};

  void emit(const std::string& value, const TrialRow& r) {
    std::ostringstream os;
    os.precision(10);
    os << to_string(spec.kind) << ',' << value << ',' << r.personId << ',' << r.repeat << ','
       << r.k << ',' << r.meanErrorDeg;
    std::lock_guard<std::mutex> lock(ioMu);
    rows.push_back(os.str());
    partial << os.str() << '\n';
    partial.flush();
  }
};

struct Inputs {
  eyesim::Dataset train;
  eyesim::Dataset eval;
  std::vector<EvalPerson> persons;
};

Inputs prepare_inputs(const ExperimentSpec& spec, const BenchmarkConfig& bench) {
  Inputs in;
  in.train = spec.trainDataset ? io::read_dataset(*spec.trainDataset)
                               : eyesim::generate_dataset(bench.train);
  in.eval = spec.evalDataset ? io::read_dataset(*spec.evalDataset)
                             : eyesim::generate_dataset(bench.eval);
  in.persons = split_eval(in.eval, bench.poolSize);
  return in;
}

Json k_json(const KResult& k) {
  return Json{{"k", k.k},
              {"mean_error_deg", num(k.meanDeg)},
              {"pooled_mean_error_deg", num(k.pooledMeanDeg)},
              {"stderr_deg", num(k.stdErrDeg)},
              {"consistency_band_deg", num(k.bandDeg)},
              {"repeats", k.repeats}};
}

Json point_json(const PointResult& p) {
  Json ks = Json::array();
  for (const auto& k : p.ks) ks.push_back(k_json(k));
  Json j{{"value", p.value}, {"failed", p.failed}};
  if (p.failed) j["error"] = p.error;
  j["k_results"] = ks;
  j["origin"] = {{"median_ray_to_eye_mm", num(p.origin.medianRayToEyeMm)},
                 {"median_origin_distance_mm", num(p.origin.medianOriginDistanceMm)},
                 {"median_depth_error_mm", num(p.origin.medianDepthErrorMm)},
                 {"depth_error_iqr_mm", num(p.origin.depthErrorIqrMm)}};
  if (!p.epochLoss.empty()) j["final_train_loss_mm"] = num(p.epochLoss.back());
  if (!p.latentR2.empty()) j["latent_r2"] = p.latentR2;
  if (std::isfinite(p.gradMaxRelError)) j["grad_max_rel_error"] = p.gradMaxRelError;
  return j;
}

const KResult* find_k(const PointResult& p, int k) {
  for (const auto& r : p.ks) {
    if (r.k == k) return &r;
  }
  return nullptr;
}

const PointResult* find_point(const ExperimentResult& r, const std::string& v) {
  for (const auto& p : r.points) {
    if (p.value == v && !p.failed) return &p;
  }
  return nullptr;
}

Json statistics(const ExperimentResult& r) {
  Json s = Json::object();
  switch (r.spec.kind) {
    case Kind::NParams: {
      const int k = r.spec.ks.empty() ? 0 : r.spec.ks.back();
      const PointResult* p3 = find_point(r, "3");
      const PointResult* p5 = find_point(r, "5");
      if (p3 && p5 && find_k(*p3, k) && find_k(*p5, k)) {
        const double e3 = find_k(*p3, k)->meanDeg, e5 = find_k(*p5, k)->meanDeg;
        s["plateau_k"] = k;
        s["plateau_statistic"] = num((e3 - e5) / e3);
      }
      break;
    }
    case Kind::DistMode: {
      const PointResult* none = find_point(r, "none");
      const PointResult* ef = find_point(r, "eyes-and-face");
      if (none && ef) {
        const double gapUncal = none->ks.front().meanDeg - ef->ks.front().meanDeg;
        s["gap_uncalibrated_deg"] = num(gapUncal);
        if (!r.spec.ks.empty() && find_k(*none, r.spec.ks.back()) && find_k(*ef, r.spec.ks.back())) {
          const double gapCal =
              find_k(*none, r.spec.ks.back())->meanDeg - find_k(*ef, r.spec.ks.back())->meanDeg;
          s["gap_calibrated_deg"] = num(gapCal);
          s["gap_shrink_fraction"] = num(1.0 - gapCal / gapUncal);
        }
      }
      break;
    }
    case Kind::DepthPlanes: {
      const PointResult* one = find_point(r, "single");
      const PointResult* three = find_point(r, "three");
      if (one && three) {
        s["ray_to_eye_ratio"] = num(one->origin.medianRayToEyeMm / three->origin.medianRayToEyeMm);
      }
      break;
    }
    case Kind::IrisAnchor: {
      const PointResult* off = find_point(r, "off");
      const PointResult* on = find_point(r, "on");
      if (off && on) {
        s["iqr_reduction"] = num(1.0 - on->origin.depthErrorIqrMm / off->origin.depthErrorIqrMm);
      }
      break;
    }
    case Kind::KSweep:
    case Kind::GradCheck:
      break;
  }
  return s;
}

int parse_int(const std::string& v, const char* what) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw FormatError(std::string("sweep value '") + v + "' is not a valid " + what);
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  if (spec.values.empty()) throw DomainError("experiment needs at least one sweep value");
  std::filesystem::create_directories(spec.outDir);
  const std::string kind = to_string(spec.kind);
  const auto partialPath = spec.outDir / (kind + ".partial.csv");
  const auto csvPath = spec.outDir / (kind + ".csv");
  const auto jsonPath = spec.outDir / (kind + ".json");

  Shared sh{spec, {}, {}, {}, {}};
  sh.partial.open(partialPath, std::ios::binary | std::ios::trunc);
  if (!sh.partial) throw IoError("cannot open " + partialPath.string() + " for writing");
  sh.partial << kCsvHeader << '\n';
  sh.partial.flush();

  ExperimentResult result;
  result.spec = spec;
  result.points.resize(spec.values.size());
  for (std::size_t i = 0; i < spec.values.size(); ++i) result.points[i].value = spec.values[i];

  // Inputs shared by points that use the spec's own benchmark.
  std::optional<Inputs> shared;
  std::once_flag sharedOnce;
  auto sharedInputs = [&]() -> const Inputs& {
    std::call_once(sharedOnce, [&] { shared = prepare_inputs(spec, spec.bench); });
    return *shared;
  };
  // ksweep trains (or loads) one model used by every point.
  std::optional<trainer::TrainReport> ksweepModel;
  std::once_flag modelOnce;

  auto save_model = [&](const diffnet::ModelParams& theta, const std::string& tag) {
    diffnet::save_params(spec.outDir / (kind + "_" + tag + ".model.json"), theta);
  };

  auto run_point = [&](std::size_t i) {
    PointResult& pr = result.points[i];
    const std::string& value = pr.value;
    auto sink = [&](const TrialRow& r) { sh.emit(value, r); };
    if (sh.abort) {
      pr.failed = true;
      pr.error = "skipped after an earlier failure";
      return;
    }
    try {
      const std::uint64_t pointSeed = mix(spec.seed, i);
      switch (spec.kind) {
        case Kind::GradCheck: {
          pr.gradMaxRelError = gradient_check_suite(parse_int(value, "instance count"), spec.seed);
          if (!(pr.gradMaxRelError < 1e-4)) {
            pr.failed = true;
            pr.error = "relative gradient error " + std::to_string(pr.gradMaxRelError) + " >= 1e-4";
          }
          break;
        }
        case Kind::NParams:
        case Kind::DistMode: {
          const Inputs& in = sharedInputs();
          trainer::TrainConfig tc = spec.bench.training;
          if (spec.kind == Kind::NParams) {
            tc.arch.calibDims = parse_int(value, "N");
          } else {
            tc.arch.mode = diffnet::parse_distance_mode(value);
          }
          const auto rep = trainer::train(in.train.samples, tc);
          save_model(rep.theta, value);
          pr.epochLoss = rep.epochLoss;
          const Evaluator ev(rep.theta, in.persons);
          pr.ks.push_back(ev.run(0, rep.meanCalibration, spec.policy, pointSeed, sink));
          for (int k : spec.ks) pr.ks.push_back(ev.run(k, rep.meanCalibration, spec.policy, pointSeed, sink));
          pr.origin = ev.origins(rep.meanCalibration);
          if (tc.arch.calibDims == 3) pr.latentR2 = latent_r2(rep, in.train.persons);
          break;
        }
        case Kind::KSweep: {
          const Inputs& in = sharedInputs();
          std::call_once(modelOnce, [&] {
            if (spec.model) {
              trainer::TrainReport rep{spec.bench.training, {},
                                       diffnet::load_params(*spec.model), {}, {}, {}};
              rep.meanCalibration = rep.theta.meanCalibration;
              if (rep.meanCalibration.empty()) {
                std::vector<NormalizedSample> clean;
                for (std::size_t s = 0; s < in.train.samples.size(); ++s) {
                  clean.push_back(features::normalize(in.train.samples[s], static_cast<int>(s)));
                }
                rep.meanCalibration = calib::mean_calibration(rep.theta, clean).p;
              }
              ksweepModel = std::move(rep);
            } else {
              ksweepModel = trainer::train(in.train.samples, spec.bench.training);
              save_model(ksweepModel->theta, "shared");
            }
          });
          const int k = parse_int(value, "k");
          const Evaluator ev(ksweepModel->theta, in.persons);
          const auto& pbar = ksweepModel->meanCalibration;
          // k = 0 rows are emitted once, by the first point.
          pr.ks.push_back(ev.run(0, pbar, spec.policy, spec.seed, i == 0 ? TrialSink(sink) : TrialSink()));
          pr.ks.push_back(ev.run(k, pbar, spec.policy, spec.seed, sink));
          break;
        }
        case Kind::DepthPlanes:
        case Kind::IrisAnchor: {
          BenchmarkConfig b = spec.bench;
          if (spec.kind == Kind::DepthPlanes) {
            if (value != "single" && value != "three") {
              throw FormatError("depthplanes values are 'single' and 'three'");
            }
            const BenchmarkConfig planes = depth_benchmark(spec.seed, value == "three");
            b.train.targetPlanes = planes.train.targetPlanes;
          } else {
            if (value != "off" && value != "on") throw FormatError("irisanchor values are 'off' and 'on'");
            b.training.irisAnchor = value == "on";
          }
          ExperimentSpec local = spec;
          local.trainDataset.reset();
          const Inputs in = prepare_inputs(local, b);
          const auto rep = trainer::train(in.train.samples, b.training);
          save_model(rep.theta, value);
          pr.epochLoss = rep.epochLoss;
          const Evaluator ev(rep.theta, in.persons);
          pr.ks.push_back(ev.run(0, rep.meanCalibration, spec.policy, pointSeed, sink));
          pr.origin = ev.origins(rep.meanCalibration);
          break;
        }
      }
    } catch (const std::exception& e) {
      pr.failed = true;
      pr.error = e.what();
      sh.abort = true;
      log::logger()->error("{} {}: {}", kind, value, e.what());
    }
  };

  parallel_for(spec.values.size(), spec.workers, run_point);
  sh.partial.close();

  Json points = Json::array();
  for (const auto& p : result.points) points.push_back(point_json(p));
  result.summary = Json{{"format", kExperimentFormat},
                        {"kind", kind},
                        {"complete", result.ok()},
                        {"spec", to_json(spec)},
                        {"csv_columns", kCsvHeader},
                        {"points", points},
                        {"statistics", statistics(result)}};
  io::write_text_file(jsonPath, result.summary.dump(2) + "\n");
  if (result.ok()) {
    std::sort(sh.rows.begin(), sh.rows.end());
    std::ostringstream os;
    os << kCsvHeader << '\n';
    for (const auto& r : sh.rows) os << r << '\n';
    io::write_text_file(csvPath, os.str());
    std::filesystem::remove(partialPath);
  }
  return result;
}

}  // namespace gazekit::experiment
