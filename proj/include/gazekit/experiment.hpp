#pragma once

// Synthetic benchmark, repeated-calibration trials and the sweep runner
// behind `gazekit experiment`.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gazekit/calib.hpp"
#include "gazekit/diffnet.hpp"
#include "gazekit/eyesim.hpp"
#include "gazekit/features.hpp"
#include "gazekit/trainer.hpp"
#include "gazekit/vendor_json.hpp"

namespace gazekit::experiment {

using features::NormalizedSample;

struct BenchmarkConfig {
  eyesim::SimConfig train;
  eyesim::SimConfig eval;
  /// Leading samples of each evaluation person reserved for calibration
  /// draws; the remaining samples are the test set.
  int poolSize = 64;
  trainer::TrainConfig training;
};

/// 200 x 300 training samples on one target plane; 40 evaluation persons
/// with 64 pool + 100 test samples.
BenchmarkConfig default_benchmark(std::uint64_t seed = 1);

/// Identical eyes for everyone (no calibration), targets on one plane or on
/// three planes at z = -300, 0, +300 mm; evaluation always on three planes.
BenchmarkConfig depth_benchmark(std::uint64_t seed, bool threePlanes);

nlohmann::ordered_json to_json(const BenchmarkConfig& b);
/// Keys: train, eval (simulation configs), pool_size, training.
BenchmarkConfig benchmark_from_json(const nlohmann::ordered_json& j, const BenchmarkConfig& base);

struct EvalPerson {
  int personId = 0;
  std::vector<NormalizedSample> pool;
  std::vector<NormalizedSample> test;
};

/// First poolSize samples of each person form the pool, the rest the test set.
std::vector<EvalPerson> split_eval(const eyesim::Dataset& ds, int poolSize);

struct TrialPolicy {
  int minRepeats = 8;
  int maxRepeats = 200;
  /// Stop once the standard error of the mean error is below this.
  double targetStdErrDeg = 0.02;
};

/// Repeated calibrations with k samples per person.
struct KResult {
  int k = 0;
  int repeats = 0;
  /// Mean over repeats of the mean over persons of per-person mean error.
  double meanDeg = 0.0;
  double pooledMeanDeg = 0.0;
  /// Standard error of meanDeg over repeats (0 for a single repeat).
  double stdErrDeg = 0.0;
  /// Consistency band (0 when every repeat uses the same samples).
  double bandDeg = 0.0;
  std::vector<int> personIds;
  /// mu[m][r]: mean test error of person m in repeat r.
  std::vector<std::vector<double>> mu;

  /// Person means averaged over repeats.
  std::vector<double> person_means() const;
};

struct OriginStats {
  double medianRayToEyeMm = std::numeric_limits<double>::quiet_NaN();
  double medianOriginDistanceMm = std::numeric_limits<double>::quiet_NaN();
  double medianDepthErrorMm = std::numeric_limits<double>::quiet_NaN();
  double depthErrorIqrMm = std::numeric_limits<double>::quiet_NaN();
};

/// One row per (person, repeat) for a given k.
struct TrialRow {
  int personId = 0;
  int repeat = 0;
  int k = 0;
  double meanErrorDeg = 0.0;
};

using TrialSink = std::function<void(const TrialRow&)>;

/// Test-set encodings for one trained model, reused across trials.
class Evaluator {
 public:
  Evaluator(const diffnet::ModelParams& theta, std::span<const EvalPerson> persons);

  /// k = 0 evaluates pInit; k >= pool size uses the whole pool once.
  KResult run(int k, std::span<const double> pInit, const TrialPolicy& policy, std::uint64_t seed,
              const TrialSink& sink = {}) const;

  /// Test-set origin statistics at a shared p.
  OriginStats origins(std::span<const double> p) const;

  /// Test errors of one person at p.
  std::vector<calib::SampleError> test_errors(std::size_t person, std::span<const double> p) const;

 private:
  const diffnet::ModelParams* theta_;
  std::span<const EvalPerson> persons_;
  std::vector<diffnet::FrozenEncoding> test_;
};

/// Coefficient of determination of an ordinary least-squares fit (with
/// intercept) of each column of Y on the rows of X.
std::vector<double> ols_r2(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y);

/// R^2 of trained calibration rows against the true per-eye parameters, in
/// the order right h, right v, right k, left h, left v, left k.
std::vector<double> latent_r2(const trainer::TrainReport& report,
                              std::span<const eyesim::Person> persons);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception is rethrown after all workers stop.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

enum class Kind { NParams, KSweep, DistMode, DepthPlanes, IrisAnchor, GradCheck };
const char* to_string(Kind k);
Kind parse_kind(const std::string& s);

struct ExperimentSpec {
  Kind kind = Kind::KSweep;
  /// Sweep values: N for nparams, k for ksweep, mode names for distmode,
  /// "single"/"three" for depthplanes, "off"/"on" for irisanchor, instance
  /// count for gradcheck.
  std::vector<std::string> values;
  /// Calibration sizes evaluated at every sweep point (besides k = 0).
  std::vector<int> ks;
  BenchmarkConfig bench;
  TrialPolicy policy;
  std::optional<std::filesystem::path> trainDataset;
  std::optional<std::filesystem::path> evalDataset;
  /// Pretrained model for ksweep.
  std::optional<std::filesystem::path> model;
  std::filesystem::path outDir = "out";
  std::uint64_t seed = 1;
  int workers = 1;
};

/// Defaults for a kind: sweep values, k list and benchmark.
ExperimentSpec default_spec(Kind kind, std::uint64_t seed);
/// Keys: kind, values, ks, bench, policy{min_repeats,max_repeats,target_stderr_deg},
/// train_dataset, eval_dataset, model, seed. Unknown keys raise FormatError.
ExperimentSpec spec_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json to_json(const ExperimentSpec& s);

struct PointResult {
  std::string value;
  bool failed = false;
  std::string error;
  std::vector<KResult> ks;  ///< ks[0] is k = 0
  OriginStats origin;
  std::vector<double> epochLoss;
  std::vector<double> latentR2;
  double gradMaxRelError = std::numeric_limits<double>::quiet_NaN();
};

struct ExperimentResult {
  ExperimentSpec spec;
  std::vector<PointResult> points;
  nlohmann::ordered_json summary;
  bool ok() const;
};

inline constexpr const char* kExperimentFormat = "gazekit-experiment/1";

/// Fixed CSV schema of experiment output.
inline constexpr const char* kCsvHeader =
    "experiment,value,person_id,repeat,k,mean_error_deg";

/// Runs a sweep. Rows are appended to <outDir>/<kind>.partial.csv as each
/// point finishes; on completion they are rewritten sorted to
/// <outDir>/<kind>.csv and the summary goes to <outDir>/<kind>.json.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Max relative gradient error over `instances` random small problems.
double gradient_check_suite(int instances, std::uint64_t seed);

}  // namespace gazekit::experiment
