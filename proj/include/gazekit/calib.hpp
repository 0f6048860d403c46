#pragma once

// Few-shot calibration with frozen weights and angular-error evaluation.

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gazekit/diffnet.hpp"
#include "gazekit/features.hpp"
#include "gazekit/vendor_json.hpp"

namespace gazekit::calib {

struct CalibOptions {
  int maxIterations = 200;
  double gradTol = 1e-8;
  diffnet::LossConfig loss;
};

struct CalibResult {
  std::vector<double> p;
  double initialError = 0.0;      ///< mean loss at pInit, mm
  double finalCalibError = 0.0;   ///< mean loss at p, mm
  int iterations = 0;
  bool converged = false;
  bool lineSearchFailed = false;
  /// Stopped because f no longer decreased measurably.
  bool stalled = false;
};

/// BFGS over p with theta frozen. k = 0 returns pInit unchanged.
CalibResult calibrate(const diffnet::ModelParams& theta, std::span<const double> pInit,
                      std::span<const features::NormalizedSample> calSet,
                      const CalibOptions& opt = {});

/// Shared p minimizing the mean loss over `trainSet`, starting from zero.
CalibResult mean_calibration(const diffnet::ModelParams& theta,
                             std::span<const features::NormalizedSample> trainSet,
                             int maxIterations = 500);

/// Per-sample result. The sample error is the mean over the two eyes of
/// finite per-eye angular errors.
struct SampleError {
  int personId = 0;
  int sampleIndex = 0;
  double errorDeg = 0.0;
  std::array<double, 2> eyeErrorDeg{};
  /// |estimated origin - true eye centre|, mm.
  std::array<double, 2> originDistance{};
  /// |estimated origin| - |true eye centre|, mm.
  std::array<double, 2> originDepthError{};
  /// Distance from the true eye centre to the estimated ray, mm.
  std::array<double, 2> rayToEye{};
  int nanEyes = 0;
};

/// Errors for `samples` under one shared p.
std::vector<SampleError> sample_errors(const diffnet::FrozenEncoding& enc,
                                       std::span<const features::NormalizedSample> samples,
                                       std::span<const double> p);

struct PersonSummary {
  int personId = 0;
  double meanErrorDeg = 0.0;
  int samples = 0;
  int nanEyes = 0;
};

struct EvalReport {
  /// Mean of per-person means, degrees.
  double meanDeg = 0.0;
  /// Mean over all samples, degrees.
  double pooledMeanDeg = 0.0;
  double medianDeg = 0.0;
  /// 10th, 20th, ..., 90th percentile of per-sample errors.
  std::array<double, 9> quantilesDeg{};
  std::vector<PersonSummary> persons;
  int nanEyes = 0;
  std::vector<double> originDistances;
  /// NaN unless repeated calibrations were aggregated.
  double consistencyBandDeg = std::numeric_limits<double>::quiet_NaN();
};

/// Aggregates per-sample errors per person, then overall.
EvalReport summarize(std::span<const SampleError> errors);

/// Evaluates every sample with its person's p. Throws DomainError if a
/// person has no entry.
EvalReport evaluate(const diffnet::ModelParams& theta,
                    const std::map<int, std::vector<double>>& perPersonP,
                    std::span<const features::NormalizedSample> evalSet);

/// sqrt(mean over persons of the unbiased variance of that person's mean
/// error across repeats). `muPerPerson[m]` lists person m's repeats.
double consistency_band(const std::vector<std::vector<double>>& muPerPerson);

/// Linear-interpolated quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> v, double q);

nlohmann::ordered_json to_json(const EvalReport& r);
/// Header plus one row per person: person_id,mean_error_deg,samples,nan_eyes
std::string persons_csv(const EvalReport& r);

}  // namespace gazekit::calib
