#pragma once

// Joint training of the network weights and one calibration row per
// training person.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gazekit/diffnet.hpp"
#include "gazekit/eyesim.hpp"
#include "gazekit/vendor_json.hpp"

namespace gazekit::trainer {

struct TrainConfig {
  int epochs = 30;
  double lr0 = 1e-3;
  double lrDecayFactor = 10.0;
  int lrDecayEvery = 10;
  double weightDecay = 1e-5;
  int batchSize = 64;
  double jitterFrac = 0.04;
  diffnet::Architecture arch;
  diffnet::HingeWeights hinges;
  bool irisAnchor = false;
  /// Share of training samples carrying an iris annotation.
  double irisFraction = 0.01;
  double lambdaIris = 1e-2;
  std::uint64_t seed = 1;
  int meanCalibIterations = 500;

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys raise FormatError.
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

/// lr0 / factor^floor(epoch / every).
double lr_schedule(int epoch, const TrainConfig& cfg);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  long step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam with decoupled weight decay:
///   x -= lr * (mhat / (sqrt(vhat) + eps) + weightDecay * x)
/// Throws NumericalError on a non-finite gradient.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
               double lr, double weightDecay);

/// Adam over the rows of P; only rows present in a batch are touched, each
/// with its own step counter.
struct RowAdam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Eigen::MatrixXd m, v;
  std::vector<long> steps;

  RowAdam(long rows = 0, long cols = 0);
  void step_row(Eigen::MatrixXd& P, long row, const Eigen::RowVectorXd& grad, double lr);
};

/// Both detections offset independently and uniformly in a disk of radius
/// frac * interocular pixel distance; face features follow.
eyesim::Sample jitter_detections(const eyesim::Sample& sample, eyesim::Rng& rng, double frac);

struct TrainReport {
  TrainConfig config;
  std::vector<double> epochLoss;
  diffnet::ModelParams theta;
  /// Row m belongs to personIds[m].
  Eigen::MatrixXd P;
  std::vector<int> personIds;
  std::vector<double> meanCalibration;
  bool meanCalibrationConverged = false;
  double meanCalibrationLoss = 0.0;
};

/// Called after each epoch with (epoch, mean loss).
using EpochCallback = std::function<void(int, double)>;

/// Trains from init_params(cfg.seed) or from `start` if given. Throws
/// NumericalError if an epoch loss is non-finite or exceeds 1e6 mm.
TrainReport train(std::span<const eyesim::Sample> samples, const TrainConfig& cfg,
                  const diffnet::ModelParams* start = nullptr, const EpochCallback& onEpoch = {});

nlohmann::ordered_json to_json(const TrainReport& r);
/// epoch,lr,loss_mm
std::string loss_curve_csv(const TrainReport& r);

}  // namespace gazekit::trainer
