#include "gazekit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "gazekit/calib.hpp"
#include "gazekit/errors.hpp"
#include "gazekit/features.hpp"
#include "gazekit/log.hpp"

namespace gazekit::trainer {

using diffnet::DistanceMode;
using Json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (epochs <= 0) throw DomainError("epochs must be positive");
  if (!(lr0 > 0.0)) throw DomainError("lr0 must be positive");
  if (!(lrDecayFactor > 0.0) || lrDecayEvery <= 0) throw DomainError("invalid lr decay");
  if (weightDecay < 0.0) throw DomainError("weight decay must be >= 0");
  if (batchSize <= 0) throw DomainError("batch size must be positive");
  if (jitterFrac < 0.0) throw DomainError("jitter fraction must be >= 0");
  if (irisFraction < 0.0 || irisFraction > 1.0) throw DomainError("iris fraction must be in [0,1]");
  arch.validate();
}

Json to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"lr0", c.lr0},
              {"lr_decay_factor", c.lrDecayFactor},
              {"lr_decay_every", c.lrDecayEvery},
              {"weight_decay", c.weightDecay},
              {"batch_size", c.batchSize},
              {"jitter_frac", c.jitterFrac},
              {"calib_dims", c.arch.calibDims},
              {"distance_mode", diffnet::to_string(c.arch.mode)},
              {"hidden", c.arch.hidden},
              {"eye_features", c.arch.eyeFeatures},
              {"hinge_origin", c.hinges.origin},
              {"hinge_distance", c.hinges.distance},
              {"c_low", c.hinges.cLow},
              {"c_high", c.hinges.cHigh},
              {"iris_anchor", c.irisAnchor},
              {"iris_fraction", c.irisFraction},
              {"lambda_iris", c.lambdaIris},
              {"seed", c.seed},
              {"mean_calib_iterations", c.meanCalibIterations}};
}

TrainConfig train_config_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("training config must be a JSON object");
  const std::set<std::string> known = [] {
    std::set<std::string> k;
    const Json defaults = to_json(TrainConfig{});
    for (const auto& [key, _] : defaults.items()) k.insert(key);
    return k;
  }();
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw FormatError("unknown field '" + key + "'");
  }
  TrainConfig c;
  try {
    auto get = [&](const char* key, auto& out) {
      if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
    };
    get("epochs", c.epochs);
    get("lr0", c.lr0);
    get("lr_decay_factor", c.lrDecayFactor);
    get("lr_decay_every", c.lrDecayEvery);
    get("weight_decay", c.weightDecay);
    get("batch_size", c.batchSize);
    get("jitter_frac", c.jitterFrac);
    get("calib_dims", c.arch.calibDims);
    if (j.contains("distance_mode")) {
      c.arch.mode = diffnet::parse_distance_mode(j.at("distance_mode").get<std::string>());
    }
    get("hidden", c.arch.hidden);
    get("eye_features", c.arch.eyeFeatures);
    get("hinge_origin", c.hinges.origin);
    get("hinge_distance", c.hinges.distance);
    get("c_low", c.hinges.cLow);
    get("c_high", c.hinges.cHigh);
    get("iris_anchor", c.irisAnchor);
    get("iris_fraction", c.irisFraction);
    get("lambda_iris", c.lambdaIris);
    get("seed", c.seed);
    get("mean_calib_iterations", c.meanCalibIterations);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }
  return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw DomainError("negative epoch");
  return cfg.lr0 / std::pow(cfg.lrDecayFactor, epoch / cfg.lrDecayEvery);
}

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads, double lr,
               double weightDecay) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
    throw DomainError("Adam state, parameter and gradient sizes differ");
  }
  ++s.step;
  for (double g : grads) {
    if (!std::isfinite(g)) {
      throw NumericalError("non-finite gradient at optimizer step " + std::to_string(s.step));
    }
  }
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double mhat = s.m[i] / bc1;
    const double vhat = s.v[i] / bc2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + s.eps) + weightDecay * params[i]);
  }
}

RowAdam::RowAdam(long rows, long cols)
    : m(Eigen::MatrixXd::Zero(rows, cols)), v(Eigen::MatrixXd::Zero(rows, cols)), steps(rows, 0) {}

void RowAdam::step_row(Eigen::MatrixXd& P, long row, const Eigen::RowVectorXd& grad, double lr) {
  if (!grad.allFinite()) throw NumericalError("non-finite calibration gradient");
  const long t = ++steps[row];
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  m.row(row) = beta1 * m.row(row) + (1.0 - beta1) * grad;
  v.row(row) = beta2 * v.row(row) + (1.0 - beta2) * grad.array().square().matrix();
  P.row(row).array() -=
      lr * (m.row(row).array() / bc1) / ((v.row(row).array() / bc2).sqrt() + eps);
}

eyesim::Sample jitter_detections(const eyesim::Sample& sample, eyesim::Rng& rng, double frac) {
  if (frac < 0.0) throw DomainError("jitter fraction must be >= 0");
  if (frac == 0.0) return sample;
  const double radius = frac * (sample.detL - sample.detR).norm();
  const Vec2 dR = sample.detR + eyesim::disk_offset(rng, radius);
  const Vec2 dL = sample.detL + eyesim::disk_offset(rng, radius);
  return features::with_detections(sample, dR, dL);
}

namespace {

constexpr double kDivergenceMm = 1e6;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL ^ (b + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool iris_flag(std::uint64_t seed, std::size_t index, double fraction) {
  if (fraction <= 0.0) return false;
  const std::uint64_t h = mix(mix(seed, 0x1415), index);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

}  // namespace

TrainReport train(std::span<const eyesim::Sample> samples, const TrainConfig& cfg,
                  const diffnet::ModelParams* start, const EpochCallback& onEpoch) {
  cfg.validate();
  if (samples.empty()) throw DomainError("empty training set");
  TrainReport rep{cfg, {}, start ? *start : diffnet::init_params(cfg.seed, cfg.arch), {}, {}, {}};
  if (start && !(start->arch() == cfg.arch)) {
    throw ArchitectureMismatch("resume model architecture " + start->arch().hash() +
                               " differs from configured " + cfg.arch.hash());
  }
  diffnet::ModelParams& theta = rep.theta;

  std::map<int, long> rowOf;
  for (const auto& s : samples) rowOf.emplace(s.personId, 0);
  for (auto& [id, row] : rowOf) {
    row = static_cast<long>(rep.personIds.size());
    rep.personIds.push_back(id);
  }
  const long M = static_cast<long>(rep.personIds.size());
  const int n2 = 2 * cfg.arch.calibDims;
  rep.P = Eigen::MatrixXd::Zero(M, n2);

  diffnet::LossConfig loss;
  loss.hinges = cfg.hinges;
  loss.irisAnchor = cfg.irisAnchor;
  loss.lambdaIris = cfg.lambdaIris;

  std::vector<bool> anchored(samples.size(), false);
  if (cfg.irisAnchor) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      anchored[i] = iris_flag(cfg.seed, i, cfg.irisFraction);
    }
  }

  AdamState adam(theta.size());
  RowAdam rowAdam(M, n2);
  std::vector<std::size_t> order(samples.size());
  std::vector<features::NormalizedSample> batch;
  batch.reserve(cfg.batchSize);
  std::vector<long> batchRows;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    eyesim::Rng shuffleRng(mix(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffleRng);

    double lossSum = 0.0;
    std::size_t lossCount = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batchSize) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batchSize);
      batch.clear();
      batchRows.clear();
      Eigen::MatrixXd calib(n2, static_cast<long>(b1 - b0));
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t idx = order[k];
        eyesim::Rng jr(mix(mix(cfg.seed, static_cast<std::uint64_t>(epoch) + 1), idx));
        const eyesim::Sample js = jitter_detections(samples[idx], jr, cfg.jitterFrac);
        features::NormalizedSample ns = features::normalize(js, static_cast<int>(idx));
        ns.irisAnchor = anchored[idx];
        batch.push_back(std::move(ns));
        const long row = rowOf.at(samples[idx].personId);
        batchRows.push_back(row);
        calib.col(static_cast<long>(k - b0)) = rep.P.row(row).transpose();
      }
      const diffnet::Batch db{batch, calib};
      const diffnet::LossGrad lg = diffnet::loss_and_grad(theta, db, loss);
      if (!std::isfinite(lg.loss) || lg.loss > kDivergenceMm) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) +
                             " (batch loss " + std::to_string(lg.loss) + " mm)");
      }
      lossSum += lg.loss * static_cast<double>(b1 - b0);
      lossCount += b1 - b0;

      adam_step(adam, theta.flat(), lg.theta, lr, cfg.weightDecay);
      if (n2 > 0) {
        std::map<long, Eigen::RowVectorXd> rowGrad;
        for (std::size_t k = 0; k < batchRows.size(); ++k) {
          auto it = rowGrad.find(batchRows[k]);
          const Eigen::RowVectorXd g = lg.calib.col(static_cast<long>(k)).transpose();
          if (it == rowGrad.end()) {
            rowGrad.emplace(batchRows[k], g);
          } else {
            it->second += g;
          }
        }
        for (const auto& [row, g] : rowGrad) rowAdam.step_row(rep.P, row, g, lr);
      }
    }
    const double epochLoss = lossSum / static_cast<double>(lossCount);
    if (!std::isfinite(epochLoss) || epochLoss > kDivergenceMm) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch));
    }
    rep.epochLoss.push_back(epochLoss);
    log::logger()->debug("epoch {} lr {:.1e} loss {:.4f} mm", epoch, lr, epochLoss);
    if (onEpoch) onEpoch(epoch, epochLoss);
  }

  std::vector<features::NormalizedSample> clean;
  clean.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    clean.push_back(features::normalize(samples[i], static_cast<int>(i)));
  }
  const calib::CalibResult mc = calib::mean_calibration(theta, clean, cfg.meanCalibIterations);
  rep.meanCalibration = mc.p;
  rep.meanCalibrationConverged = mc.converged;
  rep.meanCalibrationLoss = mc.finalCalibError;
  theta.meanCalibration = mc.p;
  return rep;
}

Json to_json(const TrainReport& r) {
  Json P = Json::array();
  for (long m = 0; m < r.P.rows(); ++m) {
    Json row = Json::array();
    for (long k = 0; k < r.P.cols(); ++k) row.push_back(r.P(m, k));
    P.push_back({{"person_id", r.personIds[m]}, {"p", row}});
  }
  return Json{{"format", "gazekit-train-report/1"},
              {"config", to_json(r.config)},
              {"arch_hash", r.theta.arch().hash()},
              {"epoch_loss_mm", r.epochLoss},
              {"mean_calibration", r.meanCalibration},
              {"mean_calibration_converged", r.meanCalibrationConverged},
              {"mean_calibration_loss_mm", r.meanCalibrationLoss},
              {"P", P}};
}

std::string loss_curve_csv(const TrainReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << "epoch,lr,loss_mm\n";
  for (std::size_t e = 0; e < r.epochLoss.size(); ++e) {
    os << e << ',' << lr_schedule(static_cast<int>(e), r.config) << ',' << r.epochLoss[e] << '\n';
  }
  return os.str();
}

}  // namespace gazekit::trainer
