#pragma once

// Gaze regressor with a per-person latent calibration input.
//
//   eye features  = eyeNet(eye landmarks)                 shared by both eyes
//   c             = exp(tanh(a) ln 1.5),  a = distHead(...) per DistanceMode
//   (o2D, d2D)    = gazeHead([eye features, p_eye, c])    shared by both eyes
//
// The calibration vector p never reaches the distance head. Gradients with
// respect to the weights and to p are exact: dense layers are differentiated
// by hand and the ray geometry through a scalar tape.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gazekit/features.hpp"
#include "gazekit/geometry.hpp"

namespace gazekit::diffnet {

enum class DistanceMode : std::uint8_t { None, PerEye, EyesOnly, EyesAndFace };

const char* to_string(DistanceMode m);
/// Accepts "none", "per-eye", "eyes-only", "eyes-and-face".
DistanceMode parse_distance_mode(const std::string& s);

inline constexpr double kOriginScalePx = 50.0;
inline constexpr double kMaxDistanceFactor = 1.5;

struct Architecture {
  int eyeInputs = features::kEyeInputs;
  int faceInputs = features::kFaceInputs;
  int hidden = 64;
  int eyeFeatures = 16;
  /// N: calibration parameters per eye.
  int calibDims = 3;
  DistanceMode mode = DistanceMode::EyesAndFace;

  void validate() const;
  int dist_inputs() const;
  int gaze_inputs() const { return eyeFeatures + calibDims + 1; }
  std::string descriptor() const;
  /// 16 hex digits of FNV-1a over descriptor().
  std::string hash() const;
  bool operator==(const Architecture&) const = default;
};

struct LayerSpec {
  int in = 0;
  int out = 0;
  std::size_t weightOffset = 0;  ///< column-major out x in
  std::size_t biasOffset = 0;
};

/// Dense tanh network; the last layer is linear.
struct MlpSpec {
  std::vector<LayerSpec> layers;
  bool empty() const { return layers.empty(); }
  int inputs() const { return layers.empty() ? 0 : layers.front().in; }
  int outputs() const { return layers.empty() ? 0 : layers.back().out; }
};

/// All trainable weights (theta) in one flat array.
class ModelParams {
 public:
  explicit ModelParams(const Architecture& arch = Architecture());

  const Architecture& arch() const { return arch_; }
  const MlpSpec& eye_net() const { return eyeNet_; }
  const MlpSpec& dist_head() const { return distHead_; }
  const MlpSpec& gaze_head() const { return gazeHead_; }

  std::vector<double>& flat() { return flat_; }
  const std::vector<double>& flat() const { return flat_; }
  std::size_t size() const { return flat_.size(); }

  /// Mean calibration vector stored with the model (length 2N, may be empty).
  std::vector<double> meanCalibration;

 private:
  Architecture arch_;
  MlpSpec eyeNet_, distHead_, gazeHead_;
  std::vector<double> flat_;
};

/// Glorot-uniform weights, zero biases; the last layers of the distance and
/// gaze heads start at zero so c = 1 and o2D sits at the crop centre.
ModelParams init_params(std::uint64_t seed, const Architecture& arch);

inline constexpr const char* kModelFormat = "gazekit-model/1";

void save_params(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_params(const std::filesystem::path& path);
/// Throws ArchitectureMismatch naming both hashes if the stored one differs.
ModelParams load_params(const std::filesystem::path& path, const Architecture& expected);

struct EyeOutput {
  Vec2 o2D = Vec2::Zero();  ///< crop pixels
  Vec2 d2D = Vec2::Zero();
  double c = 1.0;
};

struct NetworkOutput {
  std::array<EyeOutput, 2> eyes;
};

/// Forward pass for one sample. `p` has length 2N (right eye first).
NetworkOutput forward(const ModelParams& theta, const features::NormalizedSample& sample,
                      std::span<const double> p);

/// Real-camera rays for both eyes from a network output.
std::array<GazeRay, 2> output_rays(const features::NormalizedSample& sample,
                                   const NetworkOutput& out);

struct HingeWeights {
  double origin = 1e-3;    ///< mm / px^2
  double distance = 1e3;   ///< mm
  double cLow = 0.6;
  double cHigh = 1.4;
};

/// Squared out-of-crop overshoot of o2D plus squared excursion of c outside
/// [cLow, cHigh]; zero inside the feasible region.
double hinge_terms(const Vec2& o2D, double c, int cropW, int cropH, const HingeWeights& w);

struct LossConfig {
  HingeWeights hinges;
  /// Weight of |irisCenter - o2D|^2 on samples flagged irisAnchor, mm / px^2.
  double lambdaIris = 1e-2;
  bool irisAnchor = false;
};

/// Batch of samples, each with its own calibration vector.
struct Batch {
  std::span<const features::NormalizedSample> samples;
  /// 2N x B; column b is the calibration vector of sample b.
  Eigen::MatrixXd calib;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> theta;  ///< same layout as ModelParams::flat()
  Eigen::MatrixXd calib;      ///< 2N x B
};

/// Mean over samples and eyes of miss distance + hinge terms (+ iris
/// anchor); exact gradients with respect to theta and every column of p.
/// Throws NumericalError naming the sample if the loss is not finite.
LossGrad loss_and_grad(const ModelParams& theta, const Batch& batch, const LossConfig& cfg);

/// Same loss without gradients.
double loss_value(const ModelParams& theta, const Batch& batch, const LossConfig& cfg);

/// p-independent part of the network evaluated once so that many loss
/// evaluations over different p are cheap (used by calibration).
class FrozenEncoding {
 public:
  FrozenEncoding(const ModelParams& theta, std::span<const features::NormalizedSample> samples);

  std::size_t size() const { return samples_.size(); }
  /// Mean loss over the encoded samples with a shared p; fills dLoss/dp if given.
  double loss(std::span<const double> p, const LossConfig& cfg, std::span<double> grad) const;
  /// Outputs for each sample with a shared p.
  std::vector<NetworkOutput> outputs(std::span<const double> p) const;

 private:
  const ModelParams* theta_;
  std::span<const features::NormalizedSample> samples_;
  Eigen::MatrixXd eyeFeatures_;  ///< E x 2B
  Eigen::VectorXd c_;            ///< 2B
};

/// Relative error |a - n| / max(|a|, |n|, floor) for every coordinate.
struct GradCheckResult {
  double maxRelError = 0.0;
  std::size_t worstIndex = 0;
  std::size_t coordinates = 0;
};

/// Central differences with step h over every coordinate of theta and p.
GradCheckResult gradient_check(const ModelParams& theta, const Batch& batch, const LossConfig& cfg,
                               double h = 1e-5, double floor = 1e-6);

}  // namespace gazekit::diffnet
