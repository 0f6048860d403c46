#include "gazekit/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "gazekit/autodiff.hpp"
#include "gazekit/dataset_io.hpp"
#include "gazekit/errors.hpp"

namespace gazekit::diffnet {

using features::NormalizedSample;
using Eigen::MatrixXd;
using Eigen::VectorXd;

const char* to_string(DistanceMode m) {
  switch (m) {
    case DistanceMode::None: return "none";
    case DistanceMode::PerEye: return "per-eye";
    case DistanceMode::EyesOnly: return "eyes-only";
    case DistanceMode::EyesAndFace: return "eyes-and-face";
  }
  return "unknown";
}

DistanceMode parse_distance_mode(const std::string& s) {
  for (auto m : {DistanceMode::None, DistanceMode::PerEye, DistanceMode::EyesOnly,
                 DistanceMode::EyesAndFace}) {
    if (s == to_string(m)) return m;
  }
  throw DomainError("unknown distance mode '" + s + "'");
}

void Architecture::validate() const {
  if (eyeInputs <= 0 || faceInputs <= 0 || hidden <= 0 || eyeFeatures <= 0) {
    throw DomainError("network widths must be positive");
  }
  if (calibDims < 0) throw DomainError("calibration dimension must be >= 0");
}

int Architecture::dist_inputs() const {
  switch (mode) {
    case DistanceMode::None: return 0;
    case DistanceMode::PerEye: return eyeFeatures;
    case DistanceMode::EyesOnly: return 2 * eyeFeatures;
    case DistanceMode::EyesAndFace: return 2 * eyeFeatures + faceInputs;
  }
  return 0;
}

std::string Architecture::descriptor() const {
  std::ostringstream os;
  os << "gazekit-arch/1 eye_in=" << eyeInputs << " face_in=" << faceInputs << " hidden=" << hidden
     << " eye_feat=" << eyeFeatures << " calib=" << calibDims << " mode=" << to_string(mode);
  return os.str();
}

std::string Architecture::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : descriptor()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

namespace {

MlpSpec make_mlp(std::initializer_list<int> widths, std::size_t& offset) {
  MlpSpec spec;
  const std::vector<int> w(widths);
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    LayerSpec l;
    l.in = w[i];
    l.out = w[i + 1];
    l.weightOffset = offset;
    offset += static_cast<std::size_t>(l.in) * l.out;
    l.biasOffset = offset;
    offset += l.out;
    spec.layers.push_back(l);
  }
  return spec;
}

}  // namespace

ModelParams::ModelParams(const Architecture& arch) : arch_(arch) {
  arch_.validate();
  std::size_t off = 0;
  const int h = arch_.hidden;
  eyeNet_ = make_mlp({arch_.eyeInputs, h, h, arch_.eyeFeatures}, off);
  if (arch_.mode != DistanceMode::None) distHead_ = make_mlp({arch_.dist_inputs(), h, h, 1}, off);
  gazeHead_ = make_mlp({arch_.gaze_inputs(), h, h, 4}, off);
  flat_.assign(off, 0.0);
}

ModelParams init_params(std::uint64_t seed, const Architecture& arch) {
  ModelParams p(arch);
  std::mt19937_64 rng(seed);
  auto fill = [&](const MlpSpec& spec, bool zeroLast) {
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const LayerSpec& l = spec.layers[i];
      const bool last = i + 1 == spec.layers.size();
      const double limit = std::sqrt(6.0 / (l.in + l.out));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (std::size_t k = 0; k < static_cast<std::size_t>(l.in) * l.out; ++k) {
        const double v = u(rng);
        p.flat()[l.weightOffset + k] = (last && zeroLast) ? 0.0 : v;
      }
    }
  };
  fill(p.eye_net(), false);
  fill(p.dist_head(), true);
  fill(p.gaze_head(), true);
  p.meanCalibration.assign(2 * arch.calibDims, 0.0);
  return p;
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  const Architecture& a = params.arch();
  io::Json j{{"format", kModelFormat},
             {"arch",
              {{"eye_inputs", a.eyeInputs},
               {"face_inputs", a.faceInputs},
               {"hidden", a.hidden},
               {"eye_features", a.eyeFeatures},
               {"calib_dims", a.calibDims},
               {"distance_mode", to_string(a.mode)}}},
             {"arch_descriptor", a.descriptor()},
             {"arch_hash", a.hash()},
             {"mean_calibration", params.meanCalibration},
             {"weights", params.flat()}};
  io::write_text_file(path, j.dump() + "\n");
}

ModelParams load_params(const std::filesystem::path& path) {
  io::Json j = io::read_json_file(path);
  try {
    if (!j.is_object() || j.value("format", std::string()) != kModelFormat) {
      throw FormatError(path.string() + ": not a " + std::string(kModelFormat) + " file");
    }
    const io::Json& ja = j.at("arch");
    Architecture a;
    a.eyeInputs = ja.at("eye_inputs").get<int>();
    a.faceInputs = ja.at("face_inputs").get<int>();
    a.hidden = ja.at("hidden").get<int>();
    a.eyeFeatures = ja.at("eye_features").get<int>();
    a.calibDims = ja.at("calib_dims").get<int>();
    a.mode = parse_distance_mode(ja.at("distance_mode").get<std::string>());
    const std::string stored = j.at("arch_hash").get<std::string>();
    if (stored != a.hash()) {
      throw FormatError(path.string() + ": corrupt model file (architecture hash " + stored +
                        " does not match descriptor hash " + a.hash() + ")");
    }
    ModelParams p(a);
    auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != p.size()) {
      throw FormatError(path.string() + ": corrupt model file (expected " +
                        std::to_string(p.size()) + " weights, found " + std::to_string(w.size()) +
                        ")");
    }
    p.flat() = std::move(w);
    p.meanCalibration = j.value("mean_calibration", std::vector<double>{});
    if (!p.meanCalibration.empty() &&
        p.meanCalibration.size() != static_cast<std::size_t>(2 * a.calibDims)) {
      throw FormatError(path.string() + ": corrupt model file (mean calibration length)");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt model file (" + e.what() + ")");
  } catch (const DomainError& e) {
    throw FormatError(path.string() + ": corrupt model file (" + e.what() + ")");
  }
}

ModelParams load_params(const std::filesystem::path& path, const Architecture& expected) {
  ModelParams p = load_params(path);
  if (p.arch().hash() != expected.hash()) {
    throw ArchitectureMismatch("architecture mismatch: file " + path.string() + " has hash " +
                               p.arch().hash() + " (" + p.arch().descriptor() +
                               "), expected hash " + expected.hash() + " (" +
                               expected.descriptor() + ")");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Dense layers

namespace {

const double kLogMaxC = std::log(kMaxDistanceFactor);

/// tanh through the vectorized exponential; absolute error ~1e-16.
MatrixXd fast_tanh(const MatrixXd& z) {
  const Eigen::ArrayXXd t = (-2.0 * z.array().abs()).exp();
  return (z.array().sign() * (1.0 - t) / (1.0 + t)).matrix();
}

struct MlpCache {
  std::vector<MatrixXd> acts;
};

void mlp_forward(const MlpSpec& spec, const double* w, const MatrixXd& x, MlpCache& cache) {
  cache.acts.resize(spec.layers.size() + 1);
  cache.acts[0] = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    // Products run on aligned copies so the result does not depend on where
    // the flat parameter buffer happens to sit in memory.
    const MatrixXd W = Eigen::Map<const MatrixXd>(w + l.weightOffset, l.out, l.in);
    const VectorXd b = Eigen::Map<const VectorXd>(w + l.biasOffset, l.out);
    MatrixXd z = W * cache.acts[i];
    z.colwise() += b;
    if (i + 1 < spec.layers.size()) z = fast_tanh(z);
    cache.acts[i + 1] = std::move(z);
  }
}

/// Backpropagates dY; accumulates weight gradients into g (if non-null) and
/// returns dLoss/dInput.
MatrixXd mlp_backward(const MlpSpec& spec, const double* w, const MlpCache& cache,
                      const MatrixXd& dY, double* g) {
  MatrixXd d = dY;
  for (std::size_t ii = spec.layers.size(); ii-- > 0;) {
    const LayerSpec& l = spec.layers[ii];
    if (ii + 1 < spec.layers.size()) {
      d = (d.array() * (1.0 - cache.acts[ii + 1].array().square())).matrix();
    }
    if (g) {
      const MatrixXd dW = d * cache.acts[ii].transpose();
      const VectorXd db = d.rowwise().sum();
      Eigen::Map<MatrixXd>(g + l.weightOffset, l.out, l.in) += dW;
      Eigen::Map<VectorXd>(g + l.biasOffset, l.out) += db;
    }
    const MatrixXd W = Eigen::Map<const MatrixXd>(w + l.weightOffset, l.out, l.in);
    d = W.transpose() * d;
  }
  return d;
}

MatrixXd mlp_eval(const MlpSpec& spec, const double* w, const MatrixXd& x) {
  MlpCache c;
  mlp_forward(spec, w, x, c);
  return std::move(c.acts.back());
}

// ---------------------------------------------------------------------------
// p-independent stage: eye features and distance correction.
// Columns 0..B-1 are right eyes, B..2B-1 left eyes.

struct Encoder {
  int B = 0;
  MlpCache eye, dist1, dist2;
  MatrixXd feat;  // E x 2B
  VectorXd a;     // pre-activation per column of c
  VectorXd c;     // 2B
};

void check_finite(const NormalizedSample& s) {
  if (!s.eyeInputs[0].allFinite() || !s.eyeInputs[1].allFinite() || !s.faceInput.allFinite() ||
      !std::isfinite(s.rhoRough)) {
    throw DomainError("non-finite network input in sample " + std::to_string(s.sampleIndex));
  }
}

void encode(const ModelParams& theta, std::span<const NormalizedSample> samples, Encoder& enc,
            bool keepCaches) {
  const Architecture& a = theta.arch();
  const int B = static_cast<int>(samples.size());
  const int E = a.eyeFeatures;
  enc.B = B;
  MatrixXd x(a.eyeInputs, 2 * B);
  for (int b = 0; b < B; ++b) {
    check_finite(samples[b]);
    x.col(b) = samples[b].eyeInputs[0];
    x.col(B + b) = samples[b].eyeInputs[1];
  }
  const double* w = theta.flat().data();
  mlp_forward(theta.eye_net(), w, x, enc.eye);
  enc.feat = enc.eye.acts.back();

  enc.a = VectorXd::Zero(2 * B);
  switch (a.mode) {
    case DistanceMode::None:
      break;
    case DistanceMode::PerEye:
      mlp_forward(theta.dist_head(), w, enc.feat, enc.dist1);
      enc.a = enc.dist1.acts.back().row(0).transpose();
      break;
    case DistanceMode::EyesOnly:
    case DistanceMode::EyesAndFace: {
      const bool face = a.mode == DistanceMode::EyesAndFace;
      const int rows = a.dist_inputs();
      MatrixXd d1(rows, B), d2(rows, B);
      d1.topRows(E) = enc.feat.leftCols(B);
      d1.middleRows(E, E) = enc.feat.rightCols(B);
      d2.topRows(E) = enc.feat.rightCols(B);
      d2.middleRows(E, E) = enc.feat.leftCols(B);
      if (face) {
        for (int b = 0; b < B; ++b) {
          d1.col(b).tail(a.faceInputs) = samples[b].faceInput;
          d2.col(b).tail(a.faceInputs) = samples[b].faceInputMirrored;
        }
      }
      mlp_forward(theta.dist_head(), w, d1, enc.dist1);
      mlp_forward(theta.dist_head(), w, d2, enc.dist2);
      const VectorXd shared =
          0.5 * (enc.dist1.acts.back().row(0) + enc.dist2.acts.back().row(0)).transpose();
      enc.a.head(B) = shared;
      enc.a.tail(B) = shared;
      break;
    }
  }
  enc.c = (enc.a.array().tanh() * kLogMaxC).exp().matrix();
  if (!keepCaches) {
    enc.eye.acts.clear();
    enc.dist1.acts.clear();
    enc.dist2.acts.clear();
  }
}

void encode_backward(const ModelParams& theta, const Encoder& enc, MatrixXd dFeat,
                     const VectorXd& dc, double* g) {
  const Architecture& a = theta.arch();
  const int B = enc.B;
  const int E = a.eyeFeatures;
  const double* w = theta.flat().data();
  if (a.mode != DistanceMode::None) {
    const VectorXd th = enc.a.array().tanh().matrix();
    const VectorXd da =
        (dc.array() * enc.c.array() * kLogMaxC * (1.0 - th.array().square())).matrix();
    if (a.mode == DistanceMode::PerEye) {
      dFeat += mlp_backward(theta.dist_head(), w, enc.dist1, da.transpose(), g);
    } else {
      // Shared c: both eye columns feed the same pre-activation.
      const MatrixXd dShared = 0.5 * (da.head(B) + da.tail(B)).transpose();
      const MatrixXd g1 = mlp_backward(theta.dist_head(), w, enc.dist1, dShared, g);
      const MatrixXd g2 = mlp_backward(theta.dist_head(), w, enc.dist2, dShared, g);
      dFeat.leftCols(B) += g1.topRows(E) + g2.middleRows(E, E);
      dFeat.rightCols(B) += g1.middleRows(E, E) + g2.topRows(E);
    }
  }
  mlp_backward(theta.eye_net(), w, enc.eye, dFeat, g);
}

// ---------------------------------------------------------------------------
// Per-eye loss term, generic over double and ad::Var.

inline double val(double x) { return x; }
inline long double val(long double x) { return x; }
inline double val(const ad::Var& x) { return x.value(); }

template <typename T>
T overshoot_sq(const T& v, double hi) {
  if (val(v) < 0.0) return v * v;
  if (val(v) > hi) return (v - hi) * (v - hi);
  return T(0.0);
}

template <typename T>
T hinge_generic(const T& ox, const T& oy, const T& c, int cropW, int cropH, const HingeWeights& w) {
  T origin = overshoot_sq(ox, cropW - 1.0) + overshoot_sq(oy, cropH - 1.0);
  T dist(0.0);
  if (val(c) > w.cHigh) dist = (c - w.cHigh) * (c - w.cHigh);
  if (val(c) < w.cLow) dist = (w.cLow - c) * (w.cLow - c);
  return origin * w.origin + dist * w.distance;
}

template <typename T>
T eye_term(const NormalizedSample& s, int eye, const T& ox, const T& oy, const T& dx, const T& dy,
           const T& c, const LossConfig& cfg) {
  const NormalizationContext& ctx = s.contexts[eye];
  const auto ray = kernels::assemble_ray<T>({ox, oy}, {dx, dy}, c, s.rhoRough,
                                            ctx.normCam.intrinsics());
  // Rotation3 is orthogonal, so its inverse is the transpose.
  const Mat3& m = ctx.rotation.matrix();
  const std::array<double, 9> rinv{m(0, 0), m(1, 0), m(2, 0), m(0, 1), m(1, 1),
                                   m(2, 1), m(0, 2), m(1, 2), m(2, 2)};
  const auto origin = kernels::mat_vec(rinv, ray.origin);
  const auto dir = kernels::mat_vec(rinv, ray.direction);
  const kernels::Vec3<T> target{T(s.target.x()), T(s.target.y()), T(s.target.z())};
  T term = kernels::miss_distance(origin, dir, target) +
           hinge_generic(ox, oy, c, ctx.cropWidth, ctx.cropHeight, cfg.hinges);
  if (cfg.irisAnchor && s.irisAnchor) {
    const T ex = ox - s.irisCenter[eye].x();
    const T ey = oy - s.irisCenter[eye].y();
    term = term + (ex * ex + ey * ey) * cfg.lambdaIris;
  }
  return term;
}

struct GazeGrads {
  double* theta = nullptr;   // may be null
  MatrixXd* feat = nullptr;  // E x 2B, may be null
  VectorXd* c = nullptr;     // 2B, may be null
  MatrixXd* calib = nullptr; // 2N x B, may be null
};

/// Sum over samples and eyes of the per-eye term. Gradients (of scale * sum)
/// are written to the non-null members of `grads`.
double gaze_stage(const ModelParams& theta, std::span<const NormalizedSample> samples,
                  const MatrixXd& feat, const VectorXd& c, const MatrixXd& calib,
                  const LossConfig& cfg, double scale, const GazeGrads* grads) {
  const Architecture& a = theta.arch();
  const int B = static_cast<int>(samples.size());
  const int E = a.eyeFeatures;
  const int N = a.calibDims;
  MatrixXd g(a.gaze_inputs(), 2 * B);
  g.topRows(E) = feat;
  if (N > 0) {
    g.block(E, 0, N, B) = calib.topRows(N);
    g.block(E, B, N, B) = calib.bottomRows(N);
  }
  g.row(E + N) = c.transpose();

  const double* w = theta.flat().data();
  MlpCache cache;
  mlp_forward(theta.gaze_head(), w, g, cache);
  const MatrixXd& out = cache.acts.back();

  const bool wantGrad = grads != nullptr;
  MatrixXd dOut;
  VectorXd dcGeom;
  if (wantGrad) {
    dOut.setZero(4, 2 * B);
    dcGeom.setZero(2 * B);
  }
  ad::Tape tape;
  std::vector<double> adj;
  double total = 0.0;
  for (int col = 0; col < 2 * B; ++col) {
    const int b = col < B ? col : col - B;
    const int eye = col < B ? 0 : 1;
    const NormalizedSample& s = samples[b];
    const Vec2 center = s.contexts[eye].crop_center();
    const double ox = center.x() + kOriginScalePx * out(0, col);
    const double oy = center.y() + kOriginScalePx * out(1, col);
    double term;
    if (wantGrad) {
      tape.clear();
      const ad::Var vox = tape.variable(ox), voy = tape.variable(oy);
      const ad::Var vdx = tape.variable(out(2, col)), vdy = tape.variable(out(3, col));
      const ad::Var vc = tape.variable(c(col));
      const ad::Var t = eye_term<ad::Var>(s, eye, vox, voy, vdx, vdy, vc, cfg);
      term = t.value();
      if (std::isfinite(term)) {
        tape.gradient(t, adj);
        dOut(0, col) = scale * kOriginScalePx * adj[vox.index()];
        dOut(1, col) = scale * kOriginScalePx * adj[voy.index()];
        dOut(2, col) = scale * adj[vdx.index()];
        dOut(3, col) = scale * adj[vdy.index()];
        dcGeom(col) = scale * adj[vc.index()];
      }
    } else {
      term = eye_term<double>(s, eye, ox, oy, out(2, col), out(3, col), c(col), cfg);
    }
    if (!std::isfinite(term)) {
      throw NumericalError("non-finite loss for sample " + std::to_string(s.sampleIndex) +
                           (eye == 0 ? " (right eye)" : " (left eye)"));
    }
    total += term;
  }
  if (!wantGrad) return total;

  const MatrixXd dG = mlp_backward(theta.gaze_head(), w, cache, dOut, grads->theta);
  if (grads->feat) *grads->feat = dG.topRows(E);
  if (grads->c) *grads->c = dcGeom + dG.row(E + N).transpose();
  if (grads->calib) {
    grads->calib->resize(2 * N, B);
    if (N > 0) {
      grads->calib->topRows(N) = dG.block(E, 0, N, B);
      grads->calib->bottomRows(N) = dG.block(E, B, N, B);
    }
  }
  return total;
}

void check_batch(const ModelParams& theta, const Batch& batch) {
  if (batch.samples.empty()) throw DomainError("empty batch");
  const int n2 = 2 * theta.arch().calibDims;
  if (batch.calib.rows() != n2 || batch.calib.cols() != static_cast<long>(batch.samples.size())) {
    throw DomainError("calibration matrix must be 2N x batch size");
  }
  if (!batch.calib.allFinite()) throw DomainError("non-finite calibration parameters");
}

}  // namespace

double hinge_terms(const Vec2& o2D, double c, int cropW, int cropH, const HingeWeights& w) {
  return hinge_generic<double>(o2D.x(), o2D.y(), c, cropW, cropH, w);
}

LossGrad loss_and_grad(const ModelParams& theta, const Batch& batch, const LossConfig& cfg) {
  check_batch(theta, batch);
  const int B = static_cast<int>(batch.samples.size());
  Encoder enc;
  encode(theta, batch.samples, enc, true);

  LossGrad r;
  r.theta.assign(theta.size(), 0.0);
  MatrixXd dFeat;
  VectorXd dc;
  GazeGrads gg{r.theta.data(), &dFeat, &dc, &r.calib};
  const double scale = 1.0 / (2.0 * B);
  r.loss = scale * gaze_stage(theta, batch.samples, enc.feat, enc.c, batch.calib, cfg, scale, &gg);
  encode_backward(theta, enc, std::move(dFeat), dc, r.theta.data());
  return r;
}

double loss_value(const ModelParams& theta, const Batch& batch, const LossConfig& cfg) {
  check_batch(theta, batch);
  Encoder enc;
  encode(theta, batch.samples, enc, false);
  const double scale = 1.0 / (2.0 * batch.samples.size());
  return scale * gaze_stage(theta, batch.samples, enc.feat, enc.c, batch.calib, cfg, scale, nullptr);
}

namespace {

std::vector<NetworkOutput> outputs_from(const ModelParams& theta,
                                        std::span<const NormalizedSample> samples,
                                        const MatrixXd& feat, const VectorXd& c,
                                        const MatrixXd& calib) {
  const Architecture& a = theta.arch();
  const int B = static_cast<int>(samples.size());
  const int E = a.eyeFeatures;
  const int N = a.calibDims;
  MatrixXd g(a.gaze_inputs(), 2 * B);
  g.topRows(E) = feat;
  if (N > 0) {
    g.block(E, 0, N, B) = calib.topRows(N);
    g.block(E, B, N, B) = calib.bottomRows(N);
  }
  g.row(E + N) = c.transpose();
  const MatrixXd out = mlp_eval(theta.gaze_head(), theta.flat().data(), g);
  std::vector<NetworkOutput> res(B);
  for (int col = 0; col < 2 * B; ++col) {
    const int b = col < B ? col : col - B;
    const int eye = col < B ? 0 : 1;
    const Vec2 center = samples[b].contexts[eye].crop_center();
    EyeOutput& e = res[b].eyes[eye];
    e.o2D = center + kOriginScalePx * Vec2(out(0, col), out(1, col));
    e.d2D = Vec2(out(2, col), out(3, col));
    e.c = c(col);
  }
  return res;
}

}  // namespace

NetworkOutput forward(const ModelParams& theta, const NormalizedSample& sample,
                      std::span<const double> p) {
  const int n2 = 2 * theta.arch().calibDims;
  if (static_cast<int>(p.size()) != n2) throw DomainError("calibration vector must have length 2N");
  for (double v : p) {
    if (!std::isfinite(v)) throw DomainError("non-finite calibration parameter");
  }
  std::span<const NormalizedSample> one(&sample, 1);
  Encoder enc;
  encode(theta, one, enc, false);
  const MatrixXd calib = Eigen::Map<const VectorXd>(p.data(), n2);
  return outputs_from(theta, one, enc.feat, enc.c, calib).front();
}

std::array<GazeRay, 2> output_rays(const NormalizedSample& sample, const NetworkOutput& out) {
  std::array<GazeRay, 2> rays;
  for (int eye = 0; eye < 2; ++eye) {
    const auto& ctx = sample.contexts[eye];
    const auto& e = out.eyes[eye];
    const GazeRay n = geometry::assemble_ray(e.o2D, e.d2D, e.c, sample.rhoRough, ctx.normCam,
                                             eye == 0 ? Frame::NormalizedRight : Frame::NormalizedLeft);
    rays[eye] = geometry::denormalize_ray(n, ctx.rotation);
  }
  return rays;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::size_t kChunk = 2048;
}

FrozenEncoding::FrozenEncoding(const ModelParams& theta,
                               std::span<const NormalizedSample> samples)
    : theta_(&theta), samples_(samples) {
  const int B = static_cast<int>(samples.size());
  const int E = theta.arch().eyeFeatures;
  eyeFeatures_.resize(E, 2 * B);
  c_.resize(2 * B);
  // Stored chunk-contiguous: chunk k occupies columns [2*start, 2*(start+n)).
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples.size() - start);
    Encoder enc;
    encode(theta, samples.subspan(start, n), enc, false);
    eyeFeatures_.middleCols(2 * start, 2 * n) = enc.feat;
    c_.segment(2 * start, 2 * n) = enc.c;
  }
}

double FrozenEncoding::loss(std::span<const double> p, const LossConfig& cfg,
                            std::span<double> grad) const {
  const int n2 = 2 * theta_->arch().calibDims;
  if (static_cast<int>(p.size()) != n2) throw DomainError("calibration vector must have length 2N");
  if (samples_.empty()) {
    std::fill(grad.begin(), grad.end(), 0.0);
    return 0.0;
  }
  const Eigen::Map<const VectorXd> pv(p.data(), n2);
  const double scale = 1.0 / (2.0 * samples_.size());
  double total = 0.0;
  VectorXd gsum = VectorXd::Zero(n2);
  for (std::size_t start = 0; start < samples_.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples_.size() - start);
    const MatrixXd calib = pv.replicate(1, static_cast<long>(n));
    const MatrixXd feat = eyeFeatures_.middleCols(2 * start, 2 * n);
    const VectorXd c = c_.segment(2 * start, 2 * n);
    if (grad.empty()) {
      total += gaze_stage(*theta_, samples_.subspan(start, n), feat, c, calib, cfg, scale, nullptr);
    } else {
      MatrixXd dCalib;
      GazeGrads gg{nullptr, nullptr, nullptr, &dCalib};
      total += gaze_stage(*theta_, samples_.subspan(start, n), feat, c, calib, cfg, scale, &gg);
      gsum += dCalib.rowwise().sum();
    }
  }
  if (!grad.empty()) {
    if (static_cast<int>(grad.size()) != n2) throw DomainError("gradient buffer length");
    Eigen::Map<VectorXd>(grad.data(), n2) = gsum;
  }
  return scale * total;
}

std::vector<NetworkOutput> FrozenEncoding::outputs(std::span<const double> p) const {
  const int n2 = 2 * theta_->arch().calibDims;
  if (static_cast<int>(p.size()) != n2) throw DomainError("calibration vector must have length 2N");
  const Eigen::Map<const VectorXd> pv(p.data(), n2);
  std::vector<NetworkOutput> all;
  all.reserve(samples_.size());
  for (std::size_t start = 0; start < samples_.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, samples_.size() - start);
    const MatrixXd calib = pv.replicate(1, static_cast<long>(n));
    auto part = outputs_from(*theta_, samples_.subspan(start, n),
                             eyeFeatures_.middleCols(2 * start, 2 * n),
                             c_.segment(2 * start, 2 * n), calib);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

namespace {

using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

MatL mlp_eval_extended(const MlpSpec& spec, const double* w, MatL x) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const MatL W = Eigen::Map<const MatrixXd>(w + l.weightOffset, l.out, l.in).cast<long double>();
    const MatL b = Eigen::Map<const VectorXd>(w + l.biasOffset, l.out).cast<long double>();
    MatL z = W * x;
    z.colwise() += b.col(0);
    if (i + 1 < spec.layers.size()) z = z.unaryExpr([](long double v) { return std::tanh(v); });
    x = std::move(z);
  }
  return x;
}

/// Same loss as loss_value evaluated in extended precision; the
/// finite-difference oracle uses it so that its rounding noise stays well
/// below the tolerance.
long double reference_loss(const ModelParams& theta, const Batch& batch, const LossConfig& cfg) {
  const Architecture& a = theta.arch();
  const auto samples = batch.samples;
  const int B = static_cast<int>(samples.size());
  const int E = a.eyeFeatures;
  const int N = a.calibDims;
  const double* w = theta.flat().data();
  MatL x(a.eyeInputs, 2 * B);
  for (int b = 0; b < B; ++b) {
    x.col(b) = samples[b].eyeInputs[0].cast<long double>();
    x.col(B + b) = samples[b].eyeInputs[1].cast<long double>();
  }
  const MatL feat = mlp_eval_extended(theta.eye_net(), w, x);
  std::vector<long double> pre(2 * B, 0.0L);
  if (a.mode == DistanceMode::PerEye) {
    const MatL d = mlp_eval_extended(theta.dist_head(), w, feat);
    for (int col = 0; col < 2 * B; ++col) pre[col] = d(0, col);
  } else if (a.mode != DistanceMode::None) {
    const int rows = a.dist_inputs();
    MatL d1(rows, B), d2(rows, B);
    d1.topRows(E) = feat.leftCols(B);
    d1.middleRows(E, E) = feat.rightCols(B);
    d2.topRows(E) = feat.rightCols(B);
    d2.middleRows(E, E) = feat.leftCols(B);
    if (a.mode == DistanceMode::EyesAndFace) {
      for (int b = 0; b < B; ++b) {
        d1.col(b).tail(a.faceInputs) = samples[b].faceInput.cast<long double>();
        d2.col(b).tail(a.faceInputs) = samples[b].faceInputMirrored.cast<long double>();
      }
    }
    const MatL o1 = mlp_eval_extended(theta.dist_head(), w, d1);
    const MatL o2 = mlp_eval_extended(theta.dist_head(), w, d2);
    for (int b = 0; b < B; ++b) pre[b] = pre[B + b] = 0.5L * (o1(0, b) + o2(0, b));
  }
  std::vector<long double> c(2 * B);
  for (int col = 0; col < 2 * B; ++col) {
    c[col] = std::exp(std::tanh(pre[col]) * std::log(static_cast<long double>(kMaxDistanceFactor)));
  }
  MatL g(a.gaze_inputs(), 2 * B);
  g.topRows(E) = feat;
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < N; ++n) {
      g(E + n, b) = batch.calib(n, b);
      g(E + n, B + b) = batch.calib(N + n, b);
    }
  }
  for (int col = 0; col < 2 * B; ++col) g(E + N, col) = c[col];
  const MatL out = mlp_eval_extended(theta.gaze_head(), w, g);
  long double total = 0.0L;
  for (int col = 0; col < 2 * B; ++col) {
    const int b = col < B ? col : col - B;
    const int eye = col < B ? 0 : 1;
    const Vec2 center = samples[b].contexts[eye].crop_center();
    const long double ox = center.x() + kOriginScalePx * out(0, col);
    const long double oy = center.y() + kOriginScalePx * out(1, col);
    total += eye_term<long double>(samples[b], eye, ox, oy, out(2, col), out(3, col), c[col], cfg);
  }
  return total / (2.0L * B);
}

}  // namespace

GradCheckResult gradient_check(const ModelParams& theta, const Batch& batch, const LossConfig& cfg,
                               double h, double floor) {
  const LossGrad analytic = loss_and_grad(theta, batch, cfg);
  GradCheckResult res;
  auto consider = [&](double a, double n, std::size_t idx) {
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (rel > res.maxRelError || !std::isfinite(rel)) {
      res.maxRelError = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
      res.worstIndex = idx;
    }
    ++res.coordinates;
  };
  ModelParams probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe.flat()[i];
    const double hi = orig + h, lo = orig - h;
    probe.flat()[i] = hi;
    const long double up = reference_loss(probe, batch, cfg);
    probe.flat()[i] = lo;
    const long double down = reference_loss(probe, batch, cfg);
    probe.flat()[i] = orig;
    consider(analytic.theta[i], static_cast<double>((up - down) / (hi - lo)), i);
  }
  Batch pb{batch.samples, batch.calib};
  for (long r = 0; r < pb.calib.rows(); ++r) {
    for (long col = 0; col < pb.calib.cols(); ++col) {
      const double orig = pb.calib(r, col);
      const double hi = orig + h, lo = orig - h;
      pb.calib(r, col) = hi;
      const long double up = reference_loss(theta, pb, cfg);
      pb.calib(r, col) = lo;
      const long double down = reference_loss(theta, pb, cfg);
      pb.calib(r, col) = orig;
      consider(analytic.calib(r, col), static_cast<double>((up - down) / (hi - lo)),
               theta.size() + static_cast<std::size_t>(r * pb.calib.cols() + col));
    }
  }
  return res;
}

}  // namespace gazekit::diffnet
