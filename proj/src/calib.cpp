#include "gazekit/calib.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "gazekit/bfgs.hpp"
#include "gazekit/errors.hpp"

namespace gazekit::calib {

using diffnet::FrozenEncoding;
using diffnet::ModelParams;
using features::NormalizedSample;

namespace {

CalibResult run_bfgs(const FrozenEncoding& enc, std::span<const double> pInit,
                     const diffnet::LossConfig& loss, int maxIterations, double gradTol) {
  const long n = static_cast<long>(pInit.size());
  const Eigen::VectorXd x0 = Eigen::Map<const Eigen::VectorXd>(pInit.data(), n);
  bfgs::Objective fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    return enc.loss(std::span<const double>(x.data(), n), loss, std::span<double>(g.data(), n));
  };
  bfgs::Options opt;
  opt.maxIterations = maxIterations;
  opt.gradTol = gradTol;
  const bfgs::Result r = bfgs::minimize(fn, x0, opt);
  CalibResult out;
  out.p.assign(r.x.data(), r.x.data() + n);
  out.initialError = r.f0;
  out.finalCalibError = r.f;
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.lineSearchFailed = r.lineSearchFailed;
  out.stalled = r.stalled;
  return out;
}

}  // namespace

CalibResult calibrate(const ModelParams& theta, std::span<const double> pInit,
                      std::span<const NormalizedSample> calSet, const CalibOptions& opt) {
  if (pInit.size() != static_cast<std::size_t>(2 * theta.arch().calibDims)) {
    throw DomainError("initial calibration vector must have length 2N");
  }
  if (calSet.empty()) {
    CalibResult r;
    r.p.assign(pInit.begin(), pInit.end());
    r.converged = true;
    return r;
  }
  const FrozenEncoding enc(theta, calSet);
  return run_bfgs(enc, pInit, opt.loss, opt.maxIterations, opt.gradTol);
}

CalibResult mean_calibration(const ModelParams& theta, std::span<const NormalizedSample> trainSet,
                             int maxIterations) {
  const std::vector<double> zero(2 * theta.arch().calibDims, 0.0);
  CalibOptions opt;
  opt.maxIterations = maxIterations;
  return calibrate(theta, zero, trainSet, opt);
}

std::vector<SampleError> sample_errors(const FrozenEncoding& enc,
                                       std::span<const NormalizedSample> samples,
                                       std::span<const double> p) {
  if (enc.size() != samples.size()) throw DomainError("encoding does not match the sample set");
  const auto outs = enc.outputs(p);
  std::vector<SampleError> res(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const NormalizedSample& s = samples[i];
    SampleError& e = res[i];
    e.personId = s.personId;
    e.sampleIndex = s.sampleIndex;
    const auto rays = diffnet::output_rays(s, outs[i]);
    double sum = 0.0;
    int finite = 0;
    for (int eye = 0; eye < 2; ++eye) {
      const Vec3& E = s.trueEye[eye];
      const double err = geometry::angular_error(E, s.target, rays[eye]);
      e.eyeErrorDeg[eye] = err;
      if (std::isfinite(err)) {
        sum += err;
        ++finite;
      } else {
        ++e.nanEyes;
      }
      e.originDistance[eye] = (rays[eye].origin - E).norm();
      e.originDepthError[eye] = rays[eye].origin.norm() - E.norm();
      e.rayToEye[eye] = geometry::miss_distance(rays[eye], E);
    }
    e.errorDeg = finite > 0 ? sum / finite : std::numeric_limits<double>::quiet_NaN();
  }
  return res;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

EvalReport summarize(std::span<const SampleError> errors) {
  EvalReport r;
  std::map<int, PersonSummary> byPerson;
  std::vector<double> all;
  all.reserve(errors.size());
  for (const SampleError& e : errors) {
    PersonSummary& ps = byPerson[e.personId];
    ps.personId = e.personId;
    ps.nanEyes += e.nanEyes;
    r.nanEyes += e.nanEyes;
    r.originDistances.push_back(e.originDistance[0]);
    r.originDistances.push_back(e.originDistance[1]);
    if (!std::isfinite(e.errorDeg)) continue;
    ps.meanErrorDeg += e.errorDeg;
    ++ps.samples;
    all.push_back(e.errorDeg);
  }
  double sumMeans = 0.0;
  int counted = 0;
  for (auto& [id, ps] : byPerson) {
    if (ps.samples > 0) {
      ps.meanErrorDeg /= ps.samples;
      sumMeans += ps.meanErrorDeg;
      ++counted;
    } else {
      ps.meanErrorDeg = std::numeric_limits<double>::quiet_NaN();
    }
    r.persons.push_back(ps);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.meanDeg = counted > 0 ? sumMeans / counted : nan;
  r.pooledMeanDeg =
      all.empty() ? nan : std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  r.medianDeg = quantile(all, 0.5);
  for (int i = 0; i < 9; ++i) r.quantilesDeg[i] = quantile(all, 0.1 * (i + 1));
  return r;
}

EvalReport evaluate(const ModelParams& theta, const std::map<int, std::vector<double>>& perPersonP,
                    std::span<const NormalizedSample> evalSet) {
  std::map<int, std::vector<NormalizedSample>> groups;
  for (const NormalizedSample& s : evalSet) {
    if (!perPersonP.count(s.personId)) {
      throw DomainError("no calibration vector for person " + std::to_string(s.personId));
    }
    if (!s.trueEye[0].allFinite() || !s.trueEye[1].allFinite() || !s.target.allFinite()) {
      throw DomainError("missing ground truth in sample " + std::to_string(s.sampleIndex));
    }
    groups[s.personId].push_back(s);
  }
  std::vector<SampleError> errors;
  errors.reserve(evalSet.size());
  for (const auto& [id, samples] : groups) {
    const FrozenEncoding enc(theta, samples);
    auto part = sample_errors(enc, samples, perPersonP.at(id));
    errors.insert(errors.end(), part.begin(), part.end());
  }
  return summarize(errors);
}

double consistency_band(const std::vector<std::vector<double>>& muPerPerson) {
  if (muPerPerson.empty()) throw DomainError("consistency band needs at least one person");
  double sumVar = 0.0;
  for (const auto& mu : muPerPerson) {
    if (mu.size() < 2) throw DomainError("consistency band needs at least two repeats");
    const double mean = std::accumulate(mu.begin(), mu.end(), 0.0) / static_cast<double>(mu.size());
    double ss = 0.0;
    for (double v : mu) ss += (v - mean) * (v - mean);
    sumVar += ss / static_cast<double>(mu.size() - 1);
  }
  return std::sqrt(sumVar / static_cast<double>(muPerPerson.size()));
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  nlohmann::ordered_json persons = nlohmann::ordered_json::array();
  for (const auto& p : r.persons) {
    persons.push_back({{"person_id", p.personId},
                       {"mean_error_deg", num(p.meanErrorDeg)},
                       {"samples", p.samples},
                       {"nan_eyes", p.nanEyes}});
  }
  nlohmann::ordered_json q = nlohmann::ordered_json::array();
  for (double v : r.quantilesDeg) q.push_back(num(v));
  return {{"mean_error_deg", num(r.meanDeg)},
          {"pooled_mean_error_deg", num(r.pooledMeanDeg)},
          {"median_error_deg", num(r.medianDeg)},
          {"quantiles_deg", q},
          {"consistency_band_deg", num(r.consistencyBandDeg)},
          {"nan_eyes", r.nanEyes},
          {"median_origin_distance_mm", num(quantile(r.originDistances, 0.5))},
          {"persons", persons}};
}

std::string persons_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "person_id,mean_error_deg,samples,nan_eyes\n";
  for (const auto& p : r.persons) {
    os << p.personId << ',' << p.meanErrorDeg << ',' << p.samples << ',' << p.nanEyes << '\n';
  }
  return os.str();
}

}  // namespace gazekit::calib
