// gazekit command-line entry point.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 numerical failure,
// 3 I/O or file-format error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "gazekit/calib.hpp"
#include "gazekit/dataset_io.hpp"
#include "gazekit/diffnet.hpp"
#include "gazekit/errors.hpp"
#include "gazekit/experiment.hpp"
#include "gazekit/features.hpp"
#include "gazekit/log.hpp"
#include "gazekit/trainer.hpp"

namespace fs = std::filesystem;
using namespace gazekit;
using Json = io::Json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 1;
  bool dryRun = false;
};

Json load_config(const std::string& path) {
  try {
    return io::read_json_file(path);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

template <typename F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

std::vector<features::NormalizedSample> normalize_all(const eyesim::Dataset& ds) {
  std::vector<features::NormalizedSample> out;
  out.reserve(ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    out.push_back(features::normalize(ds.samples[i], static_cast<int>(i)));
  }
  return out;
}

std::vector<double> mean_calibration_of(const diffnet::ModelParams& theta) {
  if (theta.meanCalibration.size() == static_cast<std::size_t>(2 * theta.arch().calibDims)) {
    return theta.meanCalibration;
  }
  return std::vector<double>(2 * theta.arch().calibDims, 0.0);
}

// --- simulate --------------------------------------------------------------

int cmd_simulate(const Common& c) {
  if (c.config.empty()) throw UsageError("simulate needs --config");
  const Json j = load_config(c.config);
  eyesim::SimConfig cfg =
      as_usage([&] { return io::sim_config_from_json(j, {"n_persons", "samples_per_person"}); });
  if (c.seed) cfg.seed = *c.seed;
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  if (c.dryRun) {
    std::cout << io::to_json(cfg).dump(2) << '\n';
    return kOk;
  }
  if (c.out.empty()) throw UsageError("simulate needs --out");
  const eyesim::Dataset ds = eyesim::generate_dataset(cfg);
  io::write_dataset(fs::path(c.out), ds);
  std::cout << "persons " << cfg.nPersons << ", samples " << ds.samples.size() << ", rejected "
            << ds.stats.rejected << " (rate " << ds.stats.rejection_rate() << ")\n";
  return kOk;
}

// --- train -----------------------------------------------------------------

int cmd_train(const Common& c, const std::string& data, bool resume) {
  if (data.empty() || c.out.empty()) throw UsageError("train needs --data and --out");
  trainer::TrainConfig cfg;
  if (!c.config.empty()) {
    const Json j = load_config(c.config);
    cfg = as_usage([&] { return trainer::train_config_from_json(j); });
  }
  if (c.seed) cfg.seed = *c.seed;
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  if (c.dryRun) {
    std::cout << trainer::to_json(cfg).dump(2) << '\n';
    return kOk;
  }
  const fs::path modelPath(c.out);
  std::optional<diffnet::ModelParams> start;
  if (fs::exists(modelPath)) {
    if (!resume) {
      throw UsageError(modelPath.string() + " exists; pass --resume to continue training it");
    }
    start = diffnet::load_params(modelPath, cfg.arch);
  } else if (resume) {
    throw UsageError("--resume given but " + modelPath.string() + " does not exist");
  }
  const eyesim::Dataset ds = io::read_dataset(data);
  const trainer::TrainReport rep = trainer::train(
      ds.samples, cfg, start ? &*start : nullptr,
      [](int e, double l) { log::logger()->info("epoch {} loss {:.4f} mm", e, l); });
  diffnet::save_params(modelPath, rep.theta);
  fs::path stem = modelPath;
  stem.replace_extension();
  io::write_text_file(stem.string() + ".report.json", trainer::to_json(rep).dump(2) + "\n");
  io::write_text_file(stem.string() + ".loss.csv", trainer::loss_curve_csv(rep));
  std::cout << "final loss " << rep.epochLoss.back() << " mm after " << rep.epochLoss.size()
            << " epochs; model " << modelPath.string() << '\n';
  return kOk;
}

// --- calibrate -------------------------------------------------------------

int cmd_calibrate(const Common& c, const std::string& modelPath, const std::string& data, int k) {
  if (modelPath.empty() || data.empty() || c.out.empty()) {
    throw UsageError("calibrate needs --model, --data and --out");
  }
  if (k < 0) throw UsageError("--k must be >= 0");
  if (c.dryRun) {
    std::cout << Json{{"model", modelPath}, {"data", data}, {"k", k}, {"out", c.out}}.dump(2) << '\n';
    return kOk;
  }
  const diffnet::ModelParams theta = diffnet::load_params(modelPath);
  const eyesim::Dataset ds = io::read_dataset(data);
  const auto all = normalize_all(ds);
  std::map<int, std::vector<features::NormalizedSample>> byPerson;
  for (const auto& s : all) {
    auto& v = byPerson[s.personId];
    if (static_cast<int>(v.size()) < k) v.push_back(s);
  }
  const std::vector<double> pbar = mean_calibration_of(theta);
  Json persons = Json::array();
  for (const auto& [id, cal] : byPerson) {
    const calib::CalibResult r = calib::calibrate(theta, pbar, cal);
    persons.push_back({{"person_id", id},
                       {"k", cal.size()},
                       {"p", r.p},
                       {"initial_loss_mm", r.initialError},
                       {"final_loss_mm", r.finalCalibError},
                       {"iterations", r.iterations},
                       {"converged", r.converged},
                       {"stalled", r.stalled},
                       {"line_search_failed", r.lineSearchFailed}});
  }
  const Json out{{"format", "gazekit-calib/1"},
                 {"arch_hash", theta.arch().hash()},
                 {"model", modelPath},
                 {"data", data},
                 {"k", k},
                 {"persons", persons}};
  io::write_text_file(c.out, out.dump(2) + "\n");
  std::cout << "calibrated " << byPerson.size() << " persons with k = " << k << '\n';
  return kOk;
}

// --- evaluate --------------------------------------------------------------

int cmd_evaluate(const Common& c, const std::string& modelPath, const std::string& data,
                 const std::string& calibPath) {
  if (modelPath.empty() || data.empty() || c.out.empty()) {
    throw UsageError("evaluate needs --model, --data and --out");
  }
  if (c.dryRun) {
    std::cout << Json{{"model", modelPath}, {"data", data}, {"calib", calibPath}, {"out", c.out}}.dump(2)
              << '\n';
    return kOk;
  }
  const diffnet::ModelParams theta = diffnet::load_params(modelPath);
  const eyesim::Dataset ds = io::read_dataset(data);
  const auto all = normalize_all(ds);
  std::map<int, std::vector<double>> perPerson;
  if (!calibPath.empty()) {
    const Json cj = io::read_json_file(calibPath);
    try {
      if (cj.at("arch_hash").get<std::string>() != theta.arch().hash()) {
        throw ArchitectureMismatch("calibration file was made for architecture " +
                                   cj.at("arch_hash").get<std::string>() + ", model has " +
                                   theta.arch().hash());
      }
      for (const auto& p : cj.at("persons")) {
        perPerson[p.at("person_id").get<int>()] = p.at("p").get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(calibPath + ": " + e.what());
    }
  }
  const std::vector<double> pbar = mean_calibration_of(theta);
  for (const auto& s : all) perPerson.emplace(s.personId, pbar);
  const calib::EvalReport rep = calib::evaluate(theta, perPerson, all);
  const fs::path dir(c.out);
  fs::create_directories(dir);
  Json j = calib::to_json(rep);
  j["format"] = "gazekit-eval/1";
  j["model"] = modelPath;
  j["data"] = data;
  io::write_text_file(dir / "eval.json", j.dump(2) + "\n");
  io::write_text_file(dir / "eval.csv", calib::persons_csv(rep));
  std::cout << "mean error " << rep.meanDeg << " deg (pooled " << rep.pooledMeanDeg
            << ", median " << rep.medianDeg << "), nan eyes " << rep.nanEyes << '\n';
  return kOk;
}

// --- experiment ------------------------------------------------------------

int cmd_experiment(const Common& c, const std::string& kind, const std::string& model) {
  experiment::ExperimentSpec spec;
  if (!c.config.empty()) {
    Json j = load_config(c.config);
    if (!kind.empty()) j["kind"] = kind;
    if (c.seed) j["seed"] = *c.seed;
    spec = as_usage([&] { return experiment::spec_from_json(j); });
  } else {
    if (kind.empty()) throw UsageError("experiment needs --kind or --config");
    spec = experiment::default_spec(as_usage([&] { return experiment::parse_kind(kind); }),
                                    c.seed.value_or(1));
  }
  if (!model.empty()) spec.model = model;
  spec.workers = c.workers;
  spec.outDir = c.out.empty() ? fs::path("out") : fs::path(c.out);
  if (c.dryRun) {
    std::cout << experiment::to_json(spec).dump(2) << '\n';
    return kOk;
  }
  const auto res = experiment::run_experiment(spec);
  std::cout << res.summary.at("statistics").dump() << '\n';
  for (const auto& p : res.points) {
    if (p.failed) std::cerr << "point " << p.value << " failed: " << p.error << '\n';
  }
  return res.ok() ? kOk : kNumerical;
}

// --- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const Common& c, int instances) {
  if (instances <= 0) throw UsageError("--instances must be positive");
  if (c.dryRun) {
    std::cout << Json{{"instances", instances}, {"seed", c.seed.value_or(1)}}.dump(2) << '\n';
    return kOk;
  }
  const double worst = experiment::gradient_check_suite(instances, c.seed.value_or(1));
  const bool ok = worst < 1e-4;
  std::cout << "max relative gradient error " << worst << " over " << instances << " instances: "
            << (ok ? "ok" : "FAILED") << '\n';
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gazekit: gaze-ray regression with latent per-person calibration on synthetic PCCR data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gazekit 1.0");
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "JSON configuration file");
    sub->add_option("--seed", c.seed, "Override the configured seed");
    sub->add_option("--out", c.out, "Output path (file or directory)");
    sub->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--dry-run", c.dryRun, "Print the effective configuration and exit");
  };

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset (JSON Lines)");
  add_common(sim);

  std::string data, model, calibPath, kind;
  bool resume = false;
  int k = 9, instances = 20;

  auto* train = app.add_subcommand("train", "Train weights and per-person calibration rows");
  add_common(train);
  train->add_option("--data", data, "Training dataset")->required();
  train->add_flag("--resume", resume, "Continue training the model at --out");

  auto* cal = app.add_subcommand("calibrate", "Calibrate each person on their first k samples");
  add_common(cal);
  cal->add_option("--model", model, "Model file")->required();
  cal->add_option("--data", data, "Calibration dataset")->required();
  cal->add_option("--k", k, "Calibration samples per person");

  auto* ev = app.add_subcommand("evaluate", "Angular error of a model on a dataset");
  add_common(ev);
  ev->add_option("--model", model, "Model file")->required();
  ev->add_option("--data", data, "Evaluation dataset")->required();
  ev->add_option("--calib", calibPath, "Per-person calibration file from `calibrate`");

  auto* exp = app.add_subcommand(
      "experiment",
      "Run a sweep: nparams, ksweep, distmode, depthplanes, irisanchor or gradcheck.\n"
      "Writes <out>/<kind>.csv with columns\n"
      "  experiment,value,person_id,repeat,k,mean_error_deg\n"
      "(one row per sweep value, person, repeat and k; mean test error in degrees),\n"
      "<out>/<kind>.json with per-point means, standard errors, consistency bands\n"
      "and origin statistics, and the trained models.");
  add_common(exp);
  exp->add_option("--kind", kind, "Experiment kind (overrides the config)");
  exp->add_option("--model", model, "Pretrained model for ksweep");

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  add_common(gc);
  gc->add_option("--instances", instances, "Random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*sim) return cmd_simulate(c);
    if (*train) return cmd_train(c, data, resume);
    if (*cal) return cmd_calibrate(c, model, data, k);
    if (*ev) return cmd_evaluate(c, model, data, calibPath);
    if (*exp) return cmd_experiment(c, kind, model);
    if (*gc) return cmd_gradcheck(c, instances);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const ArchitectureMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
