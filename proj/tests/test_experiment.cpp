#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>

#include "gazekit/dataset_io.hpp"
#include "gazekit/errors.hpp"
#include "gazekit/experiment.hpp"

using namespace gazekit;
using namespace gazekit::experiment;

namespace {

std::filesystem::path fresh_dir(const char* name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ExperimentSpec tiny_ksweep(const std::filesystem::path& out) {
  const io::Json j = {{"kind", "ksweep"},
                      {"values", {"1", "4"}},
                      {"bench",
                       {{"train", {{"n_persons", 4}, {"samples_per_person", 40}}},
                        {"eval", {{"n_persons", 3}, {"samples_per_person", 30}}},
                        {"pool_size", 8},
                        {"training", {{"epochs", 2}, {"batch_size", 32}}}}},
                      {"policy", {{"min_repeats", 3}, {"max_repeats", 3}}},
                      {"seed", 4}};
  ExperimentSpec s = spec_from_json(j);
  s.outDir = out;
  return s;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("ols r2 on planted data") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  const int m = 200;
  Eigen::MatrixXd X(m, 3), Y(m, 2);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < 3; ++j) X(i, j) = n(rng);
    Y(i, 0) = 2.0 + X(i, 0) - 3.0 * X(i, 2);
    Y(i, 1) = n(rng);
  }
  const auto r2 = ols_r2(X, Y);
  CHECK(r2[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r2[1] < 0.1);

  // Direct recomputation through the normal equations.
  Eigen::MatrixXd A(m, 4);
  A << Eigen::VectorXd::Ones(m), X;
  const Eigen::VectorXd beta = (A.transpose() * A).ldlt().solve(A.transpose() * Y.col(1));
  const Eigen::VectorXd res = Y.col(1) - A * beta;
  const double ssTot = (Y.col(1).array() - Y.col(1).mean()).square().sum();
  CHECK(r2[1] == doctest::Approx(1.0 - res.squaredNorm() / ssTot).epsilon(1e-9));
}

TEST_CASE("parallel_for visits every index and rethrows") {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(hits.size(), 3, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(parallel_for(10, 2,
                               [](std::size_t i) {
                                 if (i == 5) throw NumericalError("boom");
                               }),
                  NumericalError);
}

TEST_CASE("experiment spec parsing") {
  for (Kind k : {Kind::NParams, Kind::KSweep, Kind::DistMode, Kind::DepthPlanes, Kind::IrisAnchor,
                 Kind::GradCheck}) {
    CHECK(parse_kind(to_string(k)) == k);
    const ExperimentSpec s = default_spec(k, 3);
    CHECK_FALSE(s.values.empty());
    const ExperimentSpec back = spec_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
  }
  CHECK_THROWS_AS(spec_from_json(io::Json{{"values", {"1"}}}), FormatError);
  CHECK_THROWS_AS(spec_from_json(io::Json{{"kind", "ksweep"}, {"ks2", {1}}}), FormatError);
  CHECK_THROWS(parse_kind("sweep"));
}

TEST_CASE("benchmark defaults") {
  const BenchmarkConfig b = default_benchmark(1);
  CHECK(b.train.nPersons == 200);
  CHECK(b.train.samplesPerPerson == 300);
  CHECK(b.eval.nPersons == 40);
  CHECK(b.eval.seed != b.train.seed);
  const BenchmarkConfig d = depth_benchmark(1, false);
  CHECK(d.train.targetPlanes == std::vector<double>{0.0});
  CHECK(d.eval.targetPlanes.size() == 3);
  CHECK(d.training.arch.calibDims == 0);
}

TEST_CASE("split_eval") {
  eyesim::SimConfig cfg;
  cfg.nPersons = 3;
  cfg.samplesPerPerson = 12;
  const auto ds = eyesim::generate_dataset(cfg);
  const auto persons = split_eval(ds, 5);
  REQUIRE(persons.size() == 3);
  for (const auto& p : persons) {
    CHECK(p.pool.size() == 5);
    CHECK(p.test.size() == 7);
    for (const auto& s : p.pool) CHECK(s.personId == p.personId);
  }
}

TEST_CASE("tiny k sweep writes sorted csv and summary, reproducibly") {
  const auto a = fresh_dir("gazekit_exp_a"), b = fresh_dir("gazekit_exp_b");
  const ExperimentResult ra = run_experiment(tiny_ksweep(a));
  REQUIRE(ra.ok());
  CHECK_FALSE(std::filesystem::exists(a / "ksweep.partial.csv"));
  const std::string csv = slurp(a / "ksweep.csv");
  CHECK(csv.rfind(std::string(kCsvHeader) + "\n", 0) == 0);
  const io::Json summary = io::read_json_file(a / "ksweep.json");
  CHECK(summary.at("complete").get<bool>());
  CHECK(summary.at("points").size() == 2);

  // k = 1 draws three repeats; k = 8 uses the whole pool once.
  const KResult& k1 = ra.points[0].ks[1];
  CHECK(k1.k == 1);
  CHECK(k1.repeats == 3);
  CHECK(k1.mu.size() == 3);
  CHECK(std::isfinite(k1.bandDeg));

  run_experiment(tiny_ksweep(b));
  CHECK(slurp(a / "ksweep.csv") == slurp(b / "ksweep.csv"));
  CHECK(slurp(a / "ksweep.json").size() > 0);
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("evaluator: k equal to the pool is a single repeat") {
  eyesim::SimConfig cfg;
  cfg.nPersons = 2;
  cfg.samplesPerPerson = 20;
  const auto ds = eyesim::generate_dataset(cfg);
  const auto persons = split_eval(ds, 6);
  diffnet::Architecture arch;
  arch.hidden = 8;
  arch.eyeFeatures = 4;
  arch.calibDims = 1;
  const auto theta = diffnet::init_params(2, arch);
  const Evaluator ev(theta, persons);
  const std::vector<double> p0(2, 0.0);
  const KResult full = ev.run(6, p0, TrialPolicy{}, 1);
  CHECK(full.repeats == 1);
  CHECK(full.stdErrDeg == 0.0);
  const KResult none = ev.run(0, p0, TrialPolicy{}, 1);
  CHECK(none.repeats == 1);
  int rows = 0;
  const KResult some = ev.run(2, p0, TrialPolicy{4, 4, 0.0}, 1, [&](const TrialRow&) { ++rows; });
  CHECK(some.repeats == 4);
  CHECK(rows == 2 * 4);
}

TEST_CASE("gradient check suite") { CHECK(gradient_check_suite(3, 9) < 1e-4); }

}  // TEST_SUITE
