#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#ifndef GAZEKIT_CLI
#define GAZEKIT_CLI "gazekit"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

const fs::path& workdir() {
  static const fs::path d = [] {
    const auto p = fs::temp_directory_path() / "gazekit_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

void write(const std::string& name, const std::string& text) { std::ofstream(workdir() / name) << text; }

std::string slurp(const std::string& name) {
  std::ifstream in(workdir() / name, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run cli(const std::string& args) {
  const std::string log = path("last.out");
  const std::string cmd = std::string("\"") + GAZEKIT_CLI + "\" " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp("last.out")};
}

void make_dataset() {
  if (fs::exists(workdir() / "ds.jsonl")) return;
  write("sim.json", R"({"n_persons": 3, "samples_per_person": 30, "seed": 2})");
  REQUIRE(cli("simulate --config " + path("sim.json") + " --out " + path("ds.jsonl")).code == 0);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("simulate is reproducible and reports its summary") {
  write("sim.json", R"({"n_persons": 3, "samples_per_person": 30, "seed": 2})");
  const Run a = cli("simulate --config " + path("sim.json") + " --out " + path("ds.jsonl"));
  CHECK(a.code == 0);
  CHECK(a.out.find("persons 3") != std::string::npos);
  CHECK(a.out.find("rejected") != std::string::npos);
  CHECK(cli("simulate --config " + path("sim.json") + " --out " + path("ds2.jsonl")).code == 0);
  CHECK(slurp("ds.jsonl") == slurp("ds2.jsonl"));
  CHECK(cli("simulate --config " + path("sim.json") + " --seed 3 --out " + path("ds3.jsonl")).code == 0);
  CHECK(slurp("ds.jsonl") != slurp("ds3.jsonl"));
}

TEST_CASE("missing required field is named") {
  write("bad.json", R"({"n_persons": 3})");
  const Run r = cli("simulate --config " + path("bad.json") + " --out " + path("x.jsonl"));
  CHECK(r.code == 1);
  CHECK(r.out.find("samples_per_person") != std::string::npos);
  CHECK_FALSE(fs::exists(workdir() / "x.jsonl"));
}

TEST_CASE("dry run prints the configuration without writing") {
  write("sim.json", R"({"n_persons": 3, "samples_per_person": 30, "seed": 2})");
  const Run r = cli("simulate --config " + path("sim.json") + " --out " + path("dry.jsonl") + " --dry-run");
  CHECK(r.code == 0);
  CHECK(r.out.find("\"n_persons\": 3") != std::string::npos);
  CHECK_FALSE(fs::exists(workdir() / "dry.jsonl"));
}

TEST_CASE("usage errors") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("train --out " + path("m.json")).code == 1);
  CHECK(cli("experiment --kind nonsense --dry-run").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("experiment help documents the csv schema") {
  const Run r = cli("experiment --help");
  CHECK(r.code == 0);
  CHECK(r.out.find("experiment,value,person_id,repeat,k,mean_error_deg") != std::string::npos);
}

TEST_CASE("missing input files are I/O errors") {
  CHECK(cli("train --data " + path("nope.jsonl") + " --out " + path("m_nope.json")).code == 3);
  CHECK(cli("evaluate --model " + path("nope.json") + " --data " + path("nope.jsonl") + " --out " +
            path("ev")).code == 3);
}

TEST_CASE("train refuses to overwrite without --resume and is reproducible") {
  make_dataset();
  write("train.json", R"({"epochs": 2, "batch_size": 16, "seed": 4})");
  const std::string base = "train --data " + path("ds.jsonl") + " --config " + path("train.json");
  REQUIRE(cli(base + " --out " + path("m1.json")).code == 0);
  REQUIRE(cli(base + " --out " + path("m2.json")).code == 0);
  CHECK(slurp("m1.json") == slurp("m2.json"));
  CHECK(slurp("m1.loss.csv") == slurp("m2.loss.csv"));
  const std::string before = slurp("m1.json");
  const Run refused = cli(base + " --out " + path("m1.json"));
  CHECK(refused.code == 1);
  CHECK(refused.out.find("--resume") != std::string::npos);
  CHECK(slurp("m1.json") == before);
  CHECK(cli(base + " --out " + path("m1.json") + " --resume").code == 0);
  CHECK(slurp("m1.json") != before);
}

TEST_CASE("divergence exits with the numerical code") {
  make_dataset();
  write("wild.json", R"({"epochs": 3, "batch_size": 16, "lr0": 10000.0, "lr_decay_factor": 1.0})");
  const Run r = cli("train --data " + path("ds.jsonl") + " --config " + path("wild.json") + " --out " +
                    path("wild_model.json"));
  CHECK(r.code == 2);
}

TEST_CASE("calibrate and evaluate") {
  make_dataset();
  write("train.json", R"({"epochs": 2, "batch_size": 16, "seed": 4})");
  if (!fs::exists(workdir() / "m3.json")) {
    REQUIRE(cli("train --data " + path("ds.jsonl") + " --config " + path("train.json") + " --out " +
                path("m3.json")).code == 0);
  }
  REQUIRE(cli("calibrate --model " + path("m3.json") + " --data " + path("ds.jsonl") + " --k 4 --out " +
              path("cal.json")).code == 0);
  const Run ev = cli("evaluate --model " + path("m3.json") + " --data " + path("ds.jsonl") + " --calib " +
                     path("cal.json") + " --out " + path("ev"));
  CHECK(ev.code == 0);
  CHECK(ev.out.find("mean error") != std::string::npos);
  CHECK(fs::exists(workdir() / "ev" / "eval.csv"));
  CHECK(fs::exists(workdir() / "ev" / "eval.json"));

  write("train_n2.json", R"({"epochs": 1, "batch_size": 16, "calib_dims": 2})");
  REQUIRE(cli("train --data " + path("ds.jsonl") + " --config " + path("train_n2.json") + " --out " +
              path("m_n2.json")).code == 0);
  CHECK(cli("evaluate --model " + path("m_n2.json") + " --data " + path("ds.jsonl") + " --calib " +
            path("cal.json") + " --out " + path("ev2")).code == 3);
}

TEST_CASE("gradcheck subcommand") {
  const Run r = cli("gradcheck --instances 2");
  CHECK(r.code == 0);
  CHECK(r.out.find("ok") != std::string::npos);
}

}  // TEST_SUITE
