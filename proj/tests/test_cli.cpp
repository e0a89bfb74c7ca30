/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include "timeflow/timeflow.hpp"

namespace fs = std::filesystem;
using namespace timeflow;

namespace {

struct CliRun {
  int status = -1;
  std::string output;
};

CliRun run(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" TIMEFLOW_CLI_PATH "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

double mean_magnitude(const DisplacementField& f, const std::vector<std::uint8_t>& mask) {
  double acc = 0.0;
  Index n = 0;
  for (Index p = 0; p < f.voxels(); ++p) {
    if (!mask[p]) continue;
    const Vec3 u = f.at(p);
    acc += std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    ++n;
  }
  return acc / static_cast<double>(n);
}

const char* kPhantomConfig = R"({
  "subjects": 3,
  "seed": 4,
  "phantom": {
    "dims": [24, 24, 24],
    "brain_radii": [10, 9, 8.5],
    "ventricle_radius": 2.0,
    "gm_thickness": 2.0,
    "profile": [1, 5, 7],
    "atrophy_rate": 1.5
  }
})";

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "timeflow_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    write_text(root / "phantom.json", kPhantomConfig);
    ASSERT_EQ(run("--config " + q(root / "phantom.json") + " --out " + q(root / "data") + " phantom").status, 0);
    write_text(root / "train.json", R"({
  "mode": "direct",
  "network": {"channels": [4, 8, 8]},
  "optimizer": {"learning_rate": 0.001},
  "steps": 120,
  "train_manifest": "data/manifest.csv",
  "validation_manifest": "data/manifest.csv"
})");
    const CliRun r = run("--config " + q(root / "train.json") + " --seed 7 --out " + q(root / "model") + " train");
    ASSERT_EQ(r.status, 0) << r.output;
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  static fs::path visit(int subject, int k) {
    char name[64];
    std::snprintf(name, sizeof name, "sub%03d_v%d.nii.gz", subject, k);
    return root / "data" / name;
  }
  static std::string pair_args() {
    return "--checkpoint " + q(root / "model" / "model.tfck") + " --moving " + q(visit(0, 0)) + " --fixed " +
           q(visit(0, 2));
  }
};

fs::path Cli::root;

}  // namespace

TEST_F(Cli, TrainWritesItsOutputs) {
  for (const char* f : {"config.json", "model.tfck", "loss.csv", "validation.csv"}) {
    EXPECT_TRUE(fs::exists(root / "model" / f)) << f;
  }
}

TEST_F(Cli, PhantomIsIdempotent) {
  ASSERT_EQ(run("--config " + q(root / "phantom.json") + " --out " + q(root / "again") + " phantom").status, 0);
  for (const auto& e : fs::directory_iterator(root / "data")) {
    EXPECT_EQ(slurp(e.path()), slurp(root / "again" / e.path().filename())) << e.path().filename();
  }
}

TEST_F(Cli, TrainingIsIdempotent) {
  for (const char* dir : {"short_a", "short_b"}) {
    const CliRun r = run("--config " + q(root / "train.json") + " --seed 3 --out " + q(root / dir) + " train",
                      "TIMEFLOW_STEPS=3");
    ASSERT_EQ(r.status, 0) << r.output;
  }
  for (const char* f : {"model.tfck", "loss.csv", "validation.csv"}) {
    EXPECT_EQ(slurp(root / "short_a" / f), slurp(root / "short_b" / f)) << f;
  }
}

TEST_F(Cli, EnvironmentOverridesConfig) {
  const CliRun r = run("--config " + q(root / "phantom.json") + " --out " + q(root / "env") + " phantom",
                    "TIMEFLOW_SUBJECTS=1");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(load_manifest((root / "env" / "manifest.csv").string()).size(), 1u);
}

TEST_F(Cli, RegisterAtZeroReturnsTheInput) {
  const CliRun r = run("--out " + q(root / "reg" / "zero") + " register " + pair_args() + " --t 0");
  ASSERT_EQ(r.status, 0) << r.output;
  const Volume in = nifti::read_volume(visit(0, 0).string());
  const Volume out = nifti::read_volume((root / "reg" / "zero_warped.nii.gz").string());
  ASSERT_EQ(in.data.size(), out.data.size());
  for (std::size_t i = 0; i < in.data.size(); ++i) ASSERT_NEAR(in.data[i], out.data[i], 1e-6);
}

TEST_F(Cli, RegisterWritesErrorMap) {
  const CliRun r = run("--out " + q(root / "reg" / "half") + " register " + pair_args() + " --t 0.5 --reference " +
                    q(visit(0, 1)));
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_TRUE(fs::exists(root / "reg" / "half_field.nii.gz"));
  EXPECT_TRUE(fs::exists(root / "reg" / "half_error.png"));
}

TEST_F(Cli, ExtrapolationMatchesLibraryPrediction) {
  const CliRun r = run("--out " + q(root / "ext") + " extrapolate " + pair_args() + " --times 2,4,6 --subject s");
  ASSERT_EQ(r.status, 0) << r.output;
  const auto net = load_checkpoint<float>((root / "model" / "model.tfck").string());
  const Volume moving = normalize_intensity(nifti::read_volume(visit(0, 0).string()));
  const Volume fixed = normalize_intensity(nifti::read_volume(visit(0, 2).string()));
  for (double t : {2.0, 4.0, 6.0}) {
    const auto base = root / "ext" / ("s_t" + std::to_string(static_cast<int>(t)));
    ASSERT_TRUE(fs::exists(base.string() + ".nii.gz")) << t;
    const auto got = nifti::read_field(base.string() + "_field.nii.gz");
    const auto want = net.predict(moving, fixed, t);
    ASSERT_EQ(got.u.size(), want.u.size());
    double err = 0.0;
    for (std::size_t i = 0; i < got.u.size(); ++i) err = std::max(err, std::abs(double(got.u[i]) - want.u[i]));
    EXPECT_LT(err, 1e-5) << t;
    EXPECT_GT(mean_magnitude(got, moving.mask), 0.0) << t;
  }
}

TEST_F(Cli, SeriesCommandsCheckTheirRanges) {
  EXPECT_EQ(run("--out " + q(root / "x") + " extrapolate " + pair_args() + " --times 0.5").status, 2);
  EXPECT_EQ(run("--out " + q(root / "x") + " interpolate " + pair_args() + " --times 2").status, 2);
  const CliRun ok = run("--out " + q(root / "int") + " interpolate " + pair_args() + " --times 0,0.5,1 --subject s");
  ASSERT_EQ(ok.status, 0) << ok.output;
  EXPECT_TRUE(fs::exists(root / "int" / "s_t0.5.nii.gz"));
}

TEST_F(Cli, MetricsOnIdenticalVolumesAreZero) {
  fs::create_directories(root / "pred");
  std::string manifest = "subject,t,path\n";
  for (int k = 0; k < 3; ++k) {
    fs::copy_file(visit(1, k), root / "pred" / ("sub001_t" + std::to_string(k) + ".nii.gz"),
                  fs::copy_options::overwrite_existing);
    manifest += "sub001," + std::to_string(k) + "," + visit(1, k).string() + "\n";
  }
  write_text(root / "gt.csv", manifest);
  const CliRun r = run("--out " + q(root / "metrics.csv") + " metrics --pred-dir " + q(root / "pred") + " --manifest " +
                    q(root / "gt.csv"));
  ASSERT_EQ(r.status, 0) << r.output;
  const auto rows = read_csv((root / "metrics.csv").string(), {"subject", "t", "MAE", "PSNR"});
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) EXPECT_EQ(std::stod(row.at("MAE")), 0.0);
}

TEST_F(Cli, AgingWritesTablesAndFigures) {
  const std::string base = "--checkpoint " + q(root / "model" / "model.tfck") + " --manifest " +
                           q(root / "data" / "manifest.csv");
  CliRun r = run("--out " + q(root / "aging_p") + " aging " + base + " --mode prospective");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(read_csv((root / "aging_p" / "aging.csv").string(), {"subject", "rate"}).size(), 3u);
  EXPECT_TRUE(fs::exists(root / "aging_p" / "aging_rates.png"));
  r = run("--out " + q(root / "aging_r") + " aging " + base + " --mode retrospective --reference first-second");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(read_csv((root / "aging_r" / "fits.csv").string(), {"subject", "slope"}).size(), 3u);
  EXPECT_TRUE(fs::exists(root / "aging_r" / "trajectories.png"));
  EXPECT_EQ(run("--out " + q(root / "aging_x") + " aging " + base + " --mode sideways").status, 2);
}

TEST_F(Cli, MalformedConfigReportsLineAndColumn) {
  write_text(root / "bad.json", "{\n  \"subjects\": 2,\n  \"seed\": ,\n}\n");
  const CliRun r = run("--config " + q(root / "bad.json") + " --out " + q(root / "bad") + " phantom");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("bad.json:3:"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownConfigKeyIsAnError) {
  write_text(root / "typo.json", "{\"subjcts\": 2}");
  const CliRun r = run("--config " + q(root / "typo.json") + " --out " + q(root / "typo") + " phantom");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("subjcts"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("--device gpu --out " + q(root / "dev") + " phantom").status, 2);
  EXPECT_EQ(run("train").status, 2);
  EXPECT_EQ(run("").status, 2);
  EXPECT_EQ(run("--out " + q(root / "m") + " metrics --pred-dir " + q(root) + " --manifest " + q(root / "missing.csv"))
                .status,
            2);
}

TEST_F(Cli, ModuleErrorsExitNonZero) {
  write_text(root / "short.csv", "subject,age_years,path\nsolo,70," + visit(0, 0).string() + "\n");
  const CliRun r = run("--out " + q(root / "short_out") + " aging --checkpoint " + q(root / "model" / "model.tfck") +
                    " --manifest " + q(root / "short.csv") + " --mode retrospective");
  // No subject has enough visits for the analysis.
  EXPECT_NE(r.status, 0) << r.output;
}
