// Drives the installed binary end to end through std::system.

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "caveseg/caveline3d.hpp"
#include "caveseg/dataset.hpp"
#include "caveseg/png_io.hpp"
#include "testutil.hpp"

using namespace caveseg;
using caveseg::testing::TempDir;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args, const std::string& log_path) {
  const std::string cmd =
      std::string(CAVESEG_CLI_PATH) + " " + args + " > " + log_path + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  REQUIRE(status != -1);
  if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
  std::ifstream is(log_path);
  std::stringstream ss;
  ss << is.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json load_json(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is.good());
  return json::parse(is);
}

}  // namespace

TEST_CASE("train, infer, eval, and info form a working pipeline") {
  TempDir tmp("cli");
  const std::string log = (tmp.path / "log.txt").string();
  const std::string run_a = (tmp.path / "a").string();

  const std::string train_args =
      "train --preset tiny --synthetic 2 --epochs 1 --seed 3 --out ";
  CliResult r = run_cli(train_args + run_a, log);
  INFO(r.output);
  REQUIRE(r.code == 0);
  const std::string ckpt = run_a + "/model.ckpt";
  CHECK(std::filesystem::exists(ckpt));
  const json report = load_json(run_a + "/train_report.json");
  CHECK(report.at("seed").get<int>() == 3);
  CHECK(report.at("step_losses").size() == 2);
  CHECK(report.at("epochs").size() == 1);

  SUBCASE("the same seed reproduces the loss sequence and checkpoint bytes") {
    const std::string run_b = (tmp.path / "b").string();
    CliResult r2 = run_cli(train_args + run_b, log);
    REQUIRE(r2.code == 0);
    CHECK(load_json(run_b + "/train_report.json").at("step_losses") ==
          report.at("step_losses"));
    CHECK(slurp(run_b + "/model.ckpt") == slurp(ckpt));
  }

  SUBCASE("infer writes a palette mask and an alpha overlay") {
    const ClassPalette palette = ClassPalette::caveseg_default();
    const SegmentationSample s =
        generate_synthetic(12, 64, 64, {0, 1, 3, 5}, palette);
    const std::string img = (tmp.path / "frame.png").string();
    write_png_rgb(img, s.image);

    const std::string out1 = (tmp.path / "pred1").string();
    CliResult ri = run_cli("infer --checkpoint " + ckpt + " --image " + img +
                               " --out " + out1,
                           log);
    INFO(ri.output);
    REQUIRE(ri.code == 0);

    const ImageU8 mask = read_png_rgb(out1 + "/frame_mask.png");
    CHECK(mask.h == 64);
    CHECK(mask.w == 64);
    // Every mask pixel is one of the 13 palette colors.
    for (int y = 0; y < mask.h; ++y)
      for (int x = 0; x < mask.w; ++x) {
        bool known = false;
        for (const auto& e : palette.entries())
          known = known || (mask.at(y, x, 0) == e.rgb[0] &&
                            mask.at(y, x, 1) == e.rgb[1] &&
                            mask.at(y, x, 2) == e.rgb[2]);
        if (!known) {
          CAPTURE(y);
          CAPTURE(x);
          REQUIRE(known);
        }
      }

    const ImageU8 overlay = read_png_rgb(out1 + "/frame_overlay.png");
    for (const int y : {0, 13, 63})
      for (const int x : {0, 40, 63})
        for (int c = 0; c < 3; ++c)
          CHECK(int{overlay.at(y, x, c)} ==
                (int{s.image.at(y, x, c)} + int{mask.at(y, x, c)}) / 2);

    const std::string out2 = (tmp.path / "pred2").string();
    REQUIRE(run_cli("infer --checkpoint " + ckpt + " --image " + img +
                        " --out " + out2,
                    log)
                .code == 0);
    CHECK(slurp(out2 + "/frame_mask.png") == slurp(out1 + "/frame_mask.png"));
    CHECK(slurp(out2 + "/frame_overlay.png") ==
          slurp(out1 + "/frame_overlay.png"));
  }

  SUBCASE("eval scores the checkpoint on synthetic data") {
    const std::string out = (tmp.path / "eval").string();
    CliResult re = run_cli("eval --preset tiny --synthetic 1 --seed 3 "
                           "--checkpoint " +
                               ckpt + " --out " + out,
                           log);
    INFO(re.output);
    REQUIRE(re.code == 0);
    const json m = load_json(out + "/metrics.json");
    CHECK(m.at("miou").get<double>() >= 0.0);
    CHECK(m.at("miou").get<double>() <= 1.0);
    CHECK(m.at("per_class").size() == 13);
  }

  SUBCASE("info reports the checkpoint size next to the parameter bytes") {
    CliResult ri = run_cli("info --checkpoint " + ckpt, log);
    REQUIRE(ri.code == 0);
    std::istringstream is(ri.output);
    std::string key;
    long long params = -1, param_bytes = -1, ckpt_bytes = -1;
    while (is >> key) {
      if (key == "parameters") is >> params;
      else if (key == "parameter_bytes") is >> param_bytes;
      else if (key == "checkpoint_bytes") is >> ckpt_bytes;
      else is.ignore(1 << 20, '\n');
    }
    REQUIRE(params > 0);
    CHECK(param_bytes == 8 * params);
    REQUIRE(ckpt_bytes > 0);
    CHECK(std::abs(ckpt_bytes - param_bytes) <= param_bytes / 20);
  }
}

TEST_CASE("flags override config file values") {
  TempDir tmp("clicfg");
  const std::string log = (tmp.path / "log.txt").string();
  const std::string cfg = (tmp.path / "run.json").string();
  {
    std::ofstream os(cfg);
    os << R"({"epochs": 3, "seed": 9, "preset": "tiny"})";
  }
  const std::string out = (tmp.path / "out").string();
  CliResult r = run_cli("train --synthetic 1 --epochs 1 --config " + cfg +
                            " --out " + out,
                        log);
  INFO(r.output);
  REQUIRE(r.code == 0);
  const json report = load_json(out + "/train_report.json");
  CHECK(report.at("seed").get<int>() == 9);         // from the config file
  CHECK(report.at("step_losses").size() == 1);      // --epochs 1 wins over 3
}

TEST_CASE("usage errors exit with status 2") {
  TempDir tmp("cliusage");
  const std::string log = (tmp.path / "log.txt").string();

  CliResult missing_root = run_cli(
      "train --preset tiny --data " + (tmp.path / "no_such_dir").string(), log);
  CHECK(missing_root.code == 2);
  CHECK(missing_root.output.find("no_such_dir") != std::string::npos);

  CHECK(run_cli("infer --image " + (tmp.path / "x.png").string(), log).code ==
        2);
  CHECK(run_cli("eval --preset tiny --synthetic 1", log).code == 2);
  CHECK(run_cli("info --preset giant", log).code == 2);
  CHECK(run_cli("triangulate", log).code == 2);

  const std::string bad_cfg = (tmp.path / "bad.json").string();
  {
    std::ofstream os(bad_cfg);
    os << "{not json";
  }
  CHECK(run_cli("info --preset tiny --config " + bad_cfg, log).code == 2);
}

TEST_CASE("oracle eval scores ground truth at exactly 1.0") {
  TempDir tmp("clioracle");
  const std::string log = (tmp.path / "log.txt").string();
  const std::string out = (tmp.path / "out").string();
  CliResult r = run_cli(
      "eval --preset tiny --synthetic 2 --oracle --seed 5 --out " + out, log);
  INFO(r.output);
  REQUIRE(r.code == 0);
  int class_rows = 0;
  std::istringstream is(r.output);
  for (std::string line; std::getline(is, line);)
    if (line.rfind("class ", 0) == 0) ++class_rows;
  CHECK(class_rows == 13);

  const json m = load_json(out + "/metrics.json");
  CHECK(m.at("miou").get<double>() == 1.0);
  CHECK(m.at("macc").get<double>() == 1.0);
  CHECK(m.at("aacc").get<double>() == 1.0);
}

TEST_CASE("triangulate lifts a two-view fixture to PLY plus summary") {
  TempDir tmp("clitri");
  const std::string log = (tmp.path / "log.txt").string();

  CameraView v1;
  v1.fx = v1.fy = 500.0;
  v1.cx = 320.0;
  v1.cy = 240.0;
  CameraView v2 = v1;
  v2.rotation =
      Eigen::AngleAxisd(30.0 * M_PI / 180.0, Eigen::Vector3d::UnitY())
          .toRotationMatrix();
  v2.translation = -v2.rotation * Eigen::Vector3d(-1.8, 0.1, 0.4);
  const Eigen::Vector3d A(0.2, -0.1, 3.0), B(-0.3, 0.25, 3.2);
  for (CameraView* v : {&v1, &v2}) {
    Segment2D s;
    s.a = v->project(A);
    s.b = v->project(B);
    v->segments = {s};
  }
  const std::string views = (tmp.path / "views.json").string();
  save_views_json(views, {v1, v2});

  const std::string out1 = (tmp.path / "tri1").string();
  CliResult r = run_cli("triangulate --views " + views + " --out " + out1, log);
  INFO(r.output);
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(out1 + "/caveline.ply"));
  const json summary = load_json(out1 + "/caveline_summary.json");
  CHECK(summary.at("segments").get<int>() == 1);
  CHECK(summary.at("rejected").get<int>() == 0);
  CHECK(summary.at("reprojection_error").at("max").get<double>() < 1e-6);

  const std::string out2 = (tmp.path / "tri2").string();
  REQUIRE(run_cli("triangulate --views " + views + " --out " + out2, log)
              .code == 0);
  CHECK(slurp(out2 + "/caveline.ply") == slurp(out1 + "/caveline.ply"));

  const std::string single = (tmp.path / "single.json").string();
  save_views_json(single, {v1});
  CHECK(run_cli("triangulate --views " + single, log).code == 2);
}
