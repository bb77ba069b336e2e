#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "posesynth/harness.hpp"

using namespace posesynth;
namespace fs = std::filesystem;

namespace {

const std::string kBin = POSESYNTH_BIN;

int run(const std::string& args) {
  const int rc = std::system((kBin + " " + args).c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "posesynth_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream cfg(d / "tiny.cfg");
    cfg << "train_count=12\ntest_count=4\nimage_size=32\n";
    cfg << "source_rotation_gate_deg=90\n";
    cfg.close();
    return d;
  }();
  return dir;
}

const fs::path& scene() {
  static const fs::path dir = [] {
    const fs::path d = work() / "scene";
    REQUIRE(run("generate --spec biased-street --seed 7 --out " + d.string() +
                " --config " + (work() / "tiny.cfg").string() +
                " > " + (work() / "gen.out").string()) == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("generate populates a scene directory and prints the seed") {
  const fs::path& sc = scene();
  CHECK(fs::exists(sc / "intrinsics.txt"));
  CHECK(fs::exists(sc / "images"));
  const std::string out = slurp(work() / "gen.out");
  CHECK(out.find("effective seed: 7") != std::string::npos);

  const SceneDatabase db = load_scene(sc.string());
  CHECK(db.records.size() == 16);
  CHECK(db.train_indices().size() == 12);
}

TEST_CASE("train without a seed is a user error naming the flag") {
  const fs::path err = work() / "noseed.err";
  CHECK(run("train --scene " + scene().string() + " --out " +
            (work() / "nope").string() + " 2> " + err.string()) == 1);
  CHECK(slurp(err).find("--seed") != std::string::npos);
  CHECK(!fs::exists(work() / "nope"));
}

TEST_CASE("train writes a checkpoint and loss log, and is reproducible") {
  const std::string common =
      "train --scene " + scene().string() +
      " --seed 5 --policy real --epochs 2 --config " +
      (work() / "tiny.cfg").string() + " --threads 1 --out ";
  const fs::path a = work() / "run_a";
  const fs::path b = work() / "run_b";
  REQUIRE(run(common + a.string() + " > " + (work() / "train.out").string()) == 0);
  REQUIRE(run(common + b.string() + " > /dev/null") == 0);

  CHECK(slurp(work() / "train.out").find("effective seed: 5") != std::string::npos);
  const std::string csv = slurp(a / "loss.csv");
  CHECK(csv.rfind("epoch,mean_loss,lr", 0) == 0);

  // identical argv and files produce identical outputs
  CHECK(slurp(a / "model.ckpt") == slurp(b / "model.ckpt"));
  CHECK(csv == slurp(b / "loss.csv"));

  uint64_t epoch = 0;
  Model model = Model::load((a / "model.ckpt").string(), &epoch);
  CHECK(epoch == 2);
  CHECK(model.config().image_size == 32);
}

TEST_CASE("eval reads a checkpoint and writes a parseable report") {
  const fs::path run_dir = work() / "run_a";
  if (!fs::exists(run_dir / "model.ckpt")) {
    REQUIRE(run("train --scene " + scene().string() +
                " --seed 5 --policy real --epochs 2 --config " +
                (work() / "tiny.cfg").string() + " --out " + run_dir.string() +
                " > /dev/null") == 0);
  }
  const fs::path rep = work() / "report.json";
  REQUIRE(run("eval --scene " + scene().string() + " --model " +
              (run_dir / "model.ckpt").string() + " --out " + rep.string() +
              " > " + (work() / "eval.out").string()) == 0);

  const LocalizationReport r = LocalizationReport::from_json(slurp(rep));
  CHECK(r.label == "eval");
  CHECK(r.t_err_m.size() == 4);
  CHECK(r.throughput_ips == 0.0);  // timing goes to the log, not the file
  CHECK(slurp(work() / "eval.out").find("median_r") != std::string::npos);

  CHECK(run("eval --scene " + scene().string() + " 2> /dev/null") == 1);
}

TEST_CASE("synth renders the test views it can cover") {
  const fs::path out = work() / "views";
  REQUIRE(run("synth --scene " + scene().string() + " --config " +
              (work() / "tiny.cfg").string() + " --out " + out.string() +
              " > /dev/null") == 0);
  const auto summary = nlohmann::json::parse(slurp(out / "synthesis.json"));
  CHECK(summary.size() == 4);
  size_t pngs = 0;
  for (const auto& entry : fs::directory_iterator(out)) {
    if (entry.path().extension() == ".png") ++pngs;
  }
  CHECK(pngs >= 1);
  CHECK(pngs <= 4);
}

TEST_CASE("sample and analyze-bias emit bias reports") {
  const fs::path poses = work() / "poses.json";
  REQUIRE(run("sample --scene " + scene().string() +
              " --policy out-dist --seed 3 --out " + poses.string() +
              " > /dev/null") == 0);
  const auto doc = nlohmann::json::parse(slurp(poses));
  CHECK(doc["policy"] == "out-dist");
  CHECK(doc["poses"].size() == 12);
  CHECK(doc["bias"]["total"] == 12);

  const fs::path bias = work() / "bias.json";
  REQUIRE(run("analyze-bias --scene " + scene().string() + " --out " +
              bias.string()) == 0);
  const BiasReport rep = BiasReport::from_json(slurp(bias));
  CHECK(rep.total == 12);
  CHECK(rep.mode_count == 4);
  size_t sum = 0;
  for (size_t c : rep.bins) sum += c;
  CHECK(sum == 12);
}

TEST_CASE("experiment sanity-check writes the three-report json") {
  const fs::path out = work() / "exp";
  REQUIRE(run("experiment sanity-check --scene " + scene().string() +
              " --seed 9 --epochs 2 --config " + (work() / "tiny.cfg").string() +
              " --out " + out.string() + " > /dev/null") == 0);
  const auto doc = nlohmann::json::parse(slurp(out / "sanity.json"));
  REQUIRE(doc.contains("upper_bound"));
  REQUIRE(doc.contains("synth"));
  REQUIRE(doc.contains("retrieval"));
  CHECK(doc["upper_bound"]["pairs_built"] == 4);
  CHECK(doc["retrieval"]["label"] == "retrieval-only");
}

TEST_CASE("user errors exit with 1, help with 0") {
  CHECK(run("--help > /dev/null") == 0);
  CHECK(run("2> /dev/null") == 1);  // missing subcommand
  CHECK(run("train --bogus-flag 2> /dev/null") == 1);
  CHECK(run("generate --spec nope --seed 1 --out " + (work() / "x").string() +
            " 2> /dev/null") == 1);
  CHECK(run("experiment bogus --scene " + scene().string() +
            " --seed 1 2> /dev/null") == 1);
  CHECK(run("train --scene /does/not/exist --seed 1 --out " +
            (work() / "y").string() + " 2> /dev/null") == 1);

  const fs::path bad = work() / "bad.cfg";
  std::ofstream(bad) << "not_a_real_key=3\n";
  const fs::path err = work() / "badkey.err";
  CHECK(run("analyze-bias --scene " + scene().string() + " --config " +
            bad.string() + " 2> " + err.string()) == 1);
  CHECK(slurp(err).find("not_a_real_key") != std::string::npos);
}
