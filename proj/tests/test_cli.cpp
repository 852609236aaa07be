// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "crst/config.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace crst;
namespace fs = std::filesystem;

namespace {

const char* kTinyIni = R"(# tiny run
[data]
n_strong = 8
n_weak = 4
n_unlabeled = 8
n_validation = 4
[scene]
clip_len = 2
n_channels = 8
min_duration = 0.5
max_duration = 1
[model]
conv_blocks = 3x2x2, 4x1x4
hidden = 3
[train]
epochs = 2
batch = 2, 4, 2
[postproc]
alpha_steps = 3
beta_steps = 2
)";

struct Captured {
  int code = 0;
  std::string out;
  std::string err;
};

Captured call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Captured c;
  c.code = cli::run(args, out, err);
  c.out = out.str();
  c.err = err.str();
  return c;
}

fs::path workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "crst_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.ini") << kTinyIni;
    return d;
  }();
  return dir;
}

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config text round trip and rejection") {
  const auto cfg = config_from_ini(parse_ini(kTinyIni));
  CHECK(cfg.data.n_strong == 8);
  CHECK(cfg.train.model.n_mel_in == 8);
  CHECK(cfg.train.model.conv_blocks.size() == 2);
  const auto again = config_from_ini(parse_ini(cfg.to_ini()));
  CHECK(again.to_ini() == cfg.to_ini());
  CHECK(again.train.model == cfg.train.model);
  CHECK_THROWS_AS(parse_ini("[train]\nepochs 3\n"), ConfigError);
  CHECK_THROWS_AS(config_from_ini(parse_ini("[bogus]\n")), ConfigError);
  CHECK_THROWS_AS(config_from_ini(parse_ini("[train]\nepoch = 3\n")), ConfigError);
  CHECK_THROWS_AS(config_from_ini(parse_ini("[train]\nepochs = many\n")), ConfigError);
  CHECK_THROWS_AS(parse_blocks("4x2"), ConfigError);
}

TEST_CASE("exit codes") {
  const auto w = workdir();
  CHECK(call({"--help"}).code == cli::kOk);
  CHECK(call({"frobnicate"}).code == cli::kConfig);
  std::ofstream(w / "bad.ini") << "[train]\nepochs = -1\n";
  CHECK(call({"gen-data", "--config", (w / "bad.ini").string(), "--out", (w / "x").string()})
            .code == cli::kConfig);
  CHECK(call({"gen-data", "--config", (w / "nope.ini").string(), "--out", (w / "x").string()})
            .code == cli::kConfig);
  const auto missing = call({"train", "--config", (w / "tiny.ini").string(), "--data",
                             (w / "no_such_data").string(), "--out", (w / "r").string()});
  CHECK(missing.code == cli::kData);
  CHECK_FALSE(missing.err.empty());
  std::ofstream(w / "junk.ckpt") << "junk";
  CHECK(call({"postproc", "--checkpoint", (w / "junk.ckpt").string(), "--data",
              (w / "no_such_data").string(), "--out", (w / "p").string()})
            .code == cli::kData);
}

TEST_CASE("full pipeline in-process with replay") {
  const auto w = workdir();
  const auto ini = (w / "tiny.ini").string();
  const auto data = (w / "data").string();
  REQUIRE(call({"gen-data", "--config", ini, "--seed", "3", "--out", data}).code == 0);
  CHECK(fs::exists(w / "data" / "manifest.json"));

  const auto run = (w / "run").string();
  const auto tr = call({"train", "--config", ini, "--data", data, "--variant", "crst", "--out", run});
  REQUIRE(tr.code == 0);
  CHECK(tr.out.find("crst: ") == 0);
  for (const char* f : {"history.jsonl", "curves.csv", "best.ckpt", "final.ckpt", "summary.json",
                        "config.ini", "manifest.json"}) {
    CHECK(fs::exists(fs::path(run) / f));
  }
  const auto summary = nlohmann::json::parse(read_all(fs::path(run) / "summary.json"));
  CHECK(summary["variant"] == "crst");
  CHECK(read_all(fs::path(run) / "curves.csv").find("weight_w_m1") != std::string::npos);

  const auto ckpt = (fs::path(run) / "best.ckpt").string();
  for (const std::string mode : {"global", "classwise", "sweep"}) {
    const auto out = (w / ("pp_" + mode)).string();
    REQUIRE(call({"postproc", "--config", ini, "--checkpoint", ckpt, "--data", data, "--mode",
                  mode, "--out", out})
                .code == 0);
  }
  CHECK(fs::exists(w / "pp_classwise" / "params.json"));
  const auto sweep = read_all(w / "pp_sweep" / "sweep.csv");
  CHECK(sweep.rfind("alpha,beta,macro_f\nglobal,global,", 0) == 0);
  CHECK(call({"postproc", "--checkpoint", ckpt, "--data", data, "--mode", "median",
              "--out", (w / "pp_bad").string()})
            .code == cli::kConfig);

  const auto ev = (w / "eval").string();
  REQUIRE(call({"eval", "--intervals", (w / "pp_global" / "intervals.csv").string(), "--data",
                data, "--out", ev})
              .code == 0);
  for (const char* f : {"score.csv", "confusion.csv", "concurrency.csv"}) {
    CHECK(fs::exists(fs::path(ev) / f));
  }
  REQUIRE(call({"compare", "--run", "crst=" + ev + "/score.csv", "--run",
                "mt=" + ev + "/score.csv", "--out", (w / "cmp").string()})
              .code == 0);
  CHECK(read_all(w / "cmp" / "comparison.csv").find("p_vs_crst") != std::string::npos);

  REQUIRE(call({"pseudo-labels", "--checkpoint", ckpt, "--data", data, "--split", "unlabeled",
                "--index", "1", "--model", "1", "--out", (w / "pl").string()})
              .code == 0);
  CHECK(fs::exists(w / "pl" / "pseudo_labels.csv"));

  const auto rp = call({"replay", "--manifest", run + "/manifest.json"});
  CHECK(rp.code == 0);
  CHECK(rp.out.find("DIFFERS") == std::string::npos);
  CHECK(cli::hash_outputs(run) == cli::hash_outputs(run + ".replay"));

  // A tampered recorded hash must be reported.
  auto manifest = nlohmann::json::parse(read_all(fs::path(run) / "manifest.json"));
  manifest["outputs"]["curves.csv"] = "0000000000000000";
  std::ofstream(fs::path(run) / "manifest.json") << manifest.dump(2);
  const auto bad = call({"replay", "--manifest", run + "/manifest.json", "--out",
                         (w / "replay2").string()});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("DIFFERS") != std::string::npos);
}

TEST_CASE("installed tool binary") {
  const char* tool = std::getenv("CRST_TOOL");
  if (tool == nullptr) {
    MESSAGE("CRST_TOOL not set; skipping subprocess checks");
    return;
  }
  const auto w = workdir();
  const std::string t = tool;
  CHECK(shell(t + " --help") == 0);
  CHECK(shell(t + " gen-data --config " + (w / "bad_sub.ini").string() + " --out " +
              (w / "sub").string()) == 2);
  CHECK(shell(t + " gen-data --config " + (w / "tiny.ini").string() + " --out " +
              (w / "sub").string()) == 0);
  CHECK(shell(t + " train --config " + (w / "tiny.ini").string() + " --data " +
              (w / "absent").string() + " --out " + (w / "sub_run").string()) == 3);
  CHECK(shell(t + " replay --manifest " + (w / "sub" / "manifest.json").string()) == 0);
}
