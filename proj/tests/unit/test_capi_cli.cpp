#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

#include <bfm/bfm.h>

#include "helpers.hpp"

using nlohmann::json;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  bfm_string_free(s);
  return out;
}

struct Run {
  int code = -1;
  std::string output;
};

// Runs the CLI with stdout and stderr merged.
Run cli(const std::string& args) {
  const std::string cmd = std::string(BFM_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_SUITE("capi") {

TEST_CASE("status codes and last error") {
  CHECK(std::string(bfm_status_name(BFM_ERR_VERSION)) == "VersionError");
  CHECK(std::string(bfm_version()).size() > 0);
  bfm_volume* v = nullptr;
  CHECK(bfm_volume_read("/nonexistent/x.nii", &v) == BFM_ERR_IO);
  CHECK(v == nullptr);
  CHECK(std::string(bfm_last_error()).find("x.nii") != std::string::npos);
  CHECK(bfm_volume_read(nullptr, &v) == BFM_ERR_INVALID_ARGUMENT);
}

TEST_CASE("config resolution") {
  char* out = nullptr;
  REQUIRE(bfm_config_tiny(&out) == BFM_OK);
  const json tiny = json::parse(take(out));
  CHECK(tiny["embed_dim"] == 16);
  REQUIRE(bfm_config_resolve(tiny.dump().c_str(), R"({"seed": 5})", &out) == BFM_OK);
  const json merged = json::parse(take(out));
  CHECK(merged["seed"] == 5);
  CHECK(merged["embed_dim"] == 16);
  CHECK(bfm_config_resolve(nullptr, R"({"no_such_key": 1})", &out) == BFM_ERR_CONFIG);
  CHECK(bfm_config_resolve(nullptr, "{broken", &out) == BFM_ERR_CONFIG);
  CHECK(bfm_config_resolve(nullptr, R"({"heads": 3})", &out) == BFM_ERR_CONFIG);
}

TEST_CASE("volumes through the C API") {
  TempDir dir("capi_vol");
  const int dims[3] = {3, 2, 2};
  const double spacing[3] = {1.0, 2.0, 0.5};
  float vox[12];
  for (int i = 0; i < 12; ++i) vox[i] = 0.5f * static_cast<float>(i) - 1.0f;
  bfm_volume* v = nullptr;
  REQUIRE(bfm_volume_create(dims, spacing, vox, &v) == BFM_OK);
  const std::string path = (dir / "v.nii").string();
  REQUIRE(bfm_volume_write(v, path.c_str()) == BFM_OK);
  bfm_volume_free(v);
  bfm_volume* r = nullptr;
  REQUIRE(bfm_volume_read(path.c_str(), &r) == BFM_OK);
  int d[3];
  double s[3];
  bfm_volume_dims(r, d);
  bfm_volume_spacing(r, s);
  CHECK(d[0] == 3);
  CHECK(d[2] == 2);
  CHECK(s[1] == 2.0);
  CHECK(std::equal(vox, vox + 12, bfm_volume_data(r)));
  bfm_volume_free(r);
}

TEST_CASE("workflow through the C API") {
  TempDir dir("capi_flow");
  char* cfg_raw = nullptr;
  REQUIRE(bfm_config_tiny(&cfg_raw) == BFM_OK);
  json cfg = json::parse(take(cfg_raw));
  cfg["synth_cases"] = 3;
  cfg["synth_lesion_fraction"] = 1.0;
  cfg["epochs"] = 2;
  const std::string c = cfg.dump();

  bfm_manifest* m = nullptr;
  REQUIRE(bfm_synth_corpus(c.c_str(), (dir / "data").c_str(), &m) == BFM_OK);
  CHECK(bfm_manifest_case_count(m) == 3);
  bfm_manifest_free(m);
  const std::string manifest = (dir / "data" / "manifest.json").string();

  bfm_checkpoint* ck = nullptr;
  REQUIRE(bfm_pretrain(c.c_str(), manifest.c_str(), nullptr, (dir / "pre").c_str(), &ck) == BFM_OK);
  char* info = nullptr;
  REQUIRE(bfm_checkpoint_info(ck, &info) == BFM_OK);
  CHECK(json::parse(take(info))["task"] == "pretrain");
  bfm_checkpoint_free(ck);

  const std::string pre = (dir / "pre" / "final.bfmc").string();
  REQUIRE(bfm_finetune(c.c_str(), manifest.c_str(), pre.c_str(), (dir / "ft").c_str(), &ck) == BFM_OK);
  bfm_checkpoint_free(ck);

  char* csv = nullptr;
  char* log = nullptr;
  const std::string ft = (dir / "ft" / "final.bfmc").string();
  REQUIRE(bfm_evaluate(ft.c_str(), manifest.c_str(), "default", nullptr, 1, &csv, &log) == BFM_OK);
  const std::string table = take(csv);
  CHECK(std::count(table.begin(), table.end(), '\n') == 7);
  CHECK(json::parse(take(log)).contains("skipped"));

  CHECK(bfm_evaluate(pre.c_str(), manifest.c_str(), "default", nullptr, 1, &csv, &log) == BFM_ERR_CONFIG);
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("usage and exit codes") {
  const Run help = cli("--help");
  CHECK(help.code == 0);
  for (const char* cmd : {"build-dict", "synth-data", "pretrain", "gradcheck", "finetune", "evaluate",
                          "impute", "report"})
    CHECK_MESSAGE(help.output.find(cmd) != std::string::npos, cmd);

  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("pretrain --no-such-flag 1").code == 2);

  TempDir dir("cli_codes");
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK(cli("gradcheck --config " + q(dir / "bad.json")).code == 3);
  std::ofstream(dir / "unknown.json") << R"({"mystery": 1})";
  CHECK(cli("gradcheck --config " + q(dir / "unknown.json")).code == 3);
  const Run missing = cli("build-dict --root " + q(dir / "nope") + " --out " + q(dir / "m.json"));
  CHECK(missing.code == 1);
  CHECK(missing.output.find("error") != std::string::npos);
}

TEST_CASE("build-dict and gradcheck") {
  TempDir dir("cli_dict");
  fs::create_directories(dir / "corpus/sub_01");
  bfm::corpus::write_volume(testutil::ramp_volume({4, 4, 4}), dir / "corpus/sub_01/t1.nii");
  const Run r = cli("build-dict --root " + q(dir / "corpus") + " --out " + q(dir / "manifest.json"));
  CHECK(r.code == 0);
  const json m = json::parse(slurp(dir / "manifest.json"));
  CHECK(m.contains("sub_01"));
  CHECK(fs::exists(dir / "resolved_config.json"));

  const Run g = cli("gradcheck --config " + q(BFM_TINY_CONFIG) +
                    " --gradcheck_stencil 4 --gradcheck_samples 50 --out " + q(dir / "gc"));
  CHECK_MESSAGE(g.code == 0, g.output);
  CHECK(g.output.find("max relative error") != std::string::npos);
  const Run strict = cli("gradcheck --config " + q(BFM_TINY_CONFIG) + " --gradcheck_tol 1e-30");
  CHECK(strict.code == 1);
}

TEST_CASE("pipeline is re-runnable byte for byte") {
  TempDir dir("cli_pipe");
  const std::string tiny = " --config " + q(BFM_TINY_CONFIG);
  REQUIRE(cli("synth-data" + tiny + " --synth_cases 3 --synth_lesion_fraction 1 --out " + q(dir / "data")).code == 0);
  const std::string manifest = " --manifest " + q(dir / "data/manifest.json");
  for (const char* run : {"a", "b"}) {
    const Run p = cli("pretrain" + tiny + manifest + " --epochs 3 --out " + q(dir / run));
    REQUIRE_MESSAGE(p.code == 0, p.output);
  }
  CHECK(slurp(dir / "a/metrics.jsonl") == slurp(dir / "b/metrics.jsonl"));
  CHECK(slurp(dir / "a/final.bfmc") == slurp(dir / "b/final.bfmc"));
  CHECK(slurp(dir / "a/resolved_config.json") == slurp(dir / "b/resolved_config.json"));

  const Run ft = cli("finetune" + tiny + manifest + " --epochs 2 --checkpoint " + q(dir / "a/final.bfmc") +
                     " --out " + q(dir / "ft"));
  REQUIRE_MESSAGE(ft.code == 0, ft.output);
  const Run ev = cli("evaluate" + tiny + manifest + " --checkpoint " + q(dir / "ft/final.bfmc") +
                     " --matrix default --out " + q(dir / "ev"));
  REQUIRE_MESSAGE(ev.code == 0, ev.output);
  const std::string csv = slurp(dir / "ev/matrix.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(csv.find("Unseen (T2 only)") != std::string::npos);

  const Run im = cli("impute" + tiny + manifest + " --checkpoint " + q(dir / "a/final.bfmc") +
                     " --case case_000 --target dwi --out " + q(dir / "imp"));
  CHECK_MESSAGE(im.code == 0, im.output);
  CHECK(fs::exists(dir / "imp/dwi_imputed.nii"));

  const Run rep = cli("report --metrics " + q(dir / "a/metrics.jsonl") + " --out " + q(dir / "rep"));
  CHECK_MESSAGE(rep.code == 0, rep.output);
  CHECK(fs::exists(dir / "rep/summary.md"));
  CHECK(fs::exists(dir / "rep/losses.svg"));
}

}  // TEST_SUITE
