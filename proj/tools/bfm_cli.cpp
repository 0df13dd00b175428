// Command-line front end. Talks to the library only through the C API.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bfm/bfm.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct Failure {
  bfm_status status;
  std::string message;
};

void check(bfm_status s) {
  if (s != BFM_OK) throw Failure{s, bfm_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  bfm_string_free(s);
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Failure{BFM_ERR_CONFIG, "cannot read config file " + path};
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Failure{BFM_ERR_IO, "cannot write " + path.string()};
  f << text;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

// Flag text -> JSON value shaped like the key's default.
json flag_value(const std::string& key, const std::string& text, const json& like) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
  }
  if (like.is_array()) {
    json arr = json::array();
    for (const auto& part : split(text, ',')) {
      if (!like.empty() && like[0].is_string()) {
        arr.push_back(part);
      } else {
        try {
          arr.push_back(json::parse(part));
        } catch (const json::parse_error&) {
          throw Failure{BFM_ERR_CONFIG, "--" + key + ": cannot parse '" + text + "'"};
        }
      }
    }
    return arr;
  }
  if (like.is_string()) return text;
  throw Failure{BFM_ERR_CONFIG, "--" + key + ": cannot parse '" + text + "'"};
}

struct Command {
  CLI::App* app = nullptr;
  std::map<std::string, std::string> flags;  // config key -> raw text
  std::string config_path;
  std::string out;
};

json defaults() {
  char* s = nullptr;
  check(bfm_config_resolve(nullptr, nullptr, &s));
  return json::parse(take(s));
}

Command& add_command(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds,
                     const std::string& name, const std::string& help, const json& keys) {
  auto cmd = std::make_unique<Command>();
  cmd->app = app.add_subcommand(name, help);
  cmd->app->add_option("--config", cmd->config_path, "JSON run config; flags override its keys");
  cmd->app->add_option("--out", cmd->out, "output path");
  for (const auto& [key, value] : keys.items())
    cmd->app->add_option("--" + key, cmd->flags[key], "config key (default " + value.dump() + ")");
  cmds.push_back(std::move(cmd));
  return *cmds.back();
}

std::string resolve_config(const Command& cmd, const json& keys) {
  json overrides = json::object();
  for (const auto& [key, text] : cmd.flags) {
    if (cmd.app->count("--" + key) == 0) continue;
    overrides[key] = flag_value(key, text, keys.at(key));
  }
  const std::string base = cmd.config_path.empty() ? "" : read_text(cmd.config_path);
  char* s = nullptr;
  check(bfm_config_resolve(base.empty() ? nullptr : base.c_str(), overrides.dump().c_str(), &s));
  return take(s);
}

void snapshot(const fs::path& dir, const std::string& config) {
  write_text(dir / "resolved_config.json", config + "\n");
}

fs::path dir_of(const std::string& file) {
  const fs::path p(file);
  return p.has_parent_path() ? p.parent_path() : fs::path(".");
}

int threads_of(const std::string& config) { return json::parse(config).value("threads", 1); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-conditioned masked autoencoder for multi-modality brain MRI"};
  app.require_subcommand(1);
  app.footer("Every config key is also accepted as --<key> on every command.");

  json keys;
  try {
    keys = defaults();
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return kExitRuntime;
  }

  std::vector<std::unique_ptr<Command>> cmds;
  std::string root, manifest, checkpoint, resume, matrix = "default", case_id, target, metrics;

  auto& build = add_command(app, cmds, "build-dict", "index a corpus into a case manifest", keys);
  build.app->add_option("--root", root, "corpus root (one directory per case)")->required();

  auto& synth = add_command(app, cmds, "synth-data", "write a synthetic phantom corpus", keys);

  auto& pretrain = add_command(app, cmds, "pretrain", "masked-autoencoder pretraining", keys);
  pretrain.app->add_option("--manifest", manifest, "case manifest (synthetic data if omitted)");
  pretrain.app->add_option("--resume", resume, "checkpoint to resume from");

  auto& gradcheck = add_command(app, cmds, "gradcheck", "finite-difference gradient check", keys);

  auto& finetune = add_command(app, cmds, "finetune", "supervised adaptation of the encoder", keys);
  finetune.app->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
  finetune.app->add_option("--manifest", manifest, "case manifest (synthetic data if omitted)");

  auto& evaluate = add_command(app, cmds, "evaluate", "modality-availability matrix evaluation", keys);
  evaluate.app->add_option("--checkpoint", checkpoint, "finetuned checkpoint")->required();
  evaluate.app->add_option("--manifest", manifest, "case manifest (synthetic data if omitted)");
  evaluate.app->add_option("--matrix", matrix, "'default' or a JSON list of {name, available}");

  auto& impute = add_command(app, cmds, "impute", "reconstruct a modality from the others", keys);
  impute.app->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
  impute.app->add_option("--manifest", manifest, "case manifest (synthetic data if omitted)");
  impute.app->add_option("--case", case_id, "case id")->required();
  impute.app->add_option("--target", target, "modality to impute")->required();

  auto& report = add_command(app, cmds, "report", "plots and summary of a metrics log", keys);
  report.app->add_option("--metrics", metrics, "metrics JSON-lines log")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const fs::path cwd = ".";
    if (*build.app) {
      const std::string cfg = resolve_config(build, keys);
      const std::string out = build.out.empty() ? "manifest.json" : build.out;
      bfm_manifest* m = nullptr;
      check(bfm_scan_corpus(root.c_str(), &m));
      const bfm_status s = bfm_manifest_save(m, out.c_str());
      const size_t n = bfm_manifest_case_count(m);
      bfm_manifest_free(m);
      check(s);
      snapshot(dir_of(out), cfg);
      std::cout << "indexed " << n << " case(s) into " << out << "\n";
    } else if (*synth.app) {
      const std::string cfg = resolve_config(synth, keys);
      const std::string out = synth.out.empty() ? "synthetic" : synth.out;
      bfm_manifest* m = nullptr;
      check(bfm_synth_corpus(cfg.c_str(), out.c_str(), &m));
      const size_t n = bfm_manifest_case_count(m);
      bfm_manifest_free(m);
      snapshot(out, cfg);
      std::cout << "wrote " << n << " synthetic case(s) and " << (fs::path(out) / "manifest.json").string()
                << "\n";
    } else if (*pretrain.app) {
      const std::string cfg = resolve_config(pretrain, keys);
      const std::string out = pretrain.out.empty() ? "run" : pretrain.out;
      bfm_checkpoint* c = nullptr;
      check(bfm_pretrain(cfg.c_str(), manifest.empty() ? nullptr : manifest.c_str(),
                         resume.empty() ? nullptr : resume.c_str(), out.c_str(), &c));
      char* info = nullptr;
      const bfm_status s = bfm_checkpoint_info(c, &info);
      bfm_checkpoint_free(c);
      check(s);
      const json j = json::parse(take(info));
      std::cout << "pretrained " << j["step"] << " step(s); checkpoint "
                << (fs::path(out) / "final.bfmc").string() << "\n";
    } else if (*gradcheck.app) {
      const std::string cfg = resolve_config(gradcheck, keys);
      char* rep = nullptr;
      check(bfm_gradcheck(cfg.c_str(), &rep));
      const std::string text = take(rep);
      const json j = json::parse(text);
      if (!gradcheck.out.empty()) {
        snapshot(gradcheck.out, cfg);
        write_text(fs::path(gradcheck.out) / "gradcheck.json", text + "\n");
      }
      std::printf("max relative error %.3e over %d coordinates (tol %.1e): %s\n",
                  j["max_rel_error"].get<double>(), j["checked"].get<int>(),
                  j["tol"].get<double>(), j["passed"].get<bool>() ? "PASS" : "FAIL");
      return j["passed"].get<bool>() ? 0 : kExitRuntime;
    } else if (*finetune.app) {
      const std::string cfg = resolve_config(finetune, keys);
      const std::string out = finetune.out.empty() ? "finetune" : finetune.out;
      bfm_checkpoint* c = nullptr;
      check(bfm_finetune(cfg.c_str(), manifest.empty() ? nullptr : manifest.c_str(),
                         checkpoint.c_str(), out.c_str(), &c));
      char* info = nullptr;
      const bfm_status s = bfm_checkpoint_info(c, &info);
      bfm_checkpoint_free(c);
      check(s);
      const json j = json::parse(take(info));
      std::cout << j["task"].get<std::string>() << " finetuning ran " << j["epoch"]
                << " epoch(s); best validation metric " << j["extra"].value("best_metric", 0.0)
                << "; checkpoint " << (fs::path(out) / "final.bfmc").string() << "\n";
    } else if (*evaluate.app) {
      const std::string cfg = resolve_config(evaluate, keys);
      const std::string out = evaluate.out.empty() ? "evaluation" : evaluate.out;
      const std::string task = evaluate.app->count("--task") ? json::parse(cfg)["task"].get<std::string>() : "";
      char* csv = nullptr;
      char* log = nullptr;
      check(bfm_evaluate(checkpoint.c_str(), manifest.empty() ? nullptr : manifest.c_str(),
                         matrix.c_str(), task.empty() ? nullptr : task.c_str(), threads_of(cfg),
                         &csv, &log));
      const std::string csv_text = take(csv);
      const std::string log_text = take(log);
      snapshot(out, cfg);
      write_text(fs::path(out) / "matrix.csv", csv_text);
      write_text(fs::path(out) / "skipped.json", log_text + "\n");
      for (const auto& s : json::parse(log_text)["skipped"])
        std::cerr << "skipped " << s.get<std::string>() << "\n";
      std::cout << csv_text;
    } else if (*impute.app) {
      const std::string cfg = resolve_config(impute, keys);
      const std::string out = impute.out.empty() ? "imputation" : impute.out;
      const fs::path volume = fs::path(out) / (target + "_imputed.nii");
      fs::create_directories(out);
      char* rep = nullptr;
      check(bfm_impute(checkpoint.c_str(), manifest.empty() ? nullptr : manifest.c_str(),
                       case_id.c_str(), target.c_str(), volume.string().c_str(), &rep));
      const std::string text = take(rep);
      snapshot(out, cfg);
      write_text(fs::path(out) / "impute.json", text + "\n");
      std::cout << text << "\n";
    } else if (*report.app) {
      const std::string cfg = resolve_config(report, keys);
      const std::string out = report.out.empty() ? "report" : report.out;
      char* rep = nullptr;
      check(bfm_report(metrics.c_str(), out.c_str(), &rep));
      snapshot(out, cfg);
      for (const auto& f : json::parse(take(rep))["files"]) std::cout << f.get<std::string>() << "\n";
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.status == BFM_ERR_CONFIG ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
