#include <omp.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "reclab/errors.hpp"
#include "reclab/experiments.hpp"
#include "reclab/report.hpp"

namespace {

using namespace reclab;

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return 1;
    case ErrorCategory::runtime: return 2;
    case ErrorCategory::missing_input: return 3;
  }
  return 2;
}

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::runtime: return "runtime";
    case ErrorCategory::missing_input: return "missing_input";
  }
  return "runtime";
}

int fail(const char* category, int code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", category}, {"exit_code", code}, {"message", message}}.dump() << "\n";
  return code;
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
  std::vector<std::string> overrides;
  bool quiet = false;
};

ExperimentConfig effective_config(const Globals& g) {
  KeyValues kv;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw MissingInputError("cannot open config file '" + g.config + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    kv = parse_key_values(ss.str());
  }
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    kv[o.substr(0, eq)] = o.substr(eq + 1);
  }
  ExperimentConfig cfg = experiment_from_key_values(kv);
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out.empty()) cfg.out = g.out;
  if (g.threads != 0) cfg.threads = g.threads;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-recycling laboratory for tiny masked-LM lineages"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "key=value experiment config file");
  app.add_option("--seed", g.seed, "run a single seed instead of the config's seed list");
  app.add_option("--out", g.out, "output directory (default: the config's out key)");
  app.add_option("--threads", g.threads, "OpenMP threads for kernels")->check(CLI::PositiveNumber);
  app.add_option("--set", g.overrides, "override one config key, key=value (repeatable)");
  app.add_flag("-q,--quiet", g.quiet, "no progress lines on stderr");

  std::vector<std::pair<ExperimentKind, CLI::App*>> kinds;
  for (ExperimentKind k : all_kinds()) kinds.emplace_back(k, app.add_subcommand(kind_name(k), std::string("run the ") + kind_name(k) + " experiment"));
  CLI::App* all = app.add_subcommand("all", "run every experiment kind in order, sharing one lineage");
  CLI::App* report = app.add_subcommand("report", "aggregate the summaries under the output directory");
  CLI::App* show = app.add_subcommand("config", "print the effective config");
  CLI::App* dataset = app.add_subcommand("dataset", "export the config's task splits as tab-separated lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const ExperimentConfig cfg = effective_config(g);
    omp_set_num_threads(static_cast<int>(cfg.threads));
    std::ostream* log = g.quiet ? nullptr : &std::cerr;

    if (show->parsed()) {
      std::cout << format_key_values(to_key_values(cfg));
      return 0;
    }
    if (dataset->parsed()) {
      Workspace ws(cfg, log);
      std::filesystem::create_directories(cfg.out);
      const std::string path = (std::filesystem::path(cfg.out) / ("dataset-" + cfg.task + ".tsv")).string();
      std::ofstream f(path);
      if (!f) throw MissingInputError("cannot write '" + path + "'");
      f << export_dataset(ws.task(cfg.task, cfg.seeds.front(), 0));
      std::cout << path << "\n";
      return 0;
    }
    if (report->parsed()) {
      const Report r = build_report(cfg.out);
      if (std::filesystem::is_directory(cfg.out)) {
        std::ofstream(std::filesystem::path(cfg.out) / "report.json") << report_json(r);
        std::ofstream(std::filesystem::path(cfg.out) / "report.txt") << report_table(r);
      }
      std::cout << report_table(r);
      return 0;
    }
    Workspace ws(cfg, log);
    for (const auto& [kind, sub] : kinds) {
      if (!sub->parsed() && !all->parsed()) continue;
      run_experiment(ws, kind);
      std::cout << (std::filesystem::path(cfg.out) / kind_name(kind)).string() << "\n";
    }
    return 0;
  } catch (const Error& e) {
    return fail(category_name(e.category()), exit_code(e.category()), e.what());
  } catch (const std::exception& e) {
    return fail("runtime", 2, e.what());
  }
}
