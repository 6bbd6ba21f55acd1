// tslab: command-line front end of the experiment runner.
//
// Exit status: 0 success, 1 invalid arguments/config/missing inputs,
// 2 failure while running.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "tslab/experiment.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
};

void report_error(bool as_json, const std::string& kind, const std::string& message,
                  const std::vector<std::string>& problems, int code) {
  if (as_json) {
    json err = {{"kind", kind}, {"message", message}, {"exit_code", code}};
    if (!problems.empty()) err["problems"] = problems;
    std::cerr << json{{"error", err}}.dump() << '\n';
  } else {
    std::cerr << "tslab: " << message << '\n';
  }
}

tslab::ExperimentConfig load_config(const Options& o, tslab::Stage stage) {
  std::ifstream is(o.config);
  if (!is) throw tslab::ValidationError({"config file not found: " + o.config});
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw tslab::ValidationError({"config " + o.config + " is not valid JSON: " + e.what()});
  }
  const auto base = fs::path(o.config).parent_path().string();
  auto c = tslab::experiment_config_from_json(j, base);
  if (o.seed) {
    switch (stage) {
      case tslab::Stage::gen_data: c.dataset.seed = *o.seed; break;
      case tslab::Stage::train: c.train.seed = *o.seed; break;
      default: c.seeds = {*o.seed}; break;
    }
  }
  if (!o.out.empty()) {
    if (stage == tslab::Stage::gen_data) c.dataset_dir = o.out;
    else c.out = o.out;
  }
  return c;
}

int run(const Options& o, tslab::Stage stage) {
  try {
    const auto c = load_config(o, stage);
    const auto summary = tslab::run_stage(c, stage);
    if (o.json) {
      std::cout << summary.dump() << '\n';
    } else {
      std::cout << "tslab " << tslab::stage_name(stage) << ": done ("
                << (stage == tslab::Stage::gen_data ? c.dataset_dir : c.out) << ")\n";
    }
    return 0;
  } catch (const tslab::ValidationError& e) {
    report_error(o.json, "validation", e.what(), e.problems(), 1);
    return 1;
  } catch (const std::invalid_argument& e) {
    report_error(o.json, "validation", e.what(), {}, 1);
    return 1;
  } catch (const std::exception& e) {
    report_error(o.json, "runtime", e.what(), {}, 2);
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token sparsification attack lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tslab 0.1.0");

  struct Sub {
    tslab::Stage stage;
    const char* help;
  };
  const Sub subs[] = {
      {tslab::Stage::gen_data, "Synthesise the dataset (--out overrides dataset.dir)"},
      {tslab::Stage::train, "Train the backbone and fine-tune every victim"},
      {tslab::Stage::attack, "Craft the configured perturbations for every seed"},
      {tslab::Stage::evaluate, "Clean, clean w/o and attacked metrics per victim"},
      {tslab::Stage::defend, "Calibrate token caps and evaluate the defended victims"},
      {tslab::Stage::report, "Aggregate finished runs over seeds into report.json"},
  };
  Options opts;
  std::uint64_t seed = 0;
  std::optional<tslab::Stage> chosen;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(std::string(tslab::stage_name(s.stage)), s.help);
    cmd->add_option("--config", opts.config, "Experiment config (JSON)")->required();
    cmd->add_option("--seed", seed, "Override the seed(s) used by this stage");
    cmd->add_option("--out", opts.out, "Override the output directory");
    cmd->add_flag("--json", opts.json, "Machine-readable stdout, error JSON on stderr");
    cmd->callback([&chosen, &cmd = *cmd, stage = s.stage, &seed, &opts] {
      chosen = stage;
      if (cmd.count("--seed") > 0) opts.seed = seed;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    bool as_json = false;
    for (int i = 1; i < argc; ++i) as_json |= std::string(argv[i]) == "--json";
    if (as_json) {
      report_error(true, "validation", e.what(), {}, 1);
    } else {
      app.exit(e);
    }
    return 1;
  }
  return run(opts, *chosen);
}
