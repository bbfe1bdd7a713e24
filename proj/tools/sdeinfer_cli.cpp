// sdeinfer: simulate | run | report | tune
#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "sdeinfer/experiment.hpp"

using namespace sdeinfer;

namespace {

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return "config";
    case ErrorCategory::Numeric: return "numeric";
    case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

// One --key option per config field. Values from --config are applied last.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::string config_file;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value file; its entries override flags");
    for (const std::string& key : ExperimentConfig::keys()) {
      app->add_option("--" + key, values[key], "config field '" + key + "'");
    }
  }

  ExperimentConfig resolve() const {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : values) {
      if (!v.empty()) kv[k] = v;
    }
    if (!config_file.empty()) {
      for (const auto& [k, v] : read_key_values(config_file)) kv[k] = v;
    }
    return ExperimentConfig::from_map(kv);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian inference for stochastic differential equations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  ConfigFlags sim_flags, run_flags, tune_flags;
  std::string sim_out = "data.csv", tune_out = "tuned.cfg";
  std::vector<std::string> archives;

  CLI::App* sim = app.add_subcommand("simulate", "simulate a data set from the model");
  sim_flags.attach(sim);
  sim->add_option("--out", sim_out, "output data file")->capture_default_str();

  CLI::App* run = app.add_subcommand("run", "tune, run a sampler and write an archive");
  run_flags.attach(run);
  // --data already exists as a config key; it names the data file.

  CLI::App* tune = app.add_subcommand("tune", "run the pilot only and write a tuned config");
  tune_flags.attach(tune);
  tune->add_option("--out", tune_out, "tuned config file")->capture_default_str();

  CLI::App* report = app.add_subcommand("report", "ESS table and plot data for one or more archives");
  report->add_option("archives", archives, "archive directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) {
      cmd_simulate(sim_flags.resolve(), sim_out);
      std::cout << "wrote " << sim_out << "\n";
    } else if (run->parsed()) {
      ExperimentConfig c = run_flags.resolve();
      require(!c.data.empty(), ErrorKind::InvalidConfig, "run needs --data");
      RunResult r = cmd_run(c, c.data);
      std::cout << "sampler " << c.sampler << "  N " << r.particles << "  rho " << r.rho << "\n";
      for (const auto& a : r.chain.acceptance) std::cout << "acceptance " << a.name << " " << a.rate() << "\n";
      std::cout << "mESS " << r.ess.min_ess << "  seconds " << r.chain.seconds << "  mESS/s " << r.ess.mess_per_second
                << (r.ess.any_degenerate() ? "  (degenerate chain)" : "") << "\n";
      std::cout << "archive " << c.output << "\n";
    } else if (tune->parsed()) {
      ExperimentConfig c = tune_flags.resolve();
      require(!c.data.empty(), ErrorKind::InvalidConfig, "tune needs --data");
      require(c.tuning != "none", ErrorKind::InvalidConfig, "tune needs --tuning 1 or 2");
      TuningResult t = cmd_tune(c, c.data, tune_out);
      std::cout << "option " << t.option << "  N " << t.particles << "\nwrote " << tune_out << "\n";
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(archives.begin(), archives.end());
      cmd_report(dirs, std::cout);
    }
  } catch (const SdeError& e) {
    std::cerr << "error category=" << category_name(e.category()) << " kind=" << e.what()
              << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error category=io kind=Unexpected: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
