// fedade: run, validate and summarize federated test-time adaptation experiments.
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fedade/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw fedade::IoError("cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int fail(fedade::ExitCode code, const std::string& msg) {
  std::cerr << "error: " << msg << '\n';
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  using fedade::ExitCode;
  CLI::App app{"Federated test-time adaptation under distribution shift"};
  app.require_subcommand(1);

  std::string config_path, out_dir, in_dir;
  std::size_t workers = 1;

  auto* run = app.add_subcommand("run", "run every (mode, seed) job of a config");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--workers", workers, "parallel jobs")->check(CLI::PositiveNumber);
  run->add_option("--out", out_dir, "output directory (overrides output_dir)");

  auto* validate = app.add_subcommand("validate", "check a config and print it with defaults filled in");
  validate->add_option("--config", config_path, "experiment config (JSON)")->required();

  auto* report = app.add_subcommand("report", "rebuild the comparison table from metrics CSVs");
  report->add_option("--in", in_dir, "directory with metrics_*.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::Usage);
  }

  try {
    if (*validate) {
      const auto cfg = fedade::validate_config(read_file(config_path));
      std::cout << fedade::config_to_json(cfg).dump(2) << '\n';
      std::cout << "config_hash " << fedade::config_hash(cfg) << '\n';
    } else if (*run) {
      auto cfg = fedade::validate_config(read_file(config_path));
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      const auto outcome = fedade::run_experiment(cfg, workers);
      std::cout << fedade::comparison_csv(outcome.comparison);
      std::cerr << "wrote " << outcome.files.size() << " files to " << cfg.output_dir << " (config " << outcome.hash
                << ")\n";
    } else if (*report) {
      std::cout << fedade::comparison_csv(fedade::report_from_dir(in_dir));
    }
  } catch (const fedade::ParseError& e) {
    return fail(ExitCode::Config, e.what());
  } catch (const fedade::ValidationError& e) {
    return fail(ExitCode::Config, e.what());
  } catch (const fedade::IoError& e) {
    return fail(ExitCode::Io, e.what());
  } catch (const fedade::IllConditionedError& e) {
    return fail(ExitCode::Numeric, e.what());
  } catch (const fedade::DegenerateInputError& e) {
    return fail(ExitCode::Numeric, e.what());
  } catch (const std::exception& e) {
    return fail(ExitCode::Usage, e.what());
  }
  return 0;
}
