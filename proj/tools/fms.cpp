// fms: federated meta-learning simulator command line.
//
//   fms train <config.json> [--seed S] [--replicas R] [--out DIR] [--trace] [--force]
//   fms personalize <config.json> --checkpoint FILE [--epochs E] [--sweep N] [--out DIR]
//   fms decompose <run_dir> [--round R]
//   fms report <run_dir>... [--threshold T]... [--out DIR]
//
// Exit codes: 0 success, 1 domain error, 2 usage error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fms/errors.hpp"
#include "fms/experiment.hpp"

namespace {

template <class T>
std::optional<T> opt_if(const CLI::Option* o, const T& v) {
  return o->count() ? std::optional<T>(v) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated meta-learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t replicas = 0;
  std::string out;
  bool trace = false, force = false, wallclock = false;

  auto* train = app.add_subcommand("train", "Train every replica of an experiment");
  train->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* seed_opt = train->add_option("--seed", seed, "Seed of the first replica");
  auto* rep_opt = train->add_option("--replicas", replicas, "Number of replicas")
                      ->check(CLI::PositiveNumber);
  auto* out_opt = train->add_option("--out", out, "Output directory");
  train->add_flag("--trace", trace, "Record per-step client gradients for decompose");
  train->add_flag("--force", force, "Overwrite existing run directories");
  train->add_flag("--wallclock", wallclock, "Record wall-clock time in metrics.csv");

  std::string checkpoint;
  std::size_t epochs = 0, sweep = 0;
  std::uint64_t pseed = 0;
  auto* pers = app.add_subcommand("personalize", "Personalize a checkpoint on every client");
  pers->add_option("config", config_path, "Experiment config (JSON)")->required();
  pers->add_option("--checkpoint", checkpoint, "Checkpoint to personalize")->required();
  auto* epochs_opt = pers->add_option("--epochs", epochs, "Override personalization epochs");
  auto* sweep_opt = pers->add_option("--sweep", sweep, "Also sweep epochs 1..N for SGD and Adam")
                        ->check(CLI::PositiveNumber);
  auto* pseed_opt = pers->add_option("--seed", pseed, "Seed for personalization streams");
  auto* pout_opt = pers->add_option("--out", out, "Output directory");
  pers->add_flag("--force", force, "Overwrite existing outputs");

  std::string run_dir;
  std::size_t round = 0;
  auto* dec = app.add_subcommand("decompose", "Split a traced FedAvg round into FedSGD and FOMAML terms");
  dec->add_option("run_dir", run_dir, "Run directory written by train --trace")->required();
  auto* round_opt = dec->add_option("--round", round, "Round to decompose (default: last traced)");
  dec->add_flag("--force", force, "Overwrite an existing decomposition file");

  std::vector<std::string> run_dirs;
  std::vector<double> thresholds;
  auto* rep = app.add_subcommand("report", "Aggregate replicas into mean (std) tables");
  rep->add_option("run_dirs", run_dirs, "Run directories")->required();
  auto* thr_opt = rep->add_option("--threshold", thresholds, "Rounds-to-threshold level (repeatable)");
  auto* rout_opt = rep->add_option("--out", out, "Write report.txt and report.csv here");
  rep->add_flag("--force", force, "Overwrite existing report files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      fms::TrainOptions o;
      o.seed = opt_if(seed_opt, seed);
      o.replicas = opt_if(rep_opt, replicas);
      if (out_opt->count()) o.out = out;
      o.trace = trace;
      o.force = force;
      o.wallclock = wallclock;
      fms::cmd_train(fms::load_config(config_path), o, std::cout);
    } else if (pers->parsed()) {
      fms::PersonalizeOptions o;
      o.checkpoint = checkpoint;
      if (pout_opt->count()) o.out = out;
      o.seed = opt_if(pseed_opt, pseed);
      o.epochs = opt_if(epochs_opt, epochs);
      o.sweep_max_epochs = opt_if(sweep_opt, sweep);
      o.force = force;
      fms::cmd_personalize(fms::load_config(config_path), o, std::cout);
    } else if (dec->parsed()) {
      fms::DecomposeOptions o;
      o.run_dir = run_dir;
      o.round = opt_if(round_opt, round);
      o.force = force;
      const fms::DecompositionReport r = fms::cmd_decompose(o, std::cout);
      if (r.residual_norm > fms::kDecomposeGuard) {
        std::cerr << "fms: decomposition residual " << r.residual_norm << " exceeds "
                  << fms::kDecomposeGuard << '\n';
        return 1;
      }
    } else if (rep->parsed()) {
      fms::ReportOptions o;
      o.run_dirs.assign(run_dirs.begin(), run_dirs.end());
      if (thr_opt->count()) o.thresholds = thresholds;
      if (rout_opt->count()) o.out = out;
      o.force = force;
      fms::cmd_report(o, std::cout);
    }
  } catch (const fms::Error& e) {
    std::cerr << "fms: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "fms: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
