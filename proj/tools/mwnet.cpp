// mwnet: experiments, theory checks and data utilities.
//
// Exit codes: 0 success, 1 usage/config error, 2 verification failure, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "mwnet/data.hpp"
#include "mwnet/experiment.hpp"
#include "mwnet/noise.hpp"
#include "mwnet/verify.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  return os;
}

int cmd_run(const std::string& config_path, const std::string& output_dir, std::size_t workers, bool print_config) {
  mwnet::ExperimentConfig cfg;
  try {
    cfg = config_path.empty() ? mwnet::parse_config_text("") : mwnet::parse_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (workers) cfg.workers = workers;
    cfg.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (print_config) {
    std::cout << mwnet::serialize_config(cfg);
    return 0;
  }
  mwnet::ExperimentHooks hooks;
  hooks.on_warning = [](const std::string& w) { std::cerr << "warning: " << w << '\n'; };
  hooks.on_run = [](const mwnet::RunResult& r) {
    std::fprintf(stderr, "done %s %s@%s seed %zu: acc %.4f best_auc %.4f\n", std::string(to_string(r.variant)).c_str(),
                 std::string(to_string(r.noise.kind)).c_str(), mwnet::format_real(r.noise.rate).c_str(), r.seed_index,
                 r.report.final_test_accuracy, r.report.best_auc);
  };
  const auto table = mwnet::run_experiment(cfg, hooks);
  mwnet::write_results_csv(std::cout, table);
  return 0;
}

int cmd_verify(std::uint64_t seed, const std::string& equivalence_loss, bool flip_sign, const std::string& csv_path) {
  mwnet::VerifyOptions opt;
  opt.seed = seed;
  opt.flip_theta_sign = flip_sign;
  try {
    opt.equivalence_loss = mwnet::parse_loss_kind(equivalence_loss);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto results = mwnet::run_verify_suite(opt, [](const mwnet::PropertyResult& r) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << std::endl;
  });
  bool all = true;
  for (const auto& r : results) all &= r.passed;
  if (!csv_path.empty()) {
    auto os = open_out(csv_path);
    os << "property,passed,detail\n";
    for (const auto& r : results) os << r.name << ',' << (r.passed ? 1 : 0) << ",\"" << r.detail << "\"\n";
  }
  std::cout << (all ? "all properties passed" : "verification FAILED") << '\n';
  return all ? 0 : kExitVerify;
}

mwnet::NoiseSpec noise_spec(const std::string& kind, double rate, std::size_t k, std::uint64_t seed) {
  try {
    mwnet::NoiseSpec ns{mwnet::parse_noise_kind(kind), rate, k, seed};
    ns.validate();
    return ns;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

int cmd_noise_matrix(const std::string& kind, double rate, std::size_t k, std::uint64_t seed, const std::string& out) {
  const auto ns = noise_spec(kind, rate, k, seed);
  if (mwnet::majority_feasibility(ns) == mwnet::Feasibility::Warning)
    std::cerr << "warning: the noisy class can become the majority at this rate\n";
  const auto t = mwnet::build_transition(ns);
  if (out.empty()) {
    mwnet::write_transition_csv(std::cout, t);
  } else {
    auto os = open_out(out);
    mwnet::write_transition_csv(os, t);
  }
  return 0;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, const std::string& kind, double rate,
                 std::uint64_t seed) {
  mwnet::ExperimentConfig cfg;
  try {
    cfg = config_path.empty() ? mwnet::parse_config_text("") : mwnet::parse_config(config_path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto ns = noise_spec(kind, rate, cfg.blob.num_classes, cfg.noise_seed);
  const auto blobs = mwnet::standardize(mwnet::make_blobs(cfg.blob));
  const auto cell = mwnet::make_cell_data(blobs, ns, seed);
  const std::filesystem::path dir(out_dir);
  auto write = [&](const char* name, const mwnet::LabeledDataset& ds, bool noisy) {
    auto os = open_out(dir / name);
    mwnet::write_dataset_csv(os, ds, noisy);
  };
  write("train.csv", cell.train, true);
  write("meta_clean.csv", blobs.meta, false);
  write("meta_noisy.csv", cell.meta_noisy, true);
  write("test.csv", blobs.test, false);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned sample reweighting under label noise"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  std::size_t workers = 0;
  bool print_config = false;
  auto* run = app.add_subcommand("run", "Run a variant x noise x seed grid and write CSV reports");
  run->add_option("-c,--config", config_path, "Config file (key = value); defaults when omitted")->check(CLI::ExistingFile);
  run->add_option("-o,--output", output_dir, "Override experiment.output_dir");
  run->add_option("-j,--workers", workers, "Override experiment.workers");
  run->add_flag("--print-config", print_config, "Print the resolved config and exit");

  std::uint64_t verify_seed = mwnet::VerifyOptions{}.seed;
  std::string equivalence_loss = "mae", verify_csv;
  bool flip_sign = false;
  auto* verify = app.add_subcommand("verify", "Run the theory property suite");
  verify->add_option("--seed", verify_seed, "Base seed for random instances");
  verify->add_option("--equivalence-loss", equivalence_loss, "Meta loss used in the uniform-noise equivalence check (mae|ce)");
  verify->add_flag("--mutate-theta-sign", flip_sign, "Negate the analytic hypergradient (mutation test)");
  verify->add_option("--csv", verify_csv, "Also write results as CSV");

  std::string nm_kind = "uniform", nm_out;
  double nm_rate = 0.4;
  std::size_t nm_classes = 5;
  std::uint64_t nm_seed = 0;
  auto* nm = app.add_subcommand("noise-matrix", "Print a label transition matrix as CSV");
  nm->add_option("--kind", nm_kind, "uniform|flip|flip2");
  nm->add_option("--rate", nm_rate, "Noise rate in [0, 1)");
  nm->add_option("-K,--classes", nm_classes, "Number of classes");
  nm->add_option("--seed", nm_seed, "Seed for flip targets");
  nm->add_option("-o,--output", nm_out, "Output file (stdout when omitted)");

  std::string gd_config, gd_out = "data", gd_kind = "uniform";
  double gd_rate = 0.4;
  std::uint64_t gd_seed = 0;
  auto* gd = app.add_subcommand("gen-data", "Write blob splits as CSV, with corrupted train and meta copies");
  gd->add_option("-c,--config", gd_config, "Config file supplying [blob] and noise.seed")->check(CLI::ExistingFile);
  gd->add_option("-o,--output", gd_out, "Output directory");
  gd->add_option("--kind", gd_kind, "uniform|flip|flip2");
  gd->add_option("--rate", gd_rate, "Noise rate in [0, 1)");
  gd->add_option("--seed", gd_seed, "Run seed (corruption streams)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) return cmd_run(config_path, output_dir, workers, print_config);
    if (*verify) return cmd_verify(verify_seed, equivalence_loss, flip_sign, verify_csv);
    if (*nm) return cmd_noise_matrix(nm_kind, nm_rate, nm_classes, nm_seed, nm_out);
    if (*gd) return cmd_gen_data(gd_config, gd_out, gd_kind, gd_rate, gd_seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
