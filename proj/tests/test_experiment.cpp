#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mwnet/experiment.hpp"

using namespace mwnet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.blob.n_train = 200;
  c.blob.n_meta = 50;
  c.blob.n_test = 200;
  c.train.epochs = 2;
  c.train.lr_milestones = {1};
  c.num_seeds = 2;
  c.noise_rates = {0.0, 0.4};
  c.output_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mwnet_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(ParseConfig, EmptyGivesDefaults) {
  const auto c = parse_config_text("");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.num_seeds, 5u);
  EXPECT_EQ(c.train.epochs, 40u);
  EXPECT_EQ(c.train.lr_milestones, (std::vector<std::size_t>{24, 32}));
  EXPECT_EQ(c.train.lr, 0.05);
  EXPECT_EQ(c.train.meta_lr, 1e-3);
  EXPECT_EQ(c.train.train_batch, 100u);
  EXPECT_EQ(c.train.meta_batch, 100u);
}

TEST(ParseConfig, SectionsAndDottedKeys) {
  const auto c = parse_config_text(
      "# comment\n"
      "[noise]\n"
      "kind = uniform, flip2   # trailing comment\n"
      "rate = 0.2,0.6\n"
      "train.epochs = 3\n"
      "[experiment]\n"
      "variants = rmnwnet\n"
      "num_seeds = 1\n");
  EXPECT_EQ(c.noise_kinds, (std::vector<NoiseKind>{NoiseKind::Uniform, NoiseKind::Flip2}));
  EXPECT_EQ(c.noise_rates, (std::vector<double>{0.2, 0.6}));
  EXPECT_EQ(c.train.epochs, 3u);
  EXPECT_EQ(c.variants, (std::vector<Variant>{Variant::RMNWNet}));
  EXPECT_EQ(c.noise_grid().size(), 4u);
}

TEST(ParseConfig, RangeErrorNamesKey) {
  try {
    parse_config_text("noise.rate = 1.5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "noise.rate");
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("noise.rate"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("range"), std::string::npos);
  }
}

TEST(ParseConfig, Rejections) {
  auto fails_on = [](const std::string& text, std::size_t line, const std::string& key) {
    try {
      parse_config_text(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.line(), line) << text;
      EXPECT_EQ(e.key(), key) << text;
    }
  };
  fails_on("[train]\nlearning_rate = 0.1\n", 2, "train.learning_rate");
  fails_on("epochs = 3\n", 1, "epochs");
  fails_on("[bogus]\n", 1, "bogus");
  fails_on("[train\n", 1, "");
  fails_on("[train]\nepochs\n", 2, "");
  fails_on("[train]\nepochs = three\n", 2, "train.epochs");
  fails_on("[train]\nepochs = -1\n", 2, "train.epochs");
  fails_on("[train]\nepochs = 2\nepochs = 3\n", 3, "train.epochs");
  fails_on("[train]\nmomentum = 1\n", 2, "train.momentum");
  fails_on("[noise]\nkind = pair\n", 2, "noise.kind");
  fails_on("[experiment]\nnum_seeds = 0\n", 2, "experiment.num_seeds");
  fails_on("[experiment]\nvariants = mwnet\n", 2, "experiment.variants");
  fails_on("[train]\nlr_milestones = 4, 2\n", 2, "train.lr_milestones");
  // Cross-field: flip2 needs K >= 3.
  fails_on("[blob]\nnum_classes = 2\n[noise]\nkind = flip2\n", 0, "");
}

TEST(ParseConfig, MissingFile) {
  EXPECT_THROW(parse_config("/nonexistent/config.ini"), ConfigError);
}

TEST(ParseConfig, RoundTrip) {
  ExperimentConfig c;
  c.blob.separation = 2.7182818284590451;
  c.blob.seed = 99;
  c.noise_kinds = {NoiseKind::Flip, NoiseKind::Flip2};
  c.noise_rates = {0.1, 1.0 / 3.0};
  c.noise_seed = 12345678901234ULL;
  c.variants = {Variant::RMNWNet, Variant::MWNetStar};
  c.train.hidden = {32, 16};
  c.train.lr_milestones = {};
  c.train.meta_optimizer = MetaOptimizer::Sgd;
  c.train.weight_scheme = WeightScheme::Raw;
  c.train.meta_lr = 3e-4;
  c.num_seeds = 3;
  c.output_dir = "out dir/x";
  c.workers = 4;
  const std::string text = serialize_config(c);
  const auto back = parse_config_text(text);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(parse_config_text(serialize_config(ExperimentConfig{})), ExperimentConfig{});
}

TEST(ParseConfig, FromFile) {
  const fs::path dir = temp_dir("parse");
  fs::create_directories(dir);
  std::ofstream(dir / "c.ini") << "[experiment]\nnum_seeds = 2\n";
  EXPECT_EQ(parse_config(dir / "c.ini").num_seeds, 2u);
}

TEST(RunExperiment, GridCompletenessAndFiles) {
  const fs::path dir = temp_dir("grid");
  const auto cfg = tiny_config(dir);
  const auto t = run_experiment(cfg);
  EXPECT_EQ(t.rows.size(), cfg.variants.size() * cfg.noise_grid().size());
  EXPECT_EQ(t.runs.size(), t.rows.size() * cfg.num_seeds);
  for (const auto& r : t.rows) {
    EXPECT_GE(r.acc_mean, 0.0);
    EXPECT_LE(r.acc_mean, 1.0);
    EXPECT_EQ(std::isnan(r.auc_mean), r.rate == 0.0);
  }
  EXPECT_TRUE(fs::exists(dir / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "runs.csv"));
  EXPECT_EQ(parse_config(dir / "config.ini"), cfg);
  std::size_t per_run = 0;
  for (const auto& e : fs::directory_iterator(dir / "runs")) per_run += e.is_regular_file();
  EXPECT_EQ(per_run, t.runs.size());
  const std::string results = slurp(dir / "results.csv");
  EXPECT_EQ(results.substr(0, results.find('\n')), "variant,noise,rate,num_seeds,acc_mean,acc_std,auc_mean,auc_std");
}

TEST(RunExperiment, SingleSeedHasZeroStd) {
  auto cfg = tiny_config(temp_dir("single"));
  cfg.num_seeds = 1;
  cfg.variants = {Variant::MNWNet};
  cfg.noise_rates = {0.4};
  const auto t = run_experiment(cfg, {}, false);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].acc_std, 0.0);
  EXPECT_EQ(t.rows[0].auc_std, 0.0);
}

TEST(RunExperiment, ByteIdenticalAcrossRepeatsAndWorkerCounts) {
  const fs::path a = temp_dir("det_a"), b = temp_dir("det_b");
  auto cfg = tiny_config(a);
  cfg.workers = 1;
  run_experiment(cfg);
  cfg.output_dir = b.string();
  cfg.workers = 4;
  run_experiment(cfg);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  EXPECT_EQ(slurp(a / "runs.csv"), slurp(b / "runs.csv"));
  for (const auto& e : fs::directory_iterator(a / "runs"))
    EXPECT_EQ(slurp(e.path()), slurp(b / "runs" / e.path().filename())) << e.path();
}

TEST(RunExperiment, SharedTrainCorruptionAcrossVariants) {
  BlobSpec spec;
  spec.n_train = 100;
  const auto blobs = standardize(make_blobs(spec));
  const NoiseSpec ns{NoiseKind::Uniform, 0.4, 5, 0};
  const auto c1 = make_cell_data(blobs, ns, 3);
  const auto c2 = make_cell_data(blobs, ns, 3);
  EXPECT_EQ(c1.train, c2.train);
  EXPECT_NE(c1.train, make_cell_data(blobs, ns, 4).train);
}

TEST(RunExperiment, InvalidConfigFailsBeforeRunning) {
  auto cfg = tiny_config(temp_dir("invalid"));
  cfg.num_seeds = 0;
  EXPECT_THROW(run_experiment(cfg), std::invalid_argument);
  EXPECT_FALSE(fs::exists(cfg.output_dir));
}

TEST(RunExperiment, WarnsOnMajorityNoise) {
  auto cfg = tiny_config(temp_dir("warn"));
  cfg.noise_kinds = {NoiseKind::Flip};
  cfg.noise_rates = {0.5};
  cfg.variants = {Variant::MWNetStar};
  cfg.num_seeds = 1;
  cfg.train.epochs = 1;
  std::vector<std::string> warnings;
  ExperimentHooks hooks;
  hooks.on_warning = [&](const std::string& w) { warnings.push_back(w); };
  run_experiment(cfg, hooks, false);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(RunExperiment, FailingRunIsNamed) {
  auto cfg = tiny_config(temp_dir("failing"));
  cfg.num_seeds = 1;
  cfg.train.epochs = 1;
  ExperimentHooks hooks;
  hooks.on_run = [](const RunResult& r) {
    if (r.variant == Variant::MNWNet && r.noise.rate == 0.4) throw std::runtime_error("boom");
  };
  try {
    run_experiment(cfg, hooks, false);
    FAIL() << "expected RunError";
  } catch (const RunError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("variant=mnwnet"), std::string::npos) << msg;
    EXPECT_NE(msg.find("uniform@0.4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("seed=0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("boom"), std::string::npos) << msg;
  }
}
