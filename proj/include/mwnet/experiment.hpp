#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <tuple>
#include <vector>

#include "mwnet/bilevel.hpp"
#include "mwnet/data.hpp"
#include "mwnet/noise.hpp"

namespace mwnet {

struct ExperimentConfig {
  BlobSpec blob;
  std::vector<NoiseKind> noise_kinds = {NoiseKind::Uniform};
  std::vector<double> noise_rates = {0.0, 0.4};
  std::uint64_t noise_seed = 0;
  std::vector<Variant> variants = {Variant::MWNetStar, Variant::MNWNet, Variant::RMNWNet};
  TrainConfig train;  // meta_loss / meta_is_noisy are set per variant
  std::size_t num_seeds = 5;
  std::string output_dir = "results";
  std::size_t workers = 1;

  /// Noise grid in kind-major order.
  std::vector<NoiseSpec> noise_grid() const {
    std::vector<NoiseSpec> out;
    for (NoiseKind k : noise_kinds)
      for (double r : noise_rates) out.push_back({k, r, blob.num_classes, noise_seed});
    return out;
  }

  void validate() const {
    blob.validate();
    train.validate();
    if (num_seeds < 1) throw std::invalid_argument("experiment.num_seeds must be >= 1");
    if (workers < 1) throw std::invalid_argument("experiment.workers must be >= 1");
    if (variants.empty()) throw std::invalid_argument("experiment.variants must not be empty");
    if (noise_kinds.empty() || noise_rates.empty()) throw std::invalid_argument("noise grid must not be empty");
    if (output_dir.empty()) throw std::invalid_argument("experiment.output_dir must not be empty");
    for (const NoiseSpec& ns : noise_grid()) ns.validate();
    for (Variant v : variants) check_variant(v, config_for(v, train));
  }

  bool operator==(const ExperimentConfig&) const = default;
};

/// Config error carrying the offending line (0 when not tied to a line) and key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, std::string key, const std::string& what)
      : std::runtime_error(describe(line, key, what)), line_(line), key_(std::move(key)) {}

  std::size_t line() const { return line_; }
  const std::string& key() const { return key_; }

 private:
  static std::string describe(std::size_t line, const std::string& key, const std::string& what) {
    std::string s = line ? "line " + std::to_string(line) + ": " : std::string("config: ");
    if (!key.empty()) s += "key '" + key + "': ";
    return s + what;
  }

  std::size_t line_;
  std::string key_;
};

namespace config_detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t p = 0;
  while (true) {
    const auto q = s.find(',', p);
    out.push_back(trim(s.substr(p, q == std::string_view::npos ? std::string_view::npos : q - p)));
    if (q == std::string_view::npos) break;
    p = q + 1;
  }
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

template <typename T>
T parse_number(std::string_view s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw std::invalid_argument("expected a number, got '" + std::string(s) + "'");
  return v;
}

inline double parse_real(std::string_view s) {
  const double v = parse_number<double>(s);
  if (!std::isfinite(v)) throw std::invalid_argument("value must be finite");
  return v;
}

inline std::size_t parse_count(std::string_view s) {
  if (!s.empty() && s[0] == '-') throw std::invalid_argument("value must be non-negative");
  return parse_number<std::size_t>(s);
}

inline bool parse_bool(std::string_view s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(s) + "'");
}

template <typename T, typename F>
std::vector<T> parse_list(std::string_view s, F item) {
  std::vector<T> out;
  for (auto tok : split_list(s)) out.push_back(item(tok));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F item) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ", ";
    s += item(xs[i]);
  }
  return s;
}

inline void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct Field {
  std::string name;  // section.key
  std::function<void(std::string_view)> set;
  std::function<std::string()> get;
};

inline std::vector<Field> fields(ExperimentConfig& c) {
  auto real = [](double v) { return format_real(v); };
  auto count = [](std::size_t v) { return std::to_string(v); };
  TrainConfig& t = c.train;
  BlobSpec& b = c.blob;
  return {
      {"blob.num_classes", [&](auto s) { b.num_classes = parse_count(s); require(b.num_classes >= 2, "need at least 2 classes"); },
       [&] { return count(b.num_classes); }},
      {"blob.dim", [&](auto s) { b.dim = parse_count(s); require(b.dim >= 1, "must be >= 1"); }, [&] { return count(b.dim); }},
      {"blob.n_train", [&](auto s) { b.n_train = parse_count(s); require(b.n_train >= 1, "must be >= 1"); },
       [&] { return count(b.n_train); }},
      {"blob.n_meta", [&](auto s) { b.n_meta = parse_count(s); require(b.n_meta >= 1, "must be >= 1"); },
       [&] { return count(b.n_meta); }},
      {"blob.n_test", [&](auto s) { b.n_test = parse_count(s); require(b.n_test >= 1, "must be >= 1"); },
       [&] { return count(b.n_test); }},
      {"blob.separation", [&](auto s) { b.separation = parse_real(s); require(b.separation > 0, "must be > 0"); },
       [&] { return real(b.separation); }},
      {"blob.cluster_std", [&](auto s) { b.cluster_std = parse_real(s); require(b.cluster_std > 0, "must be > 0"); },
       [&] { return real(b.cluster_std); }},
      {"blob.seed", [&](auto s) { b.seed = parse_number<std::uint64_t>(s); }, [&] { return std::to_string(b.seed); }},

      {"noise.kind",
       [&](auto s) {
         c.noise_kinds = parse_list<NoiseKind>(s, [](auto x) { return parse_noise_kind(x); });
         require(!c.noise_kinds.empty(), "list must not be empty");
       },
       [&] { return join(c.noise_kinds, [](NoiseKind k) { return std::string(to_string(k)); }); }},
      {"noise.rate",
       [&](auto s) {
         c.noise_rates = parse_list<double>(s, [](auto x) {
           const double r = parse_real(x);
           if (!(r >= 0.0 && r < 1.0))
             throw std::invalid_argument("value " + std::string(x) + " out of range [0, 1)");
           return r;
         });
         require(!c.noise_rates.empty(), "list must not be empty");
       },
       [&] { return join(c.noise_rates, real); }},
      {"noise.seed", [&](auto s) { c.noise_seed = parse_number<std::uint64_t>(s); },
       [&] { return std::to_string(c.noise_seed); }},

      {"train.train_batch", [&](auto s) { t.train_batch = parse_count(s); require(t.train_batch >= 1, "must be >= 1"); },
       [&] { return count(t.train_batch); }},
      {"train.meta_batch", [&](auto s) { t.meta_batch = parse_count(s); require(t.meta_batch >= 1, "must be >= 1"); },
       [&] { return count(t.meta_batch); }},
      {"train.lr", [&](auto s) { t.lr = parse_real(s); require(t.lr > 0, "must be > 0"); }, [&] { return real(t.lr); }},
      {"train.meta_lr", [&](auto s) { t.meta_lr = parse_real(s); require(t.meta_lr > 0, "must be > 0"); },
       [&] { return real(t.meta_lr); }},
      {"train.momentum",
       [&](auto s) { t.momentum = parse_real(s); require(t.momentum >= 0 && t.momentum < 1, "out of range [0, 1)"); },
       [&] { return real(t.momentum); }},
      {"train.weight_decay", [&](auto s) { t.weight_decay = parse_real(s); require(t.weight_decay >= 0, "must be >= 0"); },
       [&] { return real(t.weight_decay); }},
      {"train.meta_weight_decay",
       [&](auto s) { t.meta_weight_decay = parse_real(s); require(t.meta_weight_decay >= 0, "must be >= 0"); },
       [&] { return real(t.meta_weight_decay); }},
      {"train.epochs", [&](auto s) { t.epochs = parse_count(s); }, [&] { return count(t.epochs); }},
      {"train.lr_milestones",
       [&](auto s) {
         t.lr_milestones = parse_list<std::size_t>(s, [](auto x) { return parse_count(x); });
         for (std::size_t i = 1; i < t.lr_milestones.size(); ++i)
           require(t.lr_milestones[i] > t.lr_milestones[i - 1], "milestones must be strictly increasing");
       },
       [&] { return join(t.lr_milestones, count); }},
      {"train.hidden",
       [&](auto s) {
         t.hidden = parse_list<std::size_t>(s, [](auto x) { return parse_count(x); });
         for (std::size_t h : t.hidden) require(h >= 1, "layer sizes must be >= 1");
       },
       [&] { return join(t.hidden, count); }},
      {"train.weightnet_hidden",
       [&](auto s) { t.weightnet_hidden = parse_count(s); require(t.weightnet_hidden >= 1, "must be >= 1"); },
       [&] { return count(t.weightnet_hidden); }},
      {"train.weight_scheme", [&](auto s) { t.weight_scheme = parse_weight_scheme(s); },
       [&] { return std::string(to_string(t.weight_scheme)); }},
      {"train.meta_optimizer", [&](auto s) { t.meta_optimizer = parse_meta_optimizer(s); },
       [&] { return std::string(to_string(t.meta_optimizer)); }},
      {"train.seed", [&](auto s) { t.seed = parse_number<std::uint64_t>(s); }, [&] { return std::to_string(t.seed); }},

      {"experiment.variants",
       [&](auto s) {
         c.variants = parse_list<Variant>(s, [](auto x) { return parse_variant(x); });
         require(!c.variants.empty(), "list must not be empty");
       },
       [&] { return join(c.variants, [](Variant v) { return std::string(to_string(v)); }); }},
      {"experiment.num_seeds", [&](auto s) { c.num_seeds = parse_count(s); require(c.num_seeds >= 1, "must be >= 1"); },
       [&] { return count(c.num_seeds); }},
      {"experiment.output_dir",
       [&](auto s) {
         require(!s.empty(), "must not be empty");
         c.output_dir = std::string(s);
       },
       [&] { return c.output_dir; }},
      {"experiment.workers", [&](auto s) { c.workers = parse_count(s); require(c.workers >= 1, "must be >= 1"); },
       [&] { return count(c.workers); }},
  };
}

}  // namespace config_detail

/// Parses `key = value` lines. Keys are either dotted (`noise.rate`) or bare
/// under a `[section]` header. `#` starts a comment. Lists are comma separated.
inline ExperimentConfig parse_config_text(std::string_view text) {
  using namespace config_detail;
  ExperimentConfig cfg;
  auto table = fields(cfg);
  std::map<std::string, std::size_t> index;
  std::set<std::string> sections;
  for (std::size_t i = 0; i < table.size(); ++i) {
    index[table[i].name] = i;
    sections.insert(table[i].name.substr(0, table[i].name.find('.')));
  }

  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    const std::string_view line = trim(raw);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(line_no, "", "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.count(section)) throw ConfigError(line_no, section, "unknown section");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(line_no, "", "expected 'key = value'");
    const std::string_view bare = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (bare.empty()) throw ConfigError(line_no, "", "missing key");

    std::string key = std::string(bare);
    if (key.find('.') == std::string::npos) {
      if (section.empty()) throw ConfigError(line_no, key, "key outside any section");
      key = section + "." + key;
    }
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError(line_no, key, "unknown key");
    if (!seen.insert(key).second) throw ConfigError(line_no, key, "duplicate key");
    try {
      table[it->second].set(value);
    } catch (const std::exception& e) {
      throw ConfigError(line_no, key, e.what());
    }
  }

  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(0, "", e.what());
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(0, "", "cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Every key, grouped by section. parse_config_text(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string out, section;
  for (const auto& f : config_detail::fields(copy)) {
    const auto dot = f.name.find('.');
    const std::string s = f.name.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out += '\n';
      out += "[" + s + "]\n";
      section = s;
    }
    out += f.name.substr(dot + 1) + " = " + f.get() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid execution.
// ---------------------------------------------------------------------------

struct RunResult {
  Variant variant = Variant::MWNetStar;
  NoiseSpec noise;
  std::size_t seed_index = 0;
  RunReport report;
};

struct ResultRow {
  Variant variant = Variant::MWNetStar;
  NoiseKind noise_kind = NoiseKind::Uniform;
  double rate = 0.0;
  std::size_t num_seeds = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;  // population std, 0 for a single seed
  double auc_mean = std::numeric_limits<double>::quiet_NaN();
  double auc_std = std::numeric_limits<double>::quiet_NaN();
};

struct ResultTable {
  std::vector<ResultRow> rows;  // variant-major, then noise grid order
  std::vector<RunResult> runs;  // same order, seeds innermost

  const ResultRow& row(Variant v, NoiseKind k, double rate) const {
    for (const auto& r : rows)
      if (r.variant == v && r.noise_kind == k && r.rate == rate) return r;
    throw std::out_of_range("no result row for " + std::string(to_string(v)));
  }
};

/// Mean and population std; NaN entries make both NaN.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size()))};
}

/// Data for one (noise, seed) cell. Train corruption depends only on the
/// noise spec and seed, so every variant sees the same noisy training set.
struct CellData {
  LabeledDataset train;
  LabeledDataset meta_noisy;
};

inline std::uint64_t run_seed(const ExperimentConfig& cfg, std::size_t seed_index) {
  return cfg.train.seed + seed_index;
}

inline CellData make_cell_data(const SplitBundle& blobs, const NoiseSpec& base, std::uint64_t seed) {
  NoiseSpec ns = base;
  ns.seed = base.seed + seed;
  const TransitionMatrix t = build_transition(ns);
  Rng train_rng(seed, 0xC0), meta_rng(seed, 0xC1);
  return {corrupt(blobs.train, t, train_rng), corrupt(blobs.meta, t, meta_rng)};
}

inline RunReport run_cell(const ExperimentConfig& cfg, const SplitBundle& blobs, Variant v, const NoiseSpec& noise,
                          std::size_t seed_index) {
  const std::uint64_t seed = run_seed(cfg, seed_index);
  const CellData cell = make_cell_data(blobs, noise, seed);
  TrainConfig tc = config_for(v, cfg.train);
  tc.seed = seed;
  const LabeledDataset& meta = tc.meta_is_noisy ? cell.meta_noisy : blobs.meta;
  return train(v, DataSplits{cell.train, meta, blobs.test}, tc);
}

inline std::string run_file_name(Variant v, const NoiseSpec& ns, std::size_t seed_index) {
  return std::string(to_string(v)) + "_" + std::string(to_string(ns.kind)) + "_" + format_real(ns.rate) + "_seed" +
         std::to_string(seed_index) + ".csv";
}

class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Columns: variant,noise,rate,num_seeds,acc_mean,acc_std,auc_mean,auc_std
inline void write_results_csv(std::ostream& os, const ResultTable& t) {
  os << "variant,noise,rate,num_seeds,acc_mean,acc_std,auc_mean,auc_std\n";
  for (const auto& r : t.rows)
    os << to_string(r.variant) << ',' << to_string(r.noise_kind) << ',' << format_real(r.rate) << ',' << r.num_seeds
       << ',' << format_real(r.acc_mean) << ',' << format_real(r.acc_std) << ',' << format_real(r.auc_mean) << ','
       << format_real(r.auc_std) << '\n';
}

/// Columns: variant,noise,rate,seed,final_test_accuracy,best_auc,final_auc,mean_weight_clean,mean_weight_corrupt
inline void write_runs_csv(std::ostream& os, const ResultTable& t) {
  os << "variant,noise,rate,seed,final_test_accuracy,best_auc,final_auc,mean_weight_clean,mean_weight_corrupt\n";
  for (const auto& r : t.runs)
    os << to_string(r.variant) << ',' << to_string(r.noise.kind) << ',' << format_real(r.noise.rate) << ','
       << r.seed_index << ',' << format_real(r.report.final_test_accuracy) << ',' << format_real(r.report.best_auc)
       << ',' << format_real(r.report.final_auc) << ',' << format_real(r.report.final_weights.clean.mean) << ','
       << format_real(r.report.final_weights.corrupt.mean) << '\n';
}

struct ExperimentHooks {
  std::function<void(const RunResult&)> on_run;       // called under a lock, completion order
  std::function<void(const std::string&)> on_warning;
};

/// Runs variants x noise grid x seeds on cfg.workers threads. Results are
/// merged by cell index, so output does not depend on the worker count.
inline ResultTable run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {},
                                  bool write_files = true) {
  cfg.validate();
  const auto grid = cfg.noise_grid();
  for (const auto& ns : grid)
    if (majority_feasibility(ns) == Feasibility::Warning && hooks.on_warning)
      hooks.on_warning(std::string(to_string(ns.kind)) + " noise at rate " + format_real(ns.rate) +
                       " can make the noisy class the majority");

  const SplitBundle blobs = standardize(make_blobs(cfg.blob));

  ResultTable table;
  for (Variant v : cfg.variants)
    for (const auto& ns : grid)
      for (std::size_t s = 0; s < cfg.num_seeds; ++s) table.runs.push_back({v, ns, s, {}});

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::string first_error;
  auto worker = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= table.runs.size()) return;
      RunResult& r = table.runs[i];
      try {
        r.report = run_cell(cfg, blobs, r.variant, r.noise, r.seed_index);
        std::lock_guard<std::mutex> lock(mu);
        if (hooks.on_run) hooks.on_run(r);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failed.exchange(true))
          first_error = "run (variant=" + std::string(to_string(r.variant)) + ", noise=" +
                        std::string(to_string(r.noise.kind)) + "@" + format_real(r.noise.rate) +
                        ", seed=" + std::to_string(r.seed_index) + ") failed: " + e.what();
      }
    }
  };
  const std::size_t nthreads = std::min(cfg.workers, table.runs.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < nthreads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failed) throw RunError(first_error);

  for (std::size_t i = 0; i < table.runs.size(); i += cfg.num_seeds) {
    std::vector<double> acc, auc;
    for (std::size_t s = 0; s < cfg.num_seeds; ++s) {
      acc.push_back(table.runs[i + s].report.final_test_accuracy);
      auc.push_back(table.runs[i + s].report.best_auc);
    }
    ResultRow row;
    row.variant = table.runs[i].variant;
    row.noise_kind = table.runs[i].noise.kind;
    row.rate = table.runs[i].noise.rate;
    row.num_seeds = cfg.num_seeds;
    std::tie(row.acc_mean, row.acc_std) = mean_std(acc);
    std::tie(row.auc_mean, row.auc_std) = mean_std(auc);
    table.rows.push_back(row);
  }

  if (write_files) {
    namespace fs = std::filesystem;
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir / "runs");
    auto open = [](const fs::path& p) {
      std::ofstream os(p, std::ios::binary);
      if (!os) throw RunError("cannot write '" + p.string() + "'");
      return os;
    };
    {
      auto os = open(dir / "results.csv");
      write_results_csv(os, table);
    }
    {
      auto os = open(dir / "runs.csv");
      write_runs_csv(os, table);
    }
    {
      auto os = open(dir / "config.ini");
      os << serialize_config(cfg);
    }
    for (const auto& r : table.runs) {
      auto os = open(dir / "runs" / run_file_name(r.variant, r.noise, r.seed_index));
      write_run_report_csv(os, r.report);
    }
  }
  return table;
}

}  // namespace mwnet
