#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "swp/data.hpp"
#include "swp/nn.hpp"
#include "swp/pruning.hpp"
#include "swp/train.hpp"
#include "swp/transforms.hpp"

namespace swp::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Typed view of a key=value run configuration. Defaults describe the
// 4-conv-layer CIFAR-10 desk model.
struct RunConfig {
  // general
  std::uint64_t seed = 1;
  bool deterministic = false;
  fs::path output_dir = "run";

  // data
  std::string dataset = "synthetic";  // synthetic | cifar10
  fs::path data_dir;
  std::size_t train_limit = 5000;
  std::size_t val_limit = 1000;
  std::size_t test_limit = 2000;
  int synthetic_classes = 10;
  int synthetic_size = 16;
  int synthetic_train = 2000;
  int synthetic_val = 500;
  int synthetic_test = 500;
  data::Normalization normalization;
  std::map<std::string, std::string> checksums;  // file name -> sha256 hex

  // model
  std::string topology =
      "conv32,bn,relu,pool,conv32,bn,relu,pool,conv64,bn,relu,conv64,bn,relu,pool,flatten,dense10";
  WinogradInstance instance = WinogradInstance::with_default_points(6, 3);

  // training
  nn::TrainConfig train;

  // pruning
  fs::path checkpoint;
  pruning::PruneSchedule schedule;
  bool threshold_mode = false;  // schedule targets are beta (spatial) or t (Winograd)
  // Unset: spatial retraining uses train.sgd.learning_rate, Winograd
  // retraining a tenth of the spatial rate.
  std::optional<double> spatial_learning_rate;
  std::optional<double> winograd_learning_rate;
  bool adjust_gradients = true;

  // sensitivity
  pruning::SensitivityConfig sensitivity;
  double beta = 1.0;

  // bench
  int bench_batch = 4;
  int bench_in = 32;
  int bench_out = 32;
  int bench_size = 32;
  std::vector<double> bench_sparsities{0.0, 0.5, 0.74, 0.9};
  int bench_repeats = 3;

  // ablation
  int ablation_seeds = 3;
  std::vector<double> ablation_sparsities{0.5, 0.6, 0.7, 0.8};
  double ablation_sparsity = 0.6;
  int ablation_epochs = 3;
  std::vector<double> ablation_learning_rates{0.001, 0.003, 0.01};
  std::vector<double> ablation_alphas{0.0, 1.0, 1.5, 2.0};
};

// Parses "key = value" lines; '#' starts a comment. Relative paths are
// resolved against base_dir. Throws ConfigError naming the offending key on
// unknown or duplicate keys and malformed values.
RunConfig parse_config(const std::string& text, const fs::path& base_dir = ".");
RunConfig load_config(const fs::path& path);

// "phase:target:epochs" entries separated by commas.
std::vector<pruning::PruneStep> parse_schedule(const std::string& text);

struct Splits {
  data::Dataset train, val, test;
};

// Loads the configured dataset. CIFAR-10: the first train_limit training
// records, the next val_limit as validation, and the first test_limit test
// records. Verifies configured checksums first.
Splits load_splits(const RunConfig& cfg);

// Every command writes under cfg.output_dir and refreshes MANIFEST.sha256
// (sha256sum format) over all files there. Each returns the files it wrote.
std::vector<fs::path> cmd_train(const RunConfig& cfg);
std::vector<fs::path> cmd_prune(const RunConfig& cfg, const std::string& phase = "all");
std::vector<fs::path> cmd_sensitivity(const RunConfig& cfg);
std::vector<fs::path> cmd_bench(const RunConfig& cfg);
std::vector<fs::path> cmd_report_sparsity(const RunConfig& cfg, const fs::path& checkpoint,
                                          const std::string& prefix = "sparsity");
std::vector<fs::path> cmd_ablation(const RunConfig& cfg);
std::vector<fs::path> cmd_gen_transforms(const RunConfig& cfg);

// Per-filter pruned-count histogram and per-position sparsity of one layer.
struct LayerSparsityReport {
  std::size_t layer = 0;
  std::string name;
  int m = 0;
  std::size_t filters = 0;
  std::vector<std::size_t> histogram;      // bins 0..m*m: filters with that many zeros
  std::vector<double> position_all;        // m*m, over all filters
  std::vector<double> position_nonempty;   // m*m, filters with a weight left
  std::size_t empty_filters = 0;
};

std::vector<LayerSparsityReport> sparsity_report(const nn::Model& model, const WinogradInstance& fallback);
std::string ascii_heatmap(const std::vector<double>& grid, int m);

void write_manifest(const fs::path& dir);

// Entry point of the swp executable; returns the process exit code.
int run(int argc, char** argv);

}  // namespace swp::cli
