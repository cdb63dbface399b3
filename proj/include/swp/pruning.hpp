#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swp/data.hpp"
#include "swp/nn.hpp"
#include "swp/tensor.hpp"
#include "swp/train.hpp"
#include "swp/transforms.hpp"

namespace swp::pruning {

// ---- per-filter scoring and masks ------------------------------------------

// grid[i*m+j] = max |w[u][v]| over the group D_ij = {(u,v) : S[i][j][u][v] != 0}.
// w is one n x n filter in row-major order.
std::vector<double> group_importance(std::span<const float> w, const CoeffTensorS& s);

// Zero exactly on the union of groups whose importance is below t_spatial.
// Throws ConfigError when t_spatial < 0.
std::vector<float> spatial_mask(std::span<const float> w, const CoeffTensorS& s, double t_spatial);

// Mask zero on the union of the flagged groups (flags indexed i*m+j).
std::vector<float> mask_from_groups(std::span<const std::uint8_t> flagged, const CoeffTensorS& s);

// grid[i*m+j] = q[i][j]^2 * F[i][j]^2.
std::vector<double> winograd_importance(std::span<const float> q, const ImportanceMatrix& f);

// mask[k] = 0 iff q^2 F^2 < t_winograd. Throws ConfigError when t_winograd < 0.
std::vector<float> winograd_mask(std::span<const float> q, const ImportanceMatrix& f, double t_winograd);

// ---- threshold / quantile control ------------------------------------------

// Threshold t such that pruning every value < t removes floor(target * N)
// entries when no ties straddle the boundary. target 0 gives 0 and target 1
// gives a value strictly above the maximum. Throws ConfigError on an empty
// list or a target outside [0, 1].
double threshold_for_sparsity(std::span<const double> values, double target);

// Flags exactly floor(target * N) entries: the smallest values, lower index
// first among equal values.
std::vector<std::uint8_t> select_lowest(std::span<const double> values, double target);

// ---- layer level -----------------------------------------------------------

enum class Phase { spatial, winograd };
std::string to_string(Phase phase);
Phase parse_phase(const std::string& text);

// Winograd-phase scoring: q^2 F^2 (adjusted) or |q| (magnitude).
enum class Scoring { adjusted, magnitude };

// Group importances of a [O][C][n][n] weight tensor, laid out [O][C][m][m].
std::vector<double> layer_group_importance(const Tensor& w, const CoeffTensorS& s);
std::vector<double> layer_winograd_importance(const Tensor& q, const ImportanceMatrix& f, Scoring scoring);

// Fraction of exactly-zero Winograd-domain weights of a conv layer. Spatial
// layers are transformed with q = G (w .* mask) G^T first.
double winograd_sparsity(const nn::Layer& layer, const TransformSet& ts);

// Prunes one conv layer of the model in place. Spatial layers are pruned by
// weight groups, Winograd layers entry-wise; the new mask is intersected with
// the existing one and applied to weights and momentum. Exactly one of
// `target` (fraction of groups/entries) and `threshold` is used: threshold
// mode is selected with use_threshold.
struct LayerPruneRequest {
  double target = 0.0;
  double threshold = 0.0;
  bool use_threshold = false;
  Scoring scoring = Scoring::adjusted;
};
void prune_layer(nn::Layer& layer, const TransformSet& ts, const LayerPruneRequest& request);

// Replaces every SpatialConv by a WinogradConv with q = G (w .* mask) G^T and
// mask = indicator(q != 0). Throws ConfigError when a kernel size differs
// from the instance's n.
nn::Model convert_to_winograd(const nn::Model& model, const WinogradInstance& instance);

// ---- sensitivity and calibration -------------------------------------------

struct SensitivityRow {
  std::size_t layer = 0;  // index into Model::layer
  std::string name;       // topology token
  double probe_sparsity = 0.0;
  double probe_top1 = 0.0;
  double accuracy_loss = 0.0;     // baseline top-1 minus probe top-1
  double threshold_2pct = 0.0;    // spatial group threshold reaching the loss budget
  double sparsity_2pct = 0.0;     // group fraction pruned at that threshold
};

struct SensitivityTable {
  double baseline_top1 = 0.0;
  double loss_budget = 0.02;
  std::vector<SensitivityRow> rows;
};

struct SensitivityConfig {
  double probe_sparsity = 0.6;
  double loss_budget = 0.02;
  double sweep_step = 0.05;  // group-fraction grid for the loss-budget search
  bool calibrate = true;
};

// Prunes one conv layer at a time on a copy of the model, with all other
// layers intact, and evaluates on `eval`. The probe prunes Winograd-domain
// weights by q^2 F^2 (spatial layers are converted for the probe only). The
// calibration sweep prunes spatial groups of that layer alone until the
// top-1 loss exceeds the budget. `model` is left unchanged.
SensitivityTable sensitivity_scan(nn::Model& model, const data::Dataset& eval, const WinogradInstance& instance,
                                  const SensitivityConfig& cfg = {});

// t_i = beta * threshold_2pct_i. beta = 0 yields all-zero thresholds; negative
// beta throws ConfigError.
std::vector<double> calibrate_thresholds(const SensitivityTable& table, double beta);

void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityTable& table);

// ---- iterative pipeline ----------------------------------------------------

struct PruneStep {
  Phase phase = Phase::spatial;
  // Fraction of groups (spatial) or entries (Winograd) to prune per layer,
  // or a threshold shared by all layers when use_threshold is set.
  double target = 0.0;
  bool use_threshold = false;
  // Per-conv-layer thresholds; when nonempty they replace `target` in
  // threshold mode. Indexed by conv ordinal (0 = first conv layer).
  std::vector<double> layer_thresholds;
  int retrain_epochs = 1;
};

struct PruneSchedule {
  std::vector<PruneStep> steps;
  // Conv ordinal -> fixed target fraction used in every step.
  std::map<std::size_t, double> overrides;
  // Stop when baseline top-1 minus retrained top-1 exceeds this (absolute).
  double max_accuracy_drop = 0.001;
  Scoring scoring = Scoring::adjusted;

  // Throws ConfigError on targets outside [0, 1], negative thresholds,
  // decreasing targets within a phase, mixed targeting modes within a phase,
  // spatial steps after Winograd steps, or negative epochs.
  void validate() const;
};

struct HistoryRow {
  int iteration = 0;
  Phase phase = Phase::spatial;
  std::string event;  // baseline, prune, convert, stop, diverged
  std::vector<double> layer_sparsity;
  double overall_sparsity = 0.0;
  double top1 = 0.0;
  double baseline_top1 = 0.0;

  double relative_top1() const noexcept { return top1 - baseline_top1; }
};

struct PipelineConfig {
  WinogradInstance instance = WinogradInstance::with_default_points(6, 3);
  nn::TrainConfig spatial_retrain;
  nn::TrainConfig winograd_retrain;  // adjust_winograd selects the F-scaled step
};

struct PipelineResult {
  std::vector<HistoryRow> history;
  bool stopped = false;   // the accuracy stop condition fired
  bool diverged = false;  // a retrain produced a non-finite loss
};

// Runs prune -> retrain -> evaluate for each step. The first Winograd step
// converts the model first. When the stop condition fires or a retrain
// diverges the model is restored to the last accepted state and the run ends.
// An empty schedule leaves the model unchanged and returns an empty history.
PipelineResult prune_pipeline(nn::Model& model, const PruneSchedule& schedule, const data::Dataset& train_set,
                              const data::Dataset& eval, const PipelineConfig& cfg, std::mt19937_64& rng);

// Per-conv-layer Winograd sparsities and their entry-weighted mean.
std::vector<double> model_sparsity(const nn::Model& model, const TransformSet& ts, double* overall = nullptr);

// Columns: iteration,phase,event,<layer sparsities>,overall_sparsity,top1,baseline_top1,relative_top1
void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history,
                       const std::vector<std::string>& layer_names);

}  // namespace swp::pruning
