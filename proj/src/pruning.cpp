#include "swp/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "swp/conv.hpp"
#include "swp/error.hpp"

namespace swp::pruning {

std::vector<double> group_importance(std::span<const float> w, const CoeffTensorS& s) {
  const int m = s.m, n = s.n;
  if (w.size() != static_cast<std::size_t>(n) * n)
    throw ShapeError("group_importance: filter has " + std::to_string(w.size()) + " entries, expected " +
                     std::to_string(n * n));
  std::vector<double> grid(static_cast<std::size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double h = 0.0;
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v)
          if (s(i, j, u, v) != 0.0) h = std::max(h, static_cast<double>(std::fabs(w[u * n + v])));
      grid[i * m + j] = h;
    }
  return grid;
}

std::vector<float> mask_from_groups(std::span<const std::uint8_t> flagged, const CoeffTensorS& s) {
  const int m = s.m, n = s.n;
  if (flagged.size() != static_cast<std::size_t>(m) * m) throw ShapeError("mask_from_groups: flag grid is not m x m");
  std::vector<float> mask(static_cast<std::size_t>(n) * n, 1.0f);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      if (!flagged[i * m + j]) continue;
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v)
          if (s(i, j, u, v) != 0.0) mask[u * n + v] = 0.0f;
    }
  return mask;
}

std::vector<float> spatial_mask(std::span<const float> w, const CoeffTensorS& s, double t_spatial) {
  if (!(t_spatial >= 0.0)) throw ConfigError(fmt::format("spatial threshold {} must be >= 0", t_spatial));
  const auto h = group_importance(w, s);
  std::vector<std::uint8_t> flagged(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) flagged[k] = h[k] < t_spatial;
  return mask_from_groups(flagged, s);
}

std::vector<double> winograd_importance(std::span<const float> q, const ImportanceMatrix& f) {
  if (q.size() != f.f.size())
    throw ShapeError("winograd_importance: filter has " + std::to_string(q.size()) + " entries, expected " +
                     std::to_string(f.f.size()));
  std::vector<double> grid(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double v = static_cast<double>(q[k]) * f.f[k];
    grid[k] = v * v;
  }
  return grid;
}

std::vector<float> winograd_mask(std::span<const float> q, const ImportanceMatrix& f, double t_winograd) {
  if (!(t_winograd >= 0.0)) throw ConfigError(fmt::format("Winograd threshold {} must be >= 0", t_winograd));
  const auto imp = winograd_importance(q, f);
  std::vector<float> mask(imp.size());
  for (std::size_t k = 0; k < imp.size(); ++k) mask[k] = imp[k] < t_winograd ? 0.0f : 1.0f;
  return mask;
}

namespace {

void check_target(std::size_t n, double target) {
  if (n == 0) throw ConfigError("cannot pick a threshold for an empty importance list");
  if (!(target >= 0.0 && target <= 1.0)) throw ConfigError(fmt::format("target sparsity {} outside [0, 1]", target));
}

std::size_t prune_count(std::size_t n, double target) {
  return std::min(n, static_cast<std::size_t>(std::floor(target * static_cast<double>(n) + 1e-9)));
}

std::vector<std::size_t> stable_order(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

}  // namespace

double threshold_for_sparsity(std::span<const double> values, double target) {
  check_target(values.size(), target);
  const std::size_t k = prune_count(values.size(), target);
  if (k == 0) return 0.0;
  if (k == values.size()) {
    const double mx = *std::max_element(values.begin(), values.end());
    return std::nextafter(mx, std::numeric_limits<double>::infinity());
  }
  const auto order = stable_order(values);
  return values[order[k]];
}

std::vector<std::uint8_t> select_lowest(std::span<const double> values, double target) {
  check_target(values.size(), target);
  const std::size_t k = prune_count(values.size(), target);
  const auto order = stable_order(values);
  std::vector<std::uint8_t> flags(values.size(), 0);
  for (std::size_t r = 0; r < k; ++r) flags[order[r]] = 1;
  return flags;
}

std::string to_string(Phase phase) { return phase == Phase::spatial ? "spatial" : "winograd"; }

Phase parse_phase(const std::string& text) {
  if (text == "spatial") return Phase::spatial;
  if (text == "winograd") return Phase::winograd;
  throw ConfigError("unknown pruning phase '" + text + "'");
}

std::vector<double> layer_group_importance(const Tensor& w, const CoeffTensorS& s) {
  if (w.rank() != 4 || w.dim(2) != s.n || w.dim(3) != s.n)
    throw ShapeError("layer_group_importance: weights " + shape_to_string(w.shape()) + " do not match n=" +
                     std::to_string(s.n));
  const std::size_t filters = static_cast<std::size_t>(w.dim(0)) * w.dim(1);
  const std::size_t nn = static_cast<std::size_t>(s.n) * s.n, mm = static_cast<std::size_t>(s.m) * s.m;
  std::vector<double> out(filters * mm);
  for (std::size_t f = 0; f < filters; ++f) {
    const auto h = group_importance(std::span<const float>(w.data() + f * nn, nn), s);
    std::copy(h.begin(), h.end(), out.begin() + static_cast<std::ptrdiff_t>(f * mm));
  }
  return out;
}

std::vector<double> layer_winograd_importance(const Tensor& q, const ImportanceMatrix& f, Scoring scoring) {
  const std::size_t mm = f.f.size();
  if (q.rank() != 4 || static_cast<std::size_t>(q.dim(2)) * q.dim(3) != mm)
    throw ShapeError("layer_winograd_importance: q " + shape_to_string(q.shape()) + " does not match m=" +
                     std::to_string(f.m));
  std::vector<double> out(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double v = q[k];
    out[k] = scoring == Scoring::adjusted ? v * v * f.f[k % mm] * f.f[k % mm] : std::fabs(v);
  }
  return out;
}

namespace {

std::size_t count_zeros(const Tensor& t) {
  return static_cast<std::size_t>(std::count(t.values().begin(), t.values().end(), 0.0f));
}

const TransformSet& layer_transforms(const nn::Layer& layer, const TransformSet& fallback) {
  if (layer.kind() == nn::LayerKind::WinogradConv) return static_cast<const nn::WinogradConv&>(layer).transforms();
  return fallback;
}

std::vector<std::uint8_t> flag(std::span<const double> importance, const LayerPruneRequest& request) {
  if (!request.use_threshold) return select_lowest(importance, request.target);
  if (!(request.threshold >= 0.0)) throw ConfigError(fmt::format("threshold {} must be >= 0", request.threshold));
  std::vector<std::uint8_t> flags(importance.size());
  for (std::size_t k = 0; k < importance.size(); ++k) flags[k] = importance[k] < request.threshold;
  return flags;
}

}  // namespace

double winograd_sparsity(const nn::Layer& layer, const TransformSet& ts) {
  if (layer.kind() == nn::LayerKind::WinogradConv) {
    const Tensor& q = static_cast<const nn::WinogradConv&>(layer).q().value;
    return static_cast<double>(count_zeros(q)) / static_cast<double>(q.size());
  }
  if (layer.kind() != nn::LayerKind::SpatialConv) throw ShapeError("winograd_sparsity: not a conv layer");
  const nn::Param& w = static_cast<const nn::SpatialConv&>(layer).weight();
  Tensor masked = w.value;
  if (w.masked())
    for (std::size_t k = 0; k < masked.size(); ++k) masked[k] *= w.mask[k];
  const Tensor q = weights_to_winograd(masked, ts);
  return static_cast<double>(count_zeros(q)) / static_cast<double>(q.size());
}

void prune_layer(nn::Layer& layer, const TransformSet& ts, const LayerPruneRequest& request) {
  if (layer.kind() == nn::LayerKind::SpatialConv) {
    nn::Param& w = static_cast<nn::SpatialConv&>(layer).weight();
    const CoeffTensorS& s = ts.S();
    const auto importance = layer_group_importance(w.value, s);
    const auto flags = flag(importance, request);
    const std::size_t mm = static_cast<std::size_t>(s.m) * s.m, nn_ = static_cast<std::size_t>(s.n) * s.n;
    if (!w.masked()) w.mask = Tensor(w.value.shape(), 1.0f);
    for (std::size_t f = 0; f * mm < flags.size(); ++f) {
      const auto mask = mask_from_groups(std::span<const std::uint8_t>(flags.data() + f * mm, mm), s);
      for (std::size_t k = 0; k < nn_; ++k) w.mask[f * nn_ + k] *= mask[k];
    }
    w.apply_mask();
    return;
  }
  if (layer.kind() == nn::LayerKind::WinogradConv) {
    auto& conv = static_cast<nn::WinogradConv&>(layer);
    nn::Param& q = conv.q();
    const auto importance = layer_winograd_importance(q.value, conv.transforms().F(), request.scoring);
    const auto flags = flag(importance, request);
    if (!q.masked()) q.mask = Tensor(q.value.shape(), 1.0f);
    for (std::size_t k = 0; k < flags.size(); ++k)
      if (flags[k]) q.mask[k] = 0.0f;
    q.apply_mask();
    return;
  }
  throw ShapeError("prune_layer: " + to_string(layer.kind()) + " is not a conv layer");
}

namespace {

std::unique_ptr<nn::WinogradConv> winograd_twin(const nn::SpatialConv& conv,
                                                const std::shared_ptr<const TransformSet>& ts) {
  if (conv.kernel() != ts->n())
    throw ConfigError(fmt::format("kernel size {} is not supported by F({},{}) with m={}", conv.kernel(), ts->r(),
                                  ts->n(), ts->m()));
  Tensor w = conv.weight().value;
  if (conv.weight().masked())
    for (std::size_t k = 0; k < w.size(); ++k) w[k] *= conv.weight().mask[k];
  return std::make_unique<nn::WinogradConv>(WinogradConvLayer::from_spatial(w, *ts, conv.pad()), ts);
}

}  // namespace

nn::Model convert_to_winograd(const nn::Model& model, const WinogradInstance& instance) {
  const auto ts = shared_transforms(instance);
  nn::Model out = model;
  for (std::size_t i : out.conv_layers())
    if (out.layer(i).kind() == nn::LayerKind::SpatialConv)
      out.replace(i, winograd_twin(static_cast<const nn::SpatialConv&>(out.layer(i)), ts));
  out.validate();
  return out;
}

SensitivityTable sensitivity_scan(nn::Model& model, const data::Dataset& eval, const WinogradInstance& instance,
                                  const SensitivityConfig& cfg) {
  if (!(cfg.probe_sparsity >= 0.0 && cfg.probe_sparsity <= 1.0))
    throw ConfigError(fmt::format("probe sparsity {} outside [0, 1]", cfg.probe_sparsity));
  if (!(cfg.sweep_step > 0.0 && cfg.sweep_step <= 1.0))
    throw ConfigError(fmt::format("sweep step {} outside (0, 1]", cfg.sweep_step));
  const auto ts = shared_transforms(instance);
  SensitivityTable table;
  table.loss_budget = cfg.loss_budget;
  table.baseline_top1 = nn::evaluate(model, eval).top1;

  for (std::size_t li : model.conv_layers()) {
    SensitivityRow row;
    row.layer = li;
    row.name = model.layer(li).describe();
    row.probe_sparsity = cfg.probe_sparsity;
    {
      nn::Model probe = model;
      if (probe.layer(li).kind() == nn::LayerKind::SpatialConv)
        probe.replace(li, winograd_twin(static_cast<const nn::SpatialConv&>(probe.layer(li)), ts));
      prune_layer(probe.layer(li), *ts, {cfg.probe_sparsity, 0.0, false, Scoring::adjusted});
      row.probe_top1 = nn::evaluate(probe, eval).top1;
      row.accuracy_loss = table.baseline_top1 - row.probe_top1;
    }
    if (cfg.calibrate) {
      const nn::Layer& layer = model.layer(li);
      const auto importance = layer.kind() == nn::LayerKind::SpatialConv
                                  ? layer_group_importance(static_cast<const nn::SpatialConv&>(layer).weight().value,
                                                           ts->S())
                                  : layer_winograd_importance(static_cast<const nn::WinogradConv&>(layer).q().value,
                                                              layer_transforms(layer, *ts).F(), Scoring::adjusted);
      const int steps = static_cast<int>(std::floor(1.0 / cfg.sweep_step + 1e-9));
      for (int s = 1; s <= steps; ++s) {
        const double fraction = std::min(1.0, s * cfg.sweep_step);
        const double t = threshold_for_sparsity(importance, fraction);
        nn::Model probe = model;
        prune_layer(probe.layer(li), *ts, {0.0, t, true, Scoring::adjusted});
        if (table.baseline_top1 - nn::evaluate(probe, eval).top1 > cfg.loss_budget) break;
        row.threshold_2pct = t;
        row.sparsity_2pct = fraction;
      }
    }
    table.rows.push_back(row);
  }
  return table;
}

std::vector<double> calibrate_thresholds(const SensitivityTable& table, double beta) {
  if (!(beta >= 0.0)) throw ConfigError(fmt::format("threshold multiplier beta = {} must be >= 0", beta));
  std::vector<double> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) out.push_back(beta * row.threshold_2pct);
  return out;
}

void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityTable& table) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "layer,name,probe_sparsity,baseline_top1,probe_top1,accuracy_loss,loss_budget,threshold,threshold_sparsity\n";
  for (const auto& r : table.rows)
    out << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.layer, r.name,
                       r.probe_sparsity, table.baseline_top1, r.probe_top1, r.accuracy_loss, table.loss_budget,
                       r.threshold_2pct, r.sparsity_2pct);
}

void PruneSchedule::validate() const {
  if (!(max_accuracy_drop >= 0.0)) throw ConfigError("max accuracy drop must be >= 0");
  for (const auto& [layer, target] : overrides)
    if (!(target >= 0.0 && target <= 1.0))
      throw ConfigError(fmt::format("override for conv layer {} is {}, outside [0, 1]", layer, target));
  const PruneStep* prev = nullptr;
  bool seen_winograd = false;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const PruneStep& s = steps[i];
    const std::string where = fmt::format("schedule step {}", i);
    if (s.retrain_epochs < 0) throw ConfigError(where + ": retrain epochs must be >= 0");
    if (s.phase == Phase::spatial && seen_winograd) throw ConfigError(where + ": spatial step after Winograd steps");
    seen_winograd = seen_winograd || s.phase == Phase::winograd;
    if (s.use_threshold) {
      if (!(s.target >= 0.0)) throw ConfigError(where + ": threshold must be >= 0");
      for (double t : s.layer_thresholds)
        if (!(t >= 0.0)) throw ConfigError(where + ": layer thresholds must be >= 0");
    } else if (!(s.target >= 0.0 && s.target <= 1.0)) {
      throw ConfigError(fmt::format("{}: target {} outside [0, 1]", where, s.target));
    }
    if (prev && prev->phase == s.phase) {
      if (prev->use_threshold != s.use_threshold) throw ConfigError(where + ": targeting mode changes within a phase");
      if (s.target < prev->target) throw ConfigError(where + ": target decreases within a phase");
      if (s.layer_thresholds.size() != prev->layer_thresholds.size())
        throw ConfigError(where + ": layer threshold count changes within a phase");
      for (std::size_t k = 0; k < s.layer_thresholds.size(); ++k)
        if (s.layer_thresholds[k] < prev->layer_thresholds[k])
          throw ConfigError(fmt::format("{}: threshold of conv layer {} decreases", where, k));
    }
    prev = &s;
  }
}

std::vector<double> model_sparsity(const nn::Model& model, const TransformSet& ts, double* overall) {
  std::vector<double> out;
  double zeros = 0.0, total = 0.0;
  for (std::size_t li : model.conv_layers()) {
    const nn::Layer& layer = model.layer(li);
    const double s = winograd_sparsity(layer, layer_transforms(layer, ts));
    const nn::Param* p = layer.params().front();
    const int m = layer_transforms(layer, ts).m();
    const double entries = static_cast<double>(p->value.dim(0)) * p->value.dim(1) * m * m;
    out.push_back(s);
    zeros += s * entries;
    total += entries;
  }
  if (overall) *overall = total > 0.0 ? zeros / total : 0.0;
  return out;
}

PipelineResult prune_pipeline(nn::Model& model, const PruneSchedule& schedule, const data::Dataset& train_set,
                              const data::Dataset& eval, const PipelineConfig& cfg, std::mt19937_64& rng) {
  PipelineResult result;
  if (schedule.steps.empty()) return result;
  schedule.validate();
  const auto ts = shared_transforms(cfg.instance);
  const double baseline = nn::evaluate(model, eval).top1;

  const auto record = [&](int iteration, Phase phase, const std::string& event, double top1) {
    HistoryRow row;
    row.iteration = iteration;
    row.phase = phase;
    row.event = event;
    row.layer_sparsity = model_sparsity(model, *ts, &row.overall_sparsity);
    row.top1 = top1;
    row.baseline_top1 = baseline;
    result.history.push_back(std::move(row));
  };
  record(0, schedule.steps.front().phase, "baseline", baseline);

  nn::Model last_good = model;
  double last_good_top1 = baseline;
  int iteration = 0;
  for (const PruneStep& step : schedule.steps) {
    ++iteration;
    if (step.phase == Phase::winograd) {
      const auto conv = model.conv_layers();
      const bool spatial_left = std::any_of(conv.begin(), conv.end(), [&](std::size_t i) {
        return model.layer(i).kind() == nn::LayerKind::SpatialConv;
      });
      if (spatial_left) {
        model = convert_to_winograd(model, cfg.instance);
        last_good_top1 = nn::evaluate(model, eval).top1;
        record(iteration, Phase::winograd, "convert", last_good_top1);
        last_good = model;
      }
    }

    const auto conv = model.conv_layers();
    for (std::size_t k = 0; k < conv.size(); ++k) {
      LayerPruneRequest request;
      request.scoring = schedule.scoring;
      if (const auto it = schedule.overrides.find(k); it != schedule.overrides.end()) {
        request.target = it->second;
      } else if (step.use_threshold) {
        request.use_threshold = true;
        request.threshold = step.layer_thresholds.empty() ? step.target : step.layer_thresholds.at(k);
      } else {
        request.target = step.target;
      }
      prune_layer(model.layer(conv[k]), layer_transforms(model.layer(conv[k]), *ts), request);
    }

    if (step.retrain_epochs > 0) {
      nn::TrainConfig tc = step.phase == Phase::spatial ? cfg.spatial_retrain : cfg.winograd_retrain;
      tc.epochs = step.retrain_epochs;
      try {
        nn::train(model, train_set, nullptr, tc, rng);
      } catch (const DivergenceError&) {
        model = last_good;
        record(iteration, step.phase, "diverged", last_good_top1);
        result.diverged = true;
        return result;
      }
    }
    const double top1 = nn::evaluate(model, eval).top1;
    record(iteration, step.phase, "prune", top1);
    if (baseline - top1 > schedule.max_accuracy_drop) {
      model = last_good;
      record(iteration, step.phase, "stop", last_good_top1);
      result.stopped = true;
      return result;
    }
    last_good = model;
    last_good_top1 = top1;
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history,
                       const std::vector<std::string>& layer_names) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "iteration,phase,event";
  for (const auto& name : layer_names) out << ",sparsity_" << name;
  out << ",overall_sparsity,top1,baseline_top1,relative_top1\n";
  for (const auto& r : history) {
    if (r.layer_sparsity.size() != layer_names.size())
      throw ShapeError(fmt::format("history row has {} layer sparsities for {} names", r.layer_sparsity.size(),
                                   layer_names.size()));
    out << fmt::format("{},{},{}", r.iteration, to_string(r.phase), r.event);
    for (double s : r.layer_sparsity) out << fmt::format(",{:.17g}", s);
    out << fmt::format(",{:.17g},{:.17g},{:.17g},{:.17g}\n", r.overall_sparsity, r.top1, r.baseline_top1,
                       r.relative_top1());
  }
}

}  // namespace swp::pruning
