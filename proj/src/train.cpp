#include "swp/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "swp/error.hpp"

namespace swp::nn {

void TrainConfig::validate() const {
  sgd.validate();
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
}

EvalResult evaluate(Model& model, const data::Dataset& ds, int batch_size) {
  std::mt19937_64 unused(0);
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data::gather_labels(ds, idx);
    const ForwardResult r = forward(model, data::gather_batch(ds, idx, false, unused), labels, false);
    loss += r.loss * static_cast<double>(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) correct += r.predictions[i] == labels[i];
  }
  const double n = static_cast<double>(ds.size());
  return {loss / n, static_cast<double>(correct) / n};
}

std::vector<EpochLog> train(Model& model, const data::Dataset& train_set, const data::Dataset* eval_set,
                            const TrainConfig& cfg, std::mt19937_64& rng,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  std::vector<EpochLog> rows;
  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SgdConfig sgd = cfg.sgd;
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(n - b, static_cast<std::size_t>(cfg.batch_size)));
      sgd.learning_rate =
          cfg.cosine ? cfg.sgd.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps))
                     : cfg.sgd.learning_rate;
      const auto labels = data::gather_labels(train_set, idx);
      const ForwardResult r = forward(model, data::gather_batch(train_set, idx, cfg.augment, rng), labels, true);
      if (!std::isfinite(r.loss)) throw DivergenceError(fmt::format("non-finite loss at epoch {} step {}", epoch, step));
      zero_grad(model);
      backward(model);
      if (sgd.learning_rate > 0.0) sgd_step(model, sgd, cfg.adjust_winograd);
      loss_sum += r.loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) correct += r.predictions[i] == labels[i];
    }
    model.clear_state();
    const double secs =
        cfg.record_wall_time ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() : 0.0;
    rows.push_back({epoch, "train", loss_sum / static_cast<double>(n), static_cast<double>(correct) / n,
                    sgd.learning_rate, secs});
    if (on_epoch) on_epoch(rows.back());
    if (eval_set) {
      const EvalResult e = evaluate(model, *eval_set);
      rows.push_back({epoch, "eval", e.loss, e.top1, sgd.learning_rate, secs});
      if (on_epoch) on_epoch(rows.back());
    }
  }
  return rows;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,split,loss,top1,learning_rate,wall_seconds\n";
  for (const auto& r : rows)
    out << fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.6f}\n", r.epoch, r.split, r.loss, r.top1, r.learning_rate,
                       r.wall_seconds);
}

}  // namespace swp::nn
