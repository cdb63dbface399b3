#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "swp/data.hpp"
#include "swp/nn.hpp"

namespace swp::nn {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 64;
  SgdConfig sgd;
  bool cosine = true;  // per-step cosine decay from sgd.learning_rate to 0
  bool augment = false;
  bool adjust_winograd = false;
  bool record_wall_time = true;  // false writes 0 so logs are reproducible

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double top1 = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double top1 = 0.0;
};

// Inference-mode loss and top-1 accuracy over the whole dataset.
EvalResult evaluate(Model& model, const data::Dataset& ds, int batch_size = 250);

// Mini-batch SGD over shuffled epochs. Appends one "train" row per epoch and,
// when eval is given, one "eval" row. Throws DivergenceError on a non-finite loss.
std::vector<EpochLog> train(Model& model, const data::Dataset& train_set, const data::Dataset* eval_set,
                            const TrainConfig& cfg, std::mt19937_64& rng,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

// Columns: epoch,split,loss,top1,learning_rate,wall_seconds
void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& rows);

}  // namespace swp::nn
