#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "swp/data.hpp"
#include "swp/error.hpp"
#include "swp/nn.hpp"
#include "swp/train.hpp"
#include "test_support.hpp"

namespace swp::nn {
namespace {

// sum(layer(x) .* probe) in double.
double probe_loss(Layer& layer, const Tensor& x, const Tensor& probe) {
  return test::weighted_sum(layer.forward(x, true), probe);
}

// Checks every input entry (or `samples` random ones) and up to `samples`
// entries of each trainable parameter against central differences.
void check_layer_gradients(Layer& layer, Tensor x, double eps, double tol, std::mt19937_64& rng, int samples = 50) {
  const Tensor y = layer.forward(x, true);
  const Tensor probe = test::random_tensor(y.shape(), rng);
  for (Param* p : layer.params()) p->grad.fill(0.0f);
  layer.forward(x, true);
  const Tensor dx = layer.backward(probe);
  std::vector<Tensor> grads;
  for (Param* p : layer.params()) grads.push_back(p->grad);

  const auto pick = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(n, samples));
    return idx;
  };
  const auto f = [&] { return probe_loss(layer, x, probe); };
  for (std::size_t k : pick(x.size())) {
    const double numeric = test::central_difference(x, k, eps, f);
    EXPECT_LE(test::grad_rel_error(dx[k], numeric, 1e-2), tol) << to_string(layer.kind()) << " input " << k;
  }
  auto params = layer.params();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (!params[pi]->trainable) continue;
    for (std::size_t k : pick(params[pi]->value.size())) {
      const double numeric = test::central_difference(params[pi]->value, k, eps, f);
      EXPECT_LE(test::grad_rel_error(grads[pi][k], numeric, 1e-2), tol)
          << to_string(layer.kind()) << " " << params[pi]->name << " " << k;
    }
  }
}

void randomize(Param& p, std::mt19937_64& rng, float scale = 0.5f) {
  std::uniform_real_distribution<float> d(-scale, scale);
  for (auto& v : p.value.values()) v = d(rng);
}

TEST(BuildModel, TopologyRoundTrip) {
  const Model m = build_model("conv8,bn,relu,pool,wconv8,relu,flatten,dense10", {3, 8, 8}, 1);
  EXPECT_EQ(m.topology(), "conv8,bn,relu,pool,wconv8,relu,flatten,dense10,softmax");
  EXPECT_EQ(m.num_classes(), 10);
  EXPECT_EQ(m.conv_layers(), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(build_model(m.topology(), {3, 8, 8}, 1).topology(), m.topology());
  EXPECT_EQ(build_model("conv4k5p2,flatten,dense2", {1, 6, 6}, 1).topology(), "conv4k5p2,flatten,dense2,softmax");
}

TEST(BuildModel, RejectsBadTopologies) {
  EXPECT_THROW(build_model("conv8,frobnicate", {3, 8, 8}, 1), ConfigError);
  EXPECT_THROW(build_model("conv8,dense10", {3, 8, 8}, 1), ConfigError);
  EXPECT_THROW(build_model("flatten,dense10,conv8", {3, 8, 8}, 1), ConfigError);
  EXPECT_THROW(build_model("conv8,pool,pool,pool,pool,flatten,dense2", {3, 8, 8}, 1), ConfigError);
  EXPECT_THROW(build_model("conv8", {3, 8, 8}, 1), ConfigError);
}

TEST(Model, ValidateDetectsBrokenChain) {
  Model m({3, 8, 8});
  m.add(std::make_unique<SpatialConv>(4, 8, 3, 1));
  m.add(std::make_unique<Flatten>());
  m.add(std::make_unique<Dense>(8 * 8 * 8, 2));
  m.add(std::make_unique<SoftmaxCrossEntropy>());
  EXPECT_THROW(m.validate(), ShapeError);
  Model no_loss({4});
  EXPECT_THROW(no_loss.validate(), ShapeError);
}

TEST(Model, CopyIsDeep) {
  Model a = build_model("conv4,flatten,dense3", {1, 4, 4}, 3);
  Model b = a;
  static_cast<SpatialConv&>(b.layer(0)).weight().value[0] += 1.0f;
  EXPECT_NE(static_cast<SpatialConv&>(a.layer(0)).weight().value, static_cast<SpatialConv&>(b.layer(0)).weight().value);
}

// The loss of an untrained model is a random quantity over the init draw;
// its mean over init seeds sits near the uniform-logit value.
TEST(Forward, UntrainedLossNearUniform) {
  std::mt19937_64 rng(1);
  const Tensor x = test::random_tensor({64, 3, 16, 16}, rng);
  std::vector<int> labels(64);
  for (int i = 0; i < 64; ++i) labels[i] = i % 10;
  double total = 0.0;
  const int seeds = 8;
  for (int seed = 0; seed < seeds; ++seed) {
    Model m = build_model("conv16,bn,relu,pool,conv16,bn,relu,pool,flatten,dense10", {3, 16, 16}, 100 + seed);
    const ForwardResult r = forward(m, x, labels, true);
    EXPECT_EQ(r.predictions.size(), 64u);
    total += r.loss;
  }
  EXPECT_NEAR(total / seeds, std::log(10.0), 0.3);
}

TEST(Forward, RejectsMismatchedBatch) {
  Model m = build_model("conv4,flatten,dense3", {1, 4, 4}, 3);
  const std::vector<int> labels{0, 1};
  EXPECT_THROW(forward(m, Tensor({2, 2, 4, 4}), labels, false), ShapeError);
  EXPECT_THROW(forward(m, Tensor({3, 1, 4, 4}), labels, false), ShapeError);
}

TEST(Forward, SpatialConvMatchesDirect) {
  std::mt19937_64 rng(2);
  SpatialConv conv(3, 5, 3, 1);
  randomize(conv.weight(), rng);
  const Tensor x = test::random_tensor({2, 3, 9, 7}, rng);
  EXPECT_LE(test::relative_error(conv.forward(x, false), direct_conv2d(x, conv.weight().value, 1)), 1e-6);
}

TEST(Forward, WinogradTwinMatchesSpatialLoss) {
  std::mt19937_64 rng(3);
  Model spatial = build_model("conv8,bn,relu,pool,conv8,bn,relu,flatten,dense10", {3, 12, 12}, 11);
  Model wino = spatial;
  auto ts = shared_transforms(WinogradInstance::with_default_points(6, 3));
  for (std::size_t i : wino.conv_layers()) {
    const auto& conv = static_cast<const SpatialConv&>(wino.layer(i));
    wino.replace(i, std::make_unique<WinogradConv>(WinogradConvLayer::from_spatial(conv.weight().value, *ts, 1), ts));
  }
  const Tensor x = test::random_tensor({16, 3, 12, 12}, rng);
  std::vector<int> labels(16);
  for (int i = 0; i < 16; ++i) labels[i] = (i * 7) % 10;
  for (bool training : {false, true}) {
    const double a = forward(spatial, x, labels, training).loss;
    const double b = forward(wino, x, labels, training).loss;
    EXPECT_LE(std::abs(a - b) / std::abs(a), 1e-4);
  }
}

TEST(Backward, RequiresTrainingForward) {
  Model m = build_model("conv4,relu,flatten,dense3", {1, 4, 4}, 3);
  EXPECT_THROW(backward(m), Error);
  const std::vector<int> labels{0};
  forward(m, Tensor({1, 1, 4, 4}), labels, false);
  EXPECT_THROW(backward(m), Error);
  forward(m, Tensor({1, 1, 4, 4}), labels, true);
  EXPECT_NO_THROW(backward(m));
}

TEST(Backward, SaturatedSoftmaxHasNearZeroGradient) {
  SoftmaxCrossEntropy loss;
  Tensor logits({3, 4});
  const std::vector<int> labels{2, 0, 3};
  for (int b = 0; b < 3; ++b) logits[b * 4 + labels[b]] = 60.0f;
  loss.set_labels(labels);
  EXPECT_LT(loss.forward(logits, true)[0], 1e-6);
  const Tensor dx = loss.backward(Tensor());
  for (float g : dx.values()) EXPECT_LT(std::abs(g), 1e-6);
}

TEST(GradientCheck, SpatialConv) {
  std::mt19937_64 rng(10);
  SpatialConv conv(2, 3, 3, 1);
  randomize(conv.weight(), rng);
  check_layer_gradients(conv, test::random_tensor({2, 2, 6, 5}, rng), 1e-2, 1e-2, rng);
}

TEST(GradientCheck, WinogradConv) {
  std::mt19937_64 rng(11);
  for (int m : {4, 6}) {
    auto ts = shared_transforms(WinogradInstance::with_default_points(m, 3));
    WinogradConv conv({test::random_tensor({3, 2, m, m}, rng, -0.3f, 0.3f), Tensor({3, 2, m, m}, 1.0f), ts->instance(), 1},
                      ts);
    check_layer_gradients(conv, test::random_tensor({2, 2, 7, 6}, rng), 1e-2, 1e-2, rng);
    check_layer_gradients(conv, test::random_tensor({3, 2, 3, 3}, rng), 1e-2, 1e-2, rng);
  }
}

TEST(GradientCheck, ReLU) {
  std::mt19937_64 rng(12);
  Tensor x = test::random_tensor({2, 3, 4, 4}, rng);
  for (auto& v : x.values()) v = v < 0 ? v - 0.1f : v + 0.1f;
  ReLU relu;
  check_layer_gradients(relu, x, 1e-3, 1e-2, rng);
}

TEST(GradientCheck, MaxPool2) {
  std::mt19937_64 rng(13);
  Tensor x({2, 2, 5, 6});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.05f * static_cast<float>(i);
  std::shuffle(x.values().begin(), x.values().end(), rng);
  MaxPool2 pool;
  check_layer_gradients(pool, x, 1e-3, 1e-2, rng);
}

TEST(GradientCheck, BatchNorm) {
  std::mt19937_64 rng(14);
  BatchNorm bn4(3);
  for (Param* p : bn4.params())
    if (p->trainable) randomize(*p, rng, 1.0f);
  check_layer_gradients(bn4, test::random_tensor({4, 3, 3, 3}, rng), 1e-2, 1e-2, rng);
  BatchNorm bn2(5);
  check_layer_gradients(bn2, test::random_tensor({6, 5}, rng), 1e-2, 1e-2, rng);
}

TEST(GradientCheck, Flatten) {
  std::mt19937_64 rng(15);
  Flatten flat;
  check_layer_gradients(flat, test::random_tensor({2, 3, 2, 2}, rng), 1e-2, 1e-2, rng);
}

TEST(GradientCheck, Dense) {
  std::mt19937_64 rng(16);
  Dense dense(7, 4);
  for (Param* p : dense.params()) randomize(*p, rng);
  check_layer_gradients(dense, test::random_tensor({3, 7}, rng), 1e-2, 1e-2, rng);
}

TEST(GradientCheck, SoftmaxCrossEntropy) {
  std::mt19937_64 rng(17);
  SoftmaxCrossEntropy loss;
  const std::vector<int> labels{1, 0, 4};
  loss.set_labels(labels);
  Tensor logits = test::random_tensor({3, 5}, rng, -2.0f, 2.0f);
  loss.forward(logits, true);
  const Tensor dx = loss.backward(Tensor());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double numeric = test::central_difference(logits, k, 1e-2, [&] { return loss.forward(logits, false)[0]; });
    EXPECT_LE(test::grad_rel_error(dx[k], numeric, 1e-2), 1e-2) << k;
  }
}

// ReLU and pooling are excluded here so no perturbation crosses a kink; both
// are checked on their own above.
TEST(GradientCheck, WholeModel) {
  std::mt19937_64 rng(18);
  Model m = build_model("conv4,bn,wconv4,bn,flatten,dense3", {2, 6, 6}, 5);
  const Tensor x = test::random_tensor({16, 2, 6, 6}, rng);
  std::vector<int> labels(16);
  for (int i = 0; i < 16; ++i) labels[i] = (i * 7) % 3;
  zero_grad(m);
  forward(m, x, labels, true);
  backward(m);
  const auto f = [&] { return forward(m, x, labels, true).loss; };
  std::vector<std::pair<Param*, Tensor>> snapshot;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (Param* p : m.layer(i).params())
      if (p->trainable) snapshot.emplace_back(p, p->grad);
  // Errors are measured against the largest gradient entry of each tensor.
  for (auto& [p, grad] : snapshot) {
    double scale = 1e-2;
    for (float g : grad.values()) scale = std::max(scale, 0.1 * std::fabs(g));
    for (std::size_t k = 0; k < p->value.size(); k += std::max<std::size_t>(1, p->value.size() / 20)) {
      const double numeric = test::richardson_difference(p->value, k, 4e-3, f);
      EXPECT_LE(test::grad_rel_error(grad[k], numeric, scale), 1e-2) << p->name << " " << k;
    }
  }
}

Model tiny_winograd_model() {
  auto ts = shared_transforms(WinogradInstance::with_default_points(4, 3));
  Model m({1, 4, 4});
  m.add(std::make_unique<WinogradConv>(WinogradConvLayer{Tensor({1, 1, 4, 4}, 0.5f), Tensor({1, 1, 4, 4}, 1.0f),
                                                         ts->instance(), 1},
                                       ts));
  m.add(std::make_unique<Flatten>());
  m.add(std::make_unique<Dense>(16, 2));
  m.add(std::make_unique<SoftmaxCrossEntropy>());
  m.validate();
  return m;
}

TEST(SgdStep, AdjustedUpdateMagnitude) {
  Model m = tiny_winograd_model();
  Param& q = static_cast<WinogradConv&>(m.layer(0)).q();
  zero_grad(m);
  q.grad[1 * 4 + 1] = 3.0f;  // F(1,1) = 4 for F(2,3)
  const SgdConfig cfg{1.0, 0.0, 0.0, 1.5};
  sgd_step(m, cfg, true);
  EXPECT_EQ(0.5f - q.value[5], 0.375f);
  EXPECT_EQ(q.value[0], 0.5f);
}

TEST(SgdStep, AlphaZeroEqualsPlainStep) {
  std::mt19937_64 rng(20);
  Model a = tiny_winograd_model(), b = tiny_winograd_model();
  Param& qa = static_cast<WinogradConv&>(a.layer(0)).q();
  Param& qb = static_cast<WinogradConv&>(b.layer(0)).q();
  qa.grad = test::random_tensor(qa.grad.shape(), rng);
  qb.grad = qa.grad;
  sgd_step(a, {0.1, 0.9, 5e-4, 0.0}, true);
  sgd_step(b, {0.1, 0.9, 5e-4, 1.5}, false);
  EXPECT_EQ(qa.value, qb.value);
}

TEST(SgdStep, AdjustmentPreservesSign) {
  std::mt19937_64 rng(21);
  Model a = tiny_winograd_model();
  Param& q = static_cast<WinogradConv&>(a.layer(0)).q();
  q.value.fill(0.0f);
  q.grad = test::random_tensor(q.grad.shape(), rng);
  const Tensor g = q.grad;
  sgd_step(a, {1.0, 0.0, 0.0, 1.5}, true);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(std::signbit(-q.value[i]), std::signbit(g[i])) << i;
}

TEST(SgdStep, MaskedEntriesStayZero) {
  std::mt19937_64 rng(22);
  Model m = build_model("conv4,relu,wconv4,relu,flatten,dense3", {2, 6, 6}, 9);
  auto& conv = static_cast<SpatialConv&>(m.layer(0));
  auto& wconv = static_cast<WinogradConv&>(m.layer(2));
  std::bernoulli_distribution keep(0.5);
  for (Param* p : {&conv.weight(), &wconv.q()}) {
    for (auto& v : p->mask.values()) v = keep(rng) ? 1.0f : 0.0f;
    p->apply_mask();
  }
  const Tensor x = test::random_tensor({8, 2, 6, 6}, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  for (int step = 0; step < 5; ++step) {
    zero_grad(m);
    forward(m, x, labels, true);
    backward(m);
    bool masked_grad_nonzero = false;
    for (std::size_t i = 0; i < wconv.q().value.size(); ++i)
      masked_grad_nonzero |= wconv.q().mask[i] == 0.0f && wconv.q().grad[i] != 0.0f;
    EXPECT_TRUE(masked_grad_nonzero);
    sgd_step(m, {0.05, 0.9, 5e-4, 1.5}, step % 2 == 0);
    for (Param* p : {&conv.weight(), &wconv.q()})
      for (std::size_t i = 0; i < p->value.size(); ++i)
        if (p->mask[i] == 0.0f) ASSERT_EQ(p->value[i], 0.0f);
  }
}

TEST(SgdStep, ConfigValidation) {
  EXPECT_THROW((SgdConfig{0.0, 0.9, 0.0, 1.5}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1, 1.0, 0.0, 1.5}.validate()), ConfigError);
  EXPECT_THROW((SgdConfig{0.1, 0.9, -1.0, 1.5}.validate()), ConfigError);
  EXPECT_NO_THROW((SgdConfig{0.1, 0.0, 0.0, 0.0}.validate()));
}

TEST(BatchNorm, RunningStatistics) {
  BatchNorm bn(1);
  Tensor x({4, 1}, std::vector<float>{1, 2, 3, 6});
  bn.forward(x, true);
  const auto params = bn.params();
  EXPECT_NEAR(params[2]->value[0], 0.1 * 3.0, 1e-6);
  EXPECT_NEAR(params[3]->value[0], 0.9 + 0.1 * (14.0 / 3.0), 1e-6);
  const Tensor y = bn.forward(x, false);
  EXPECT_NEAR(y[0], (1.0 - 0.3) / std::sqrt(params[3]->value[0] + 1e-5), 1e-5);
}

TEST(Training, DeterministicUnderFixedSeed) {
  const data::Dataset ds = data::synthetic_dataset(5, 3, 96, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.augment = true;
  cfg.record_wall_time = false;
  std::vector<Model> models;
  std::vector<std::vector<EpochLog>> logs;
  for (int run = 0; run < 2; ++run) {
    models.push_back(build_model("conv4,bn,relu,pool,flatten,dense3", {3, 8, 8}, 42));
    std::mt19937_64 rng(42);
    logs.push_back(train(models.back(), ds, &ds, cfg, rng));
  }
  for (std::size_t i = 0; i < models[0].size(); ++i) {
    const auto pa = models[0].layer(i).params();
    const auto pb = models[1].layer(i).params();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k]->value, pb[k]->value);
  }
  ASSERT_EQ(logs[0].size(), 4u);
  for (std::size_t r = 0; r < logs[0].size(); ++r) {
    EXPECT_EQ(logs[0][r].loss, logs[1][r].loss);
    EXPECT_EQ(logs[0][r].wall_seconds, 0.0);
  }
}

TEST(Training, DivergenceIsReported) {
  const data::Dataset ds = data::synthetic_dataset(5, 3, 32, 8);
  Model m = build_model("conv4,relu,flatten,dense3", {3, 8, 8}, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.cosine = false;
  cfg.sgd = {1e6, 0.9, 0.0, 1.5};
  std::mt19937_64 rng(1);
  EXPECT_THROW(train(m, ds, nullptr, cfg, rng), DivergenceError);
}

}  // namespace
}  // namespace swp::nn
