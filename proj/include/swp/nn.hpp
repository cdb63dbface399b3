#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swp/conv.hpp"
#include "swp/tensor.hpp"
#include "swp/transforms.hpp"

namespace swp::nn {

enum class LayerKind { SpatialConv, WinogradConv, ReLU, MaxPool2, BatchNorm, Flatten, Dense, SoftmaxCrossEntropy };

std::string to_string(LayerKind kind);

// Matches the checkpoint domain flag.
enum class Domain : std::uint8_t { spatial = 0, winograd = 1, mask = 2, other = 3 };

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;
  Tensor mask;  // empty when the parameter is not prunable
  Domain domain = Domain::other;
  bool trainable = true;
  bool decay = false;

  bool masked() const noexcept { return !mask.empty(); }
  void apply_mask();
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  // Topology token, e.g. "conv32" or "pool".
  virtual std::string describe() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  // Accumulates parameter gradients and returns the input gradient.
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void clear_state() {}

  std::vector<const Param*> params() const;
};

class SpatialConv final : public Layer {
 public:
  SpatialConv(int in_ch, int out_ch, int kernel, int pad);
  LayerKind kind() const override { return LayerKind::SpatialConv; }
  std::string describe() const override;
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&weight_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SpatialConv>(*this); }
  void clear_state() override { input_ = Tensor(); }

  Param& weight() noexcept { return weight_; }
  const Param& weight() const noexcept { return weight_; }
  int pad() const noexcept { return pad_; }
  int kernel() const noexcept { return weight_.value.dim(2); }

 private:
  Param weight_;  // [out][in][n][n], mask = spatial mask
  int pad_;
  Tensor input_;
};

class WinogradConv final : public Layer {
 public:
  WinogradConv(WinogradConvLayer layer, std::shared_ptr<const TransformSet> ts);
  LayerKind kind() const override { return LayerKind::WinogradConv; }
  std::string describe() const override;
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&q_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<WinogradConv>(*this); }
  void clear_state() override { cached_ = winograd::TransformedInput(); }

  Param& q() noexcept { return q_; }
  const Param& q() const noexcept { return q_; }
  int pad() const noexcept { return pad_; }
  const TransformSet& transforms() const noexcept { return *ts_; }
  std::shared_ptr<const TransformSet> shared_transforms() const noexcept { return ts_; }
  WinogradConvLayer layer() const;

 private:
  Param q_;  // [out][in][m][m], mask = Winograd mask
  int pad_;
  std::shared_ptr<const TransformSet> ts_;
  winograd::TransformedInput cached_;
};

class ReLU final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::ReLU; }
  std::string describe() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
  void clear_state() override { output_ = Tensor(); }

 private:
  Tensor output_;
};

// 2x2 max pooling, stride 2, floor on odd sizes.
class MaxPool2 final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::MaxPool2; }
  std::string describe() const override { return "pool"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2>(*this); }
  void clear_state() override { argmax_.clear(); }

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

// Per-channel normalization over batch and spatial axes; rank 2 or 4 input.
class BatchNorm final : public Layer {
 public:
  static constexpr float kMomentum = 0.9f;
  static constexpr float kEps = 1e-5f;

  explicit BatchNorm(int channels);
  LayerKind kind() const override { return LayerKind::BatchNorm; }
  std::string describe() const override { return "bn"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }
  void clear_state() override;

 private:
  Param gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool have_state_ = false;
};

class Flatten final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::Flatten; }
  std::string describe() const override { return "flatten"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
  void clear_state() override { input_shape_.clear(); }

 private:
  Shape input_shape_;
};

class Dense final : public Layer {
 public:
  Dense(int in_features, int out_features);
  LayerKind kind() const override { return LayerKind::Dense; }
  std::string describe() const override;
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::vector<Param*> params() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }
  void clear_state() override { input_ = Tensor(); }

  Param& weight() noexcept { return weight_; }

 private:
  Param weight_;  // [out][in]
  Param bias_;
  Tensor input_;
};

// Mean softmax cross-entropy over the batch. forward returns a one-element
// tensor holding the loss; backward ignores dy and returns d loss / d logits.
class SoftmaxCrossEntropy final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::SoftmaxCrossEntropy; }
  std::string describe() const override { return "softmax"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SoftmaxCrossEntropy>(*this); }
  void clear_state() override { probs_ = Tensor(); }

  void set_labels(std::span<const int> labels) { labels_.assign(labels.begin(), labels.end()); }
  const Tensor& probabilities() const noexcept { return probs_; }
  // Unrounded mean loss of the latest forward call.
  double last_loss() const noexcept { return last_loss_; }

 private:
  std::vector<int> labels_;
  double last_loss_ = 0.0;
  Tensor probs_;
};

class Model {
 public:
  Model() = default;
  explicit Model(Shape input_shape) : input_shape_(std::move(input_shape)) {}
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  void replace(std::size_t index, std::unique_ptr<Layer> layer) { layers_.at(index) = std::move(layer); }

  // Per-sample input shape, e.g. {3, 32, 32}.
  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t size() const noexcept { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  // Throws ShapeError unless shapes chain and the last layer is the only loss layer.
  void validate() const;
  std::string topology() const;
  std::vector<std::size_t> conv_layers() const;
  int num_classes() const;
  void clear_state();

 private:
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Comma-separated tokens: convN (3x3, pad 1), wconvN, relu, pool, bn, flatten,
// denseN, softmax. A trailing softmax is appended when missing. Winograd
// layers use `instance`. Conv weights are Kaiming-normal with fan-in scaling,
// dense weights uniform in +-1/sqrt(fan_in).
Model build_model(const std::string& topology, const Shape& input_shape, std::uint64_t seed,
                  const WinogradInstance& instance = WinogradInstance::with_default_points(6, 3));

struct ForwardResult {
  double loss = 0.0;
  std::vector<int> predictions;
  Tensor logits;
};

// Runs every layer. In training mode the state needed by backward is kept.
ForwardResult forward(Model& model, const Tensor& batch, std::span<const int> labels, bool training);
// Inference without labels; returns logits.
Tensor predict(Model& model, const Tensor& batch);
// Accumulates into Param::grad. Throws swp::Error when no training forward preceded it.
void backward(Model& model);
void zero_grad(Model& model);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double adjust_alpha = 1.5;

  // Throws ConfigError outside the allowed ranges.
  void validate() const;
};

// Per Winograd parameter: g <- (grad + wd * q) / F^alpha when adjust is set,
// v <- momentum * v + g, q <- (q - lr * v) .* mask. Spatial and dense layers
// take the same step without the division.
void sgd_step(Model& model, const SgdConfig& cfg, bool adjust_winograd);

}  // namespace swp::nn
