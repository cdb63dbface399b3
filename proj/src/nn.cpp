#include "swp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <regex>

#include "swp/error.hpp"
#include "swp/gemm.hpp"

namespace swp::nn {
namespace {

void require_state(bool ok, const char* layer) {
  if (!ok) throw Error(std::string(layer) + ": backward called without a training forward pass");
}

Param make_param(std::string name, Shape shape, Domain domain, bool decay) {
  Param p;
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  p.velocity = Tensor(shape);
  p.domain = domain;
  p.decay = decay;
  return p;
}

std::string conv_token(const char* prefix, int out, int kernel, int pad) {
  std::string s = prefix + std::to_string(out);
  if (kernel != 3 || pad != 1) s += "k" + std::to_string(kernel) + "p" + std::to_string(pad);
  return s;
}

// [C][H][W] -> [C*k*k][Ho*Wo]
void im2col(const float* x, int C, int H, int W, int k, int pad, int Ho, int Wo, float* cols) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        float* row = cols + static_cast<std::size_t>((c * k + u) * k + v) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
          const int iy = i + u - pad;
          float* out = row + static_cast<std::size_t>(i) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill_n(out, Wo, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int j = 0; j < Wo; ++j) {
            const int ix = j + v - pad;
            out[j] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
          }
        }
      }
}

void col2im(const float* cols, int C, int H, int W, int k, int pad, int Ho, int Wo, float* x) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        const float* row = cols + static_cast<std::size_t>((c * k + u) * k + v) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
          const int iy = i + u - pad;
          if (iy < 0 || iy >= H) continue;
          float* dst = x + (static_cast<std::size_t>(c) * H + iy) * W;
          const float* in = row + static_cast<std::size_t>(i) * Wo;
          for (int j = 0; j < Wo; ++j) {
            const int ix = j + v - pad;
            if (ix >= 0 && ix < W) dst[ix] += in[j];
          }
        }
      }
}

void require_rank(const Shape& s, int rank, const char* layer) {
  if (static_cast<int>(s.size()) != rank)
    throw ShapeError(std::string(layer) + ": expected rank " + std::to_string(rank) + " input, got " +
                     shape_to_string(s));
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::SpatialConv: return "SpatialConv";
    case LayerKind::WinogradConv: return "WinogradConv";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2: return "MaxPool2";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Dense: return "Dense";
    case LayerKind::SoftmaxCrossEntropy: return "SoftmaxCrossEntropy";
  }
  return "?";
}

void Param::apply_mask() {
  if (!masked()) return;
  for (std::size_t i = 0; i < value.size(); ++i)
    if (mask[i] == 0.0f) {
      value[i] = 0.0f;
      velocity[i] = 0.0f;
    }
}

std::vector<const Param*> Layer::params() const {
  auto ps = const_cast<Layer*>(this)->params();
  return {ps.begin(), ps.end()};
}

// SpatialConv

SpatialConv::SpatialConv(int in_ch, int out_ch, int kernel, int pad)
    : weight_(make_param("weight", {out_ch, in_ch, kernel, kernel}, Domain::spatial, true)), pad_(pad) {
  weight_.mask = Tensor(weight_.value.shape(), 1.0f);
}

std::string SpatialConv::describe() const { return conv_token("conv", weight_.value.dim(0), kernel(), pad_); }

Shape SpatialConv::output_shape(const Shape& in) const {
  require_rank(in, 4, "SpatialConv");
  if (in[1] != weight_.value.dim(1))
    throw ShapeError("SpatialConv: input has " + std::to_string(in[1]) + " channels, weights expect " +
                     std::to_string(weight_.value.dim(1)));
  const int ho = in[2] + 2 * pad_ - kernel() + 1, wo = in[3] + 2 * pad_ - kernel() + 1;
  if (ho < 1 || wo < 1) throw ShapeError("SpatialConv: input " + shape_to_string(in) + " smaller than kernel");
  return {in[0], weight_.value.dim(0), ho, wo};
}

Tensor SpatialConv::forward(const Tensor& x, bool training) {
  const Shape os = output_shape(x.shape());
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = os[1], Ho = os[2], Wo = os[3];
  const int k = kernel(), K = C * k * k, P = Ho * Wo;
  Tensor y(os);
  std::vector<float> cols(static_cast<std::size_t>(K) * P);
  for (int b = 0; b < B; ++b) {
    im2col(x.data() + static_cast<std::size_t>(b) * C * H * W, C, H, W, k, pad_, Ho, Wo, cols.data());
    sgemm(false, false, O, P, K, 1.0f, weight_.value.data(), K, cols.data(), P, 0.0f,
          y.data() + static_cast<std::size_t>(b) * O * P, P);
  }
  if (training) input_ = x;
  return y;
}

Tensor SpatialConv::backward(const Tensor& dy) {
  require_state(!input_.empty(), "SpatialConv");
  const int B = input_.dim(0), C = input_.dim(1), H = input_.dim(2), W = input_.dim(3);
  const int O = dy.dim(1), Ho = dy.dim(2), Wo = dy.dim(3), k = kernel(), K = C * k * k, P = Ho * Wo;
  Tensor dx(input_.shape());
  std::vector<float> cols(static_cast<std::size_t>(K) * P), dcols(cols.size());
  for (int b = 0; b < B; ++b) {
    const float* dyb = dy.data() + static_cast<std::size_t>(b) * O * P;
    im2col(input_.data() + static_cast<std::size_t>(b) * C * H * W, C, H, W, k, pad_, Ho, Wo, cols.data());
    sgemm(false, true, O, K, P, 1.0f, dyb, P, cols.data(), P, 1.0f, weight_.grad.data(), K);
    sgemm(true, false, K, P, O, 1.0f, weight_.value.data(), K, dyb, P, 0.0f, dcols.data(), P);
    col2im(dcols.data(), C, H, W, k, pad_, Ho, Wo, dx.data() + static_cast<std::size_t>(b) * C * H * W);
  }
  return dx;
}

// WinogradConv

WinogradConv::WinogradConv(WinogradConvLayer layer, std::shared_ptr<const TransformSet> ts)
    : pad_(layer.pad), ts_(std::move(ts)) {
  if (!(layer.instance == ts_->instance())) throw ShapeError("WinogradConv: layer instance differs from transforms");
  if (layer.q.rank() != 4 || layer.q.dim(2) != ts_->m() || layer.q.dim(3) != ts_->m())
    throw ShapeError("WinogradConv: q must be [out][in][m][m], got " + shape_to_string(layer.q.shape()));
  require_same_shape(layer.q, layer.mask, "WinogradConv mask");
  q_ = make_param("q", layer.q.shape(), Domain::winograd, true);
  q_.value = std::move(layer.q);
  q_.mask = std::move(layer.mask);
}

std::string WinogradConv::describe() const { return conv_token("wconv", q_.value.dim(0), ts_->n(), pad_); }

WinogradConvLayer WinogradConv::layer() const { return {q_.value, q_.mask, ts_->instance(), pad_}; }

Shape WinogradConv::output_shape(const Shape& in) const {
  require_rank(in, 4, "WinogradConv");
  if (in[1] != q_.value.dim(1))
    throw ShapeError("WinogradConv: input has " + std::to_string(in[1]) + " channels, weights expect " +
                     std::to_string(q_.value.dim(1)));
  const int ho = in[2] + 2 * pad_ - ts_->n() + 1, wo = in[3] + 2 * pad_ - ts_->n() + 1;
  if (ho < 1 || wo < 1) throw ShapeError("WinogradConv: input " + shape_to_string(in) + " smaller than kernel");
  return {in[0], q_.value.dim(0), ho, wo};
}

Tensor WinogradConv::forward(const Tensor& x, bool training) {
  output_shape(x.shape());
  winograd::TransformedInput in = winograd::transform_input(x, *ts_, pad_);
  Tensor y = winograd::forward(in, q_.value, *ts_);
  if (training) cached_ = std::move(in);
  return y;
}

Tensor WinogradConv::backward(const Tensor& dy) {
  require_state(!cached_.v.empty(), "WinogradConv");
  const int O = q_.value.dim(0);
  const std::vector<float> d_m = winograd::transform_output_grad(dy, cached_.geometry, *ts_);
  const Tensor dq = winograd::weight_grad(d_m, O, cached_, *ts_);
  for (std::size_t i = 0; i < dq.size(); ++i) q_.grad[i] += dq[i];
  return winograd::input_grad(d_m, O, q_.value, cached_.geometry, *ts_);
}

// ReLU

Tensor ReLU::forward(const Tensor& x, bool training) {
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0f ? v : 0.0f;
  if (training) output_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  require_state(!output_.empty(), "ReLU");
  require_same_shape(dy, output_, "ReLU backward");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = output_[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

// MaxPool2

Shape MaxPool2::output_shape(const Shape& in) const {
  require_rank(in, 4, "MaxPool2");
  if (in[2] < 2 || in[3] < 2) throw ShapeError("MaxPool2: input " + shape_to_string(in) + " smaller than 2x2");
  return {in[0], in[1], in[2] / 2, in[3] / 2};
}

Tensor MaxPool2::forward(const Tensor& x, bool training) {
  const Shape os = output_shape(x.shape());
  const int H = x.dim(2), W = x.dim(3), Ho = os[2], Wo = os[3];
  Tensor y(os);
  std::vector<std::uint32_t> arg(y.size());
  std::size_t o = 0;
  for (int bc = 0; bc < os[0] * os[1]; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * H * W;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * i) * W + 2 * j;
        for (std::size_t cand : {best + 1, best + W, best + W + 1})
          if (x[cand] > x[best]) best = cand;
        y[o] = x[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  }
  if (training) {
    input_shape_ = x.shape();
    argmax_ = std::move(arg);
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& dy) {
  require_state(!argmax_.empty(), "MaxPool2");
  if (dy.size() != argmax_.size()) throw ShapeError("MaxPool2: gradient shape mismatch");
  Tensor dx(input_shape_);
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
  return dx;
}

// BatchNorm

BatchNorm::BatchNorm(int channels)
    : gamma_(make_param("gamma", {channels}, Domain::other, false)),
      beta_(make_param("beta", {channels}, Domain::other, false)),
      running_mean_(make_param("running_mean", {channels}, Domain::other, false)),
      running_var_(make_param("running_var", {channels}, Domain::other, false)) {
  gamma_.value.fill(1.0f);
  running_var_.value.fill(1.0f);
  running_mean_.trainable = false;
  running_var_.trainable = false;
}

Shape BatchNorm::output_shape(const Shape& in) const {
  if (in.size() != 2 && in.size() != 4) throw ShapeError("BatchNorm: expected rank 2 or 4 input, got " + shape_to_string(in));
  if (in[1] != gamma_.value.dim(0))
    throw ShapeError("BatchNorm: input has " + std::to_string(in[1]) + " channels, layer has " +
                     std::to_string(gamma_.value.dim(0)));
  return in;
}

void BatchNorm::clear_state() {
  xhat_ = Tensor();
  inv_std_.clear();
  have_state_ = false;
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  output_shape(x.shape());
  const int B = x.dim(0), C = x.dim(1);
  const int S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t N = static_cast<std::size_t>(B) * S;
  Tensor y(x.shape());
  const auto idx = [&](int b, int c, int s) { return (static_cast<std::size_t>(b) * C + c) * S + s; };
  if (!training) {
    for (int c = 0; c < C; ++c) {
      const float inv = 1.0f / std::sqrt(running_var_.value[c] + kEps);
      const float scale = gamma_.value[c] * inv, shift = beta_.value[c] - running_mean_.value[c] * scale;
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s) y[idx(b, c, s)] = x[idx(b, c, s)] * scale + shift;
    }
    return y;
  }
  xhat_ = Tensor(x.shape());
  inv_std_.assign(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s) sum += x[idx(b, c, s)];
    const double mean = sum / static_cast<double>(N);
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s) {
        const double d = x[idx(b, c, s)] - mean;
        sq += d * d;
      }
    const double var = sq / static_cast<double>(N);
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s) {
        const auto i = idx(b, c, s);
        xhat_[i] = static_cast<float>((x[i] - mean) * inv);
        y[i] = gamma_.value[c] * xhat_[i] + beta_.value[c];
      }
    const double unbiased = N > 1 ? sq / static_cast<double>(N - 1) : var;
    running_mean_.value[c] = static_cast<float>(kMomentum * running_mean_.value[c] + (1.0 - kMomentum) * mean);
    running_var_.value[c] = static_cast<float>(kMomentum * running_var_.value[c] + (1.0 - kMomentum) * unbiased);
  }
  have_state_ = true;
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  require_state(have_state_, "BatchNorm");
  require_same_shape(dy, xhat_, "BatchNorm backward");
  const int B = dy.dim(0), C = dy.dim(1);
  const int S = dy.rank() == 4 ? dy.dim(2) * dy.dim(3) : 1;
  const double N = static_cast<double>(B) * S;
  const auto idx = [&](int b, int c, int s) { return (static_cast<std::size_t>(b) * C + c) * S + s; };
  Tensor dx(dy.shape());
  for (int c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s) {
        const auto i = idx(b, c, s);
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xhat_[i];
      }
    gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
    beta_.grad[c] += static_cast<float>(sum_dy);
    const double k = gamma_.value[c] * inv_std_[c] / N;
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s) {
        const auto i = idx(b, c, s);
        dx[i] = static_cast<float>(k * (N * dy[i] - sum_dy - xhat_[i] * sum_dy_xhat));
      }
  }
  return dx;
}

// Flatten

Shape Flatten::output_shape(const Shape& in) const {
  if (in.size() < 2) throw ShapeError("Flatten: expected a batch dimension, got " + shape_to_string(in));
  int features = 1;
  for (std::size_t i = 1; i < in.size(); ++i) features *= in[i];
  return {in[0], features};
}

Tensor Flatten::forward(const Tensor& x, bool training) {
  Tensor y = x;
  y.reshape(output_shape(x.shape()));
  if (training) input_shape_ = x.shape();
  return y;
}

Tensor Flatten::backward(const Tensor& dy) {
  require_state(!input_shape_.empty(), "Flatten");
  Tensor dx = dy;
  dx.reshape(input_shape_);
  return dx;
}

// Dense

Dense::Dense(int in_features, int out_features)
    : weight_(make_param("weight", {out_features, in_features}, Domain::other, true)),
      bias_(make_param("bias", {out_features}, Domain::other, false)) {}

std::string Dense::describe() const { return "dense" + std::to_string(weight_.value.dim(0)); }

Shape Dense::output_shape(const Shape& in) const {
  require_rank(in, 2, "Dense");
  if (in[1] != weight_.value.dim(1))
    throw ShapeError("Dense: input has " + std::to_string(in[1]) + " features, layer expects " +
                     std::to_string(weight_.value.dim(1)));
  return {in[0], weight_.value.dim(0)};
}

Tensor Dense::forward(const Tensor& x, bool training) {
  const Shape os = output_shape(x.shape());
  const int B = os[0], O = os[1], I = x.dim(1);
  Tensor y(os);
  for (int b = 0; b < B; ++b) std::copy_n(bias_.value.data(), O, y.data() + static_cast<std::size_t>(b) * O);
  sgemm(false, true, B, O, I, 1.0f, x.data(), I, weight_.value.data(), I, 1.0f, y.data(), O);
  if (training) input_ = x;
  return y;
}

Tensor Dense::backward(const Tensor& dy) {
  require_state(!input_.empty(), "Dense");
  const int B = input_.dim(0), I = input_.dim(1), O = weight_.value.dim(0);
  if (dy.shape() != Shape{B, O}) throw ShapeError("Dense: gradient shape mismatch");
  sgemm(true, false, O, I, B, 1.0f, dy.data(), O, input_.data(), I, 1.0f, weight_.grad.data(), I);
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) bias_.grad[o] += dy[static_cast<std::size_t>(b) * O + o];
  Tensor dx(input_.shape());
  sgemm(false, false, B, I, O, 1.0f, dy.data(), O, weight_.value.data(), I, 0.0f, dx.data(), I);
  return dx;
}

// SoftmaxCrossEntropy

Shape SoftmaxCrossEntropy::output_shape(const Shape& in) const {
  require_rank(in, 2, "SoftmaxCrossEntropy");
  return {1};
}

Tensor SoftmaxCrossEntropy::forward(const Tensor& x, bool training) {
  output_shape(x.shape());
  const int B = x.dim(0), K = x.dim(1);
  if (static_cast<int>(labels_.size()) != B)
    throw ShapeError("SoftmaxCrossEntropy: " + std::to_string(labels_.size()) + " labels for batch of " +
                     std::to_string(B));
  Tensor probs(x.shape());
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* row = x.data() + static_cast<std::size_t>(b) * K;
    const int label = labels_[b];
    if (label < 0 || label >= K) throw ShapeError("SoftmaxCrossEntropy: label " + std::to_string(label) + " out of range");
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (int k = 0; k < K; ++k) probs[static_cast<std::size_t>(b) * K + k] = static_cast<float>(std::exp(row[k] - mx) / z);
    loss += std::log(z) - (row[label] - mx);
  }
  if (training) probs_ = std::move(probs);
  last_loss_ = loss / B;
  return Tensor({1}, std::vector<float>{static_cast<float>(last_loss_)});
}

Tensor SoftmaxCrossEntropy::backward(const Tensor&) {
  require_state(!probs_.empty(), "SoftmaxCrossEntropy");
  const int B = probs_.dim(0), K = probs_.dim(1);
  Tensor dx = probs_;
  for (int b = 0; b < B; ++b) {
    dx[static_cast<std::size_t>(b) * K + labels_[b]] -= 1.0f;
    for (int k = 0; k < K; ++k) dx[static_cast<std::size_t>(b) * K + k] /= static_cast<float>(B);
  }
  return dx;
}

// Model

Model::Model(const Model& other) : input_shape_(other.input_shape_) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Model::validate() const {
  if (layers_.empty() || layers_.back()->kind() != LayerKind::SoftmaxCrossEntropy)
    throw ShapeError("model must end with a SoftmaxCrossEntropy layer");
  Shape s{1};
  s.insert(s.end(), input_shape_.begin(), input_shape_.end());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i + 1 < layers_.size() && layers_[i]->kind() == LayerKind::SoftmaxCrossEntropy)
      throw ShapeError("loss layer at position " + std::to_string(i) + " is not last");
    try {
      s = layers_[i]->output_shape(s);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + layers_[i]->describe() + "): " + e.what());
    }
  }
}

std::string Model::topology() const {
  std::string out;
  for (const auto& l : layers_) out += (out.empty() ? "" : ",") + l->describe();
  return out;
}

std::vector<std::size_t> Model::conv_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i]->kind() == LayerKind::SpatialConv || layers_[i]->kind() == LayerKind::WinogradConv) out.push_back(i);
  return out;
}

int Model::num_classes() const {
  Shape s{1};
  s.insert(s.end(), input_shape_.begin(), input_shape_.end());
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) s = layers_[i]->output_shape(s);
  return s.back();
}

void Model::clear_state() {
  for (auto& l : layers_) l->clear_state();
}

Model build_model(const std::string& topology, const Shape& input_shape, std::uint64_t seed,
                  const WinogradInstance& instance) {
  static const std::regex conv_re(R"((w?conv)(\d+)(?:k(\d+)p(\d+))?)");
  static const std::regex dense_re(R"(dense(\d+))");
  std::mt19937_64 rng(seed);
  const auto kaiming = [&](Tensor& t, int fan_in) {
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (auto& v : t.values()) v = dist(rng);
  };

  Model model(input_shape);
  Shape shape{1};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  std::size_t start = 0;
  bool has_loss = false;
  while (start <= topology.size()) {
    const std::size_t comma = std::min(topology.find(',', start), topology.size());
    std::string token = topology.substr(start, comma - start);
    token.erase(std::remove_if(token.begin(), token.end(), ::isspace), token.end());
    start = comma + 1;
    if (token.empty()) {
      if (comma == topology.size()) break;
      throw ConfigError("empty layer token in topology '" + topology + "'");
    }
    if (has_loss) throw ConfigError("layers after softmax in topology '" + topology + "'");
    std::smatch match;
    std::unique_ptr<Layer> layer;
    if (std::regex_match(token, match, conv_re)) {
      if (shape.size() != 4) throw ConfigError("convolution after flatten in topology '" + topology + "'");
      const int out = std::stoi(match[2]);
      const int k = match[3].matched ? std::stoi(match[3]) : 3;
      const int pad = match[4].matched ? std::stoi(match[4]) : 1;
      SpatialConv conv(shape[1], out, k, pad);
      kaiming(conv.weight().value, shape[1] * k * k);
      if (match[1] == "wconv") {
        if (instance.n != k) throw ConfigError("Winograd instance kernel size differs from layer token " + token);
        auto ts = swp::shared_transforms(instance);
        layer = std::make_unique<WinogradConv>(WinogradConvLayer::from_spatial(conv.weight().value, *ts, pad), ts);
      } else {
        layer = std::make_unique<SpatialConv>(std::move(conv));
      }
    } else if (std::regex_match(token, match, dense_re)) {
      if (shape.size() != 2) throw ConfigError("dense layer needs a flatten before it in topology '" + topology + "'");
      auto dense = std::make_unique<Dense>(shape[1], std::stoi(match[1]));
      std::uniform_real_distribution<float> dist(-1.0f / std::sqrt(static_cast<float>(shape[1])),
                                                 1.0f / std::sqrt(static_cast<float>(shape[1])));
      for (auto& v : dense->weight().value.values()) v = dist(rng);
      layer = std::move(dense);
    } else if (token == "relu") {
      layer = std::make_unique<ReLU>();
    } else if (token == "pool") {
      layer = std::make_unique<MaxPool2>();
    } else if (token == "bn") {
      layer = std::make_unique<BatchNorm>(shape[1]);
    } else if (token == "flatten") {
      layer = std::make_unique<Flatten>();
    } else if (token == "softmax") {
      layer = std::make_unique<SoftmaxCrossEntropy>();
      has_loss = true;
    } else {
      throw ConfigError("unknown layer token '" + token + "'");
    }
    try {
      shape = layer->output_shape(shape);
    } catch (const ShapeError& e) {
      throw ConfigError("topology '" + topology + "' at " + token + ": " + e.what());
    }
    model.add(std::move(layer));
  }
  if (!has_loss) {
    if (shape.size() != 2) throw ConfigError("topology '" + topology + "' must end in a dense layer");
    model.add(std::make_unique<SoftmaxCrossEntropy>());
  }
  model.validate();
  return model;
}

namespace {

Tensor run_features(Model& model, const Tensor& batch, bool training) {
  Shape expected{batch.rank() > 0 ? batch.dim(0) : 0};
  expected.insert(expected.end(), model.input_shape().begin(), model.input_shape().end());
  if (batch.shape() != expected)
    throw ShapeError("batch shape " + shape_to_string(batch.shape()) + " does not match model input " +
                     shape_to_string(expected));
  model.clear_state();
  Tensor h = batch;
  for (std::size_t i = 0; i + 1 < model.size(); ++i) h = model.layer(i).forward(h, training);
  return h;
}

}  // namespace

ForwardResult forward(Model& model, const Tensor& batch, std::span<const int> labels, bool training) {
  ForwardResult out;
  out.logits = run_features(model, batch, training);
  auto& loss_layer = dynamic_cast<SoftmaxCrossEntropy&>(model.layer(model.size() - 1));
  loss_layer.set_labels(labels);
  loss_layer.forward(out.logits, training);
  out.loss = loss_layer.last_loss();
  const int B = out.logits.dim(0), K = out.logits.dim(1);
  out.predictions.resize(B);
  for (int b = 0; b < B; ++b) {
    const float* row = out.logits.data() + static_cast<std::size_t>(b) * K;
    out.predictions[b] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

Tensor predict(Model& model, const Tensor& batch) { return run_features(model, batch, false); }

void backward(Model& model) {
  if (model.size() == 0) throw Error("backward on an empty model");
  Tensor g = model.layer(model.size() - 1).backward(Tensor());
  for (std::size_t i = model.size() - 1; i-- > 0;) g = model.layer(i).backward(g);
}

void zero_grad(Model& model) {
  for (std::size_t i = 0; i < model.size(); ++i)
    for (Param* p : model.layer(i).params()) p->grad.fill(0.0f);
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (!std::isfinite(adjust_alpha)) throw ConfigError("adjust_alpha must be finite");
}

void sgd_step(Model& model, const SgdConfig& cfg, bool adjust_winograd) {
  const float lr = static_cast<float>(cfg.learning_rate), mu = static_cast<float>(cfg.momentum);
  const float wd = static_cast<float>(cfg.weight_decay);
  for (std::size_t li = 0; li < model.size(); ++li) {
    Layer& layer = model.layer(li);
    std::vector<float> divisor;
    if (adjust_winograd && layer.kind() == LayerKind::WinogradConv) {
      const ImportanceMatrix& f = static_cast<WinogradConv&>(layer).transforms().F();
      for (double v : f.f) divisor.push_back(static_cast<float>(std::pow(v, cfg.adjust_alpha)));
    }
    for (Param* p : layer.params()) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        float g = p->grad[i];
        if (p->decay) g += wd * p->value[i];
        if (!divisor.empty() && p->domain == Domain::winograd) g /= divisor[i % divisor.size()];
        p->velocity[i] = mu * p->velocity[i] + g;
        p->value[i] -= lr * p->velocity[i];
      }
      p->apply_mask();
    }
  }
}

}  // namespace swp::nn
