#include "swp/conv.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <stdexcept>
#include <utility>

#include "swp/error.hpp"
#include "swp/gemm.hpp"

namespace swp {
namespace {

constexpr int kMaxTile = 16;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// y = P x P^T for a fixed p x k matrix P, skipping zero coefficients.
class Congruence {
 public:
  explicit Congruence(const Matrix& p) : p_(p.rows()), k_(p.cols()), rows_(p.rows()) {
    if (p_ > kMaxTile || k_ > kMaxTile) throw std::invalid_argument("transform larger than supported tile size");
    for (int a = 0; a < p_; ++a)
      for (int c = 0; c < k_; ++c)
        if (p(a, c) != 0.0) {
          rows_[a].emplace_back(c, static_cast<float>(p(a, c)));
          ++nnz_;
        }
  }

  // x is k x k row-major, y is p x p row-major.
  void apply(const float* x, float* y) const {
    std::array<float, kMaxTile * kMaxTile> tmp{};
    for (int a = 0; a < p_; ++a) {
      float* t = tmp.data() + a * k_;
      std::fill(t, t + k_, 0.0f);
      for (const auto& [c, coef] : rows_[a]) {
        const float* xr = x + c * k_;
        for (int d = 0; d < k_; ++d) t[d] += coef * xr[d];
      }
    }
    for (int a = 0; a < p_; ++a) {
      const float* t = tmp.data() + a * k_;
      for (int b = 0; b < p_; ++b) {
        float acc = 0.0f;
        for (const auto& [d, coef] : rows_[b]) acc += t[d] * coef;
        y[a * p_ + b] = acc;
      }
    }
  }

  std::uint64_t mults() const noexcept { return static_cast<std::uint64_t>(nnz_) * (k_ + p_); }

 private:
  int p_, k_;
  int nnz_ = 0;
  std::vector<std::vector<std::pair<int, float>>> rows_;
};

void check_instance(const WinogradInstance& inst, const TransformSet& ts) {
  if (!(inst == ts.instance())) throw ShapeError("layer instance does not match transform set");
}

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + " must be rank 4, got " + shape_to_string(t.shape()));
}

}  // namespace

ConvCounters& ConvCounters::operator+=(const ConvCounters& o) {
  elementwise_mults += o.elementwise_mults;
  transform_mults += o.transform_mults;
  direct_mults += o.direct_mults;
  input_transform_seconds += o.input_transform_seconds;
  elementwise_seconds += o.elementwise_seconds;
  output_transform_seconds += o.output_transform_seconds;
  return *this;
}

FeatureMap direct_conv2d(const FeatureMap& x, const Tensor& w, int pad, ConvCounters* counters) {
  require_rank4(x, "input");
  require_rank4(w, "weights");
  if (pad < 0) throw std::invalid_argument("negative padding");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), n = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != n)
    throw ShapeError("weights " + shape_to_string(w.shape()) + " do not match input " + shape_to_string(x.shape()));
  const int Ho = H + 2 * pad - n + 1, Wo = W + 2 * pad - n + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("kernel larger than padded input");
  FeatureMap y({B, O, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < n; ++u) {
              const int iy = oy + u - pad;
              if (iy < 0 || iy >= H) continue;
              for (int v = 0; v < n; ++v) {
                const int ix = ox + v - pad;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(w.at(o, c, u, v)) * x.at(b, c, iy, ix);
              }
            }
          y.at(b, o, oy, ox) = static_cast<float>(acc);
        }
  if (counters) counters->direct_mults += static_cast<std::uint64_t>(B) * O * C * n * n * Ho * Wo;
  return y;
}

FeatureMap direct_conv2d_input_grad(const FeatureMap& d_out, const Tensor& w, int pad, int in_h, int in_w) {
  require_rank4(d_out, "output gradient");
  const int B = d_out.dim(0), O = d_out.dim(1), Ho = d_out.dim(2), Wo = d_out.dim(3);
  const int C = w.dim(1), n = w.dim(2);
  if (w.dim(0) != O) throw ShapeError("weights do not match output gradient");
  std::vector<double> acc(static_cast<std::size_t>(B) * C * in_h * in_w, 0.0);
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const double g = d_out.at(b, o, oy, ox);
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < n; ++u) {
              const int iy = oy + u - pad;
              if (iy < 0 || iy >= in_h) continue;
              for (int v = 0; v < n; ++v) {
                const int ix = ox + v - pad;
                if (ix < 0 || ix >= in_w) continue;
                acc[((static_cast<std::size_t>(b) * C + c) * in_h + iy) * in_w + ix] += g * w.at(o, c, u, v);
              }
            }
        }
  FeatureMap dx({B, C, in_h, in_w});
  for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<float>(acc[i]);
  return dx;
}

Tensor direct_conv2d_weight_grad(const FeatureMap& d_out, const FeatureMap& x, int pad, int n) {
  require_rank4(d_out, "output gradient");
  require_rank4(x, "input");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = d_out.dim(1), Ho = d_out.dim(2), Wo = d_out.dim(3);
  Tensor dw({O, C, n, n});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
          double acc = 0.0;
          for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy + u - pad;
              if (iy < 0 || iy >= H) continue;
              for (int ox = 0; ox < Wo; ++ox) {
                const int ix = ox + v - pad;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(d_out.at(b, o, oy, ox)) * x.at(b, c, iy, ix);
              }
            }
          dw.at(o, c, u, v) = static_cast<float>(acc);
        }
  return dw;
}

Tensor weights_to_winograd(const Tensor& w, const TransformSet& ts) {
  require_rank4(w, "weights");
  const int n = ts.n(), m = ts.m();
  if (w.dim(2) != n || w.dim(3) != n)
    throw ShapeError("kernel " + shape_to_string(w.shape()) + " does not match transform n=" + std::to_string(n));
  const int O = w.dim(0), C = w.dim(1);
  const Matrix& G = ts.G();
  const Matrix Gt = G.transposed();
  Tensor q({O, C, m, m});
  Matrix filter(n, n);
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c) {
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) filter(u, v) = w.at(o, c, u, v);
      const Matrix qf = G * filter * Gt;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) q.at(o, c, i, j) = static_cast<float>(qf(i, j));
    }
  return q;
}

TileGeometry make_tile_geometry(const Shape& s, const WinogradInstance& instance, int pad) {
  if (s.size() != 4) throw ShapeError("feature map must be rank 4, got " + shape_to_string(s));
  if (pad < 0) throw std::invalid_argument("negative padding");
  TileGeometry g;
  g.batch = s[0];
  g.channels = s[1];
  g.height = s[2];
  g.width = s[3];
  g.pad = pad;
  g.m = instance.m;
  g.n = instance.n;
  g.out_h = g.height + 2 * pad - g.n + 1;
  g.out_w = g.width + 2 * pad - g.n + 1;
  if (g.out_h < 1 || g.out_w < 1) throw ShapeError("kernel larger than padded input " + shape_to_string(s));
  const int r = g.r();
  g.tiles_h = (g.out_h + r - 1) / r;
  g.tiles_w = (g.out_w + r - 1) / r;
  return g;
}

TileSet tile_input(const FeatureMap& x, const WinogradInstance& instance, int pad) {
  TileSet ts{make_tile_geometry(x.shape(), instance, pad), {}};
  const TileGeometry& g = ts.geometry;
  const int m = g.m, r = g.r();
  ts.tiles = Tensor({g.batch, g.channels, g.tiles(), m, m});
  float* out = ts.tiles.data();
  for (int b = 0; b < g.batch; ++b)
    for (int c = 0; c < g.channels; ++c)
      for (int ty = 0; ty < g.tiles_h; ++ty)
        for (int tx = 0; tx < g.tiles_w; ++tx)
          for (int s = 0; s < m; ++s) {
            const int iy = ty * r + s - pad;
            for (int t = 0; t < m; ++t) {
              const int ix = tx * r + t - pad;
              *out++ = (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width) ? x.at(b, c, iy, ix) : 0.0f;
            }
          }
  return ts;
}

FeatureMap assemble_output_tiles(const Tensor& out_tiles, const TileGeometry& g) {
  const int r = g.r();
  if (out_tiles.rank() != 5 || out_tiles.dim(0) != g.batch || out_tiles.dim(2) != g.tiles() ||
      out_tiles.dim(3) != r || out_tiles.dim(4) != r)
    throw ShapeError("output tiles " + shape_to_string(out_tiles.shape()) + " do not match geometry");
  const int O = out_tiles.dim(1);
  FeatureMap y({g.batch, O, g.out_h, g.out_w});
  const float* src = out_tiles.data();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < O; ++o)
      for (int ty = 0; ty < g.tiles_h; ++ty)
        for (int tx = 0; tx < g.tiles_w; ++tx)
          for (int x = 0; x < r; ++x)
            for (int yy = 0; yy < r; ++yy, ++src) {
              const int oy = ty * r + x, ox = tx * r + yy;
              if (oy < g.out_h && ox < g.out_w) y.at(b, o, oy, ox) = *src;
            }
  return y;
}

std::size_t WinogradConvLayer::nonzeros() const {
  return static_cast<std::size_t>(std::count_if(q.values().begin(), q.values().end(), [](float v) { return v != 0.0f; }));
}

double WinogradConvLayer::sparsity() const {
  return q.empty() ? 0.0 : 1.0 - static_cast<double>(nonzeros()) / static_cast<double>(q.size());
}

void WinogradConvLayer::apply_mask() {
  require_same_shape(q, mask, "Winograd mask");
  for (std::size_t i = 0; i < q.size(); ++i) q[i] *= mask[i];
}

WinogradConvLayer WinogradConvLayer::from_spatial(const Tensor& w, const TransformSet& ts, int pad) {
  WinogradConvLayer layer{weights_to_winograd(w, ts), {}, ts.instance(), pad};
  layer.mask = Tensor(layer.q.shape());
  for (std::size_t i = 0; i < layer.q.size(); ++i) layer.mask[i] = layer.q[i] != 0.0f ? 1.0f : 0.0f;
  return layer;
}

namespace winograd {
namespace {

template <typename Gather>
TransformedInput transform_impl(const TileGeometry& g, const TransformSet& ts, ConvCounters* counters,
                                Gather&& gather) {
  const auto start = Clock::now();
  const Congruence bt(ts.B().transposed());
  const int m = g.m, P = m * m, T = g.tiles(), BT = g.batch * T, C = g.channels;
  TransformedInput in{g, std::vector<float>(static_cast<std::size_t>(P) * C * BT)};
  std::array<float, kMaxTile * kMaxTile> tile{}, v{};
  for (int b = 0; b < g.batch; ++b)
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < T; ++t) {
        gather(b, c, t, tile.data());
        bt.apply(tile.data(), v.data());
        const std::size_t col = static_cast<std::size_t>(c) * BT + static_cast<std::size_t>(b) * T + t;
        for (int p = 0; p < P; ++p) in.v[static_cast<std::size_t>(p) * C * BT + col] = v[p];
      }
  if (counters) {
    counters->transform_mults += bt.mults() * static_cast<std::uint64_t>(g.batch) * C * T;
    counters->input_transform_seconds += seconds_since(start);
  }
  return in;
}

FeatureMap output_transform(const std::vector<float>& M, int O, const TileGeometry& g, const TransformSet& ts,
                            ConvCounters* counters) {
  const auto start = Clock::now();
  const Congruence at(ts.A().transposed());
  const int m = g.m, r = g.r(), P = m * m, T = g.tiles(), BT = g.batch * T;
  FeatureMap y({g.batch, O, g.out_h, g.out_w});
  std::array<float, kMaxTile * kMaxTile> tile{}, out{};
  for (int o = 0; o < O; ++o)
    for (int b = 0; b < g.batch; ++b)
      for (int t = 0; t < T; ++t) {
        const std::size_t col = static_cast<std::size_t>(o) * BT + static_cast<std::size_t>(b) * T + t;
        for (int p = 0; p < P; ++p) tile[p] = M[static_cast<std::size_t>(p) * O * BT + col];
        at.apply(tile.data(), out.data());
        const int ty = t / g.tiles_w, tx = t % g.tiles_w;
        for (int x = 0; x < r; ++x) {
          const int oy = ty * r + x;
          if (oy >= g.out_h) break;
          for (int yy = 0; yy < r; ++yy) {
            const int ox = tx * r + yy;
            if (ox >= g.out_w) break;
            y.at(b, o, oy, ox) = out[x * r + yy];
          }
        }
      }
  if (counters) {
    counters->transform_mults += at.mults() * static_cast<std::uint64_t>(g.batch) * O * T;
    counters->output_transform_seconds += seconds_since(start);
  }
  return y;
}

}  // namespace

TransformedInput transform_input(const FeatureMap& x, const TransformSet& ts, int pad, ConvCounters* counters) {
  const TileGeometry g = make_tile_geometry(x.shape(), ts.instance(), pad);
  const int m = g.m, r = g.r();
  return transform_impl(g, ts, counters, [&](int b, int c, int t, float* tile) {
    const int ty = t / g.tiles_w, tx = t % g.tiles_w;
    for (int s = 0; s < m; ++s) {
      const int iy = ty * r + s - pad;
      const bool row_in = iy >= 0 && iy < g.height;
      for (int u = 0; u < m; ++u) {
        const int ix = tx * r + u - pad;
        tile[s * m + u] = (row_in && ix >= 0 && ix < g.width) ? x.at(b, c, iy, ix) : 0.0f;
      }
    }
  });
}

TransformedInput transform_tiles(const TileSet& tiles, const TransformSet& ts, ConvCounters* counters) {
  const TileGeometry& g = tiles.geometry;
  if (g.m != ts.m() || g.n != ts.n()) throw ShapeError("tile set does not match transform set");
  const int P = g.m * g.m;
  return transform_impl(g, ts, counters, [&](int b, int c, int t, float* tile) {
    const float* src = tiles.tiles.data() + ((static_cast<std::size_t>(b) * g.channels + c) * g.tiles() + t) * P;
    std::copy(src, src + P, tile);
  });
}

std::vector<float> to_position_major(const Tensor& q) {
  const int O = q.dim(0), C = q.dim(1), P = q.dim(2) * q.dim(3);
  std::vector<float> pm(q.size());
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p)
        pm[(static_cast<std::size_t>(p) * O + o) * C + c] = q[(static_cast<std::size_t>(o) * C + c) * P + p];
  return pm;
}

Tensor from_position_major(const std::vector<float>& pm, int O, int C, int m) {
  const int P = m * m;
  Tensor q({O, C, m, m});
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p)
        q[(static_cast<std::size_t>(o) * C + c) * P + p] = pm[(static_cast<std::size_t>(p) * O + o) * C + c];
  return q;
}

FeatureMap forward(const TransformedInput& in, const Tensor& q, const TransformSet& ts, ConvCounters* counters) {
  const TileGeometry& g = in.geometry;
  require_rank4(q, "Winograd weights");
  if (q.dim(1) != g.channels || q.dim(2) != g.m || q.dim(3) != g.m)
    throw ShapeError("Winograd weights " + shape_to_string(q.shape()) + " do not match input with " +
                     std::to_string(g.channels) + " channels and m=" + std::to_string(g.m));
  const int O = q.dim(0), C = g.channels, P = g.m * g.m, BT = g.batch * g.tiles();
  const auto start = Clock::now();
  const std::vector<float> qpm = to_position_major(q);
  std::vector<float> M(static_cast<std::size_t>(P) * O * BT);
  for (int p = 0; p < P; ++p)
    sgemm(false, false, O, BT, C, 1.0f, qpm.data() + static_cast<std::size_t>(p) * O * C, C,
          in.v.data() + static_cast<std::size_t>(p) * C * BT, BT, 0.0f, M.data() + static_cast<std::size_t>(p) * O * BT,
          BT);
  if (counters) {
    counters->elementwise_mults += static_cast<std::uint64_t>(P) * O * C * BT;
    counters->elementwise_seconds += seconds_since(start);
  }
  return output_transform(M, O, g, ts, counters);
}

std::vector<float> transform_output_grad(const FeatureMap& d_out, const TileGeometry& g, const TransformSet& ts) {
  require_rank4(d_out, "output gradient");
  if (d_out.dim(0) != g.batch || d_out.dim(2) != g.out_h || d_out.dim(3) != g.out_w)
    throw ShapeError("output gradient " + shape_to_string(d_out.shape()) + " does not match tile geometry");
  const Congruence a(ts.A());
  const int O = d_out.dim(1), m = g.m, r = g.r(), P = m * m, T = g.tiles(), BT = g.batch * T;
  std::vector<float> dm(static_cast<std::size_t>(P) * O * BT);
  std::array<float, kMaxTile * kMaxTile> tile{}, out{};
  for (int o = 0; o < O; ++o)
    for (int b = 0; b < g.batch; ++b)
      for (int t = 0; t < T; ++t) {
        const int ty = t / g.tiles_w, tx = t % g.tiles_w;
        for (int x = 0; x < r; ++x)
          for (int y = 0; y < r; ++y) {
            const int oy = ty * r + x, ox = tx * r + y;
            tile[x * r + y] = (oy < g.out_h && ox < g.out_w) ? d_out.at(b, o, oy, ox) : 0.0f;
          }
        a.apply(tile.data(), out.data());
        const std::size_t col = static_cast<std::size_t>(o) * BT + static_cast<std::size_t>(b) * T + t;
        for (int p = 0; p < P; ++p) dm[static_cast<std::size_t>(p) * O * BT + col] = out[p];
      }
  return dm;
}

Tensor weight_grad(const std::vector<float>& d_m, int O, const TransformedInput& in, const TransformSet& ts) {
  const TileGeometry& g = in.geometry;
  const int C = g.channels, m = ts.m(), P = m * m, BT = g.batch * g.tiles();
  std::vector<float> dq(static_cast<std::size_t>(P) * O * C);
  for (int p = 0; p < P; ++p)
    sgemm(false, true, O, C, BT, 1.0f, d_m.data() + static_cast<std::size_t>(p) * O * BT, BT,
          in.v.data() + static_cast<std::size_t>(p) * C * BT, BT, 0.0f, dq.data() + static_cast<std::size_t>(p) * O * C,
          C);
  return from_position_major(dq, O, C, m);
}

FeatureMap input_grad(const std::vector<float>& d_m, int O, const Tensor& q, const TileGeometry& g,
                      const TransformSet& ts) {
  const int C = g.channels, m = g.m, r = g.r(), P = m * m, T = g.tiles(), BT = g.batch * T;
  const std::vector<float> qpm = to_position_major(q);
  std::vector<float> dv(static_cast<std::size_t>(P) * C * BT);
  for (int p = 0; p < P; ++p)
    sgemm(true, false, C, BT, O, 1.0f, qpm.data() + static_cast<std::size_t>(p) * O * C, C,
          d_m.data() + static_cast<std::size_t>(p) * O * BT, BT, 0.0f, dv.data() + static_cast<std::size_t>(p) * C * BT,
          BT);
  const Congruence bmat(ts.B());
  FeatureMap dx({g.batch, C, g.height, g.width});
  std::array<float, kMaxTile * kMaxTile> tile{}, out{};
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < g.batch; ++b)
      for (int t = 0; t < T; ++t) {
        const std::size_t col = static_cast<std::size_t>(c) * BT + static_cast<std::size_t>(b) * T + t;
        for (int p = 0; p < P; ++p) tile[p] = dv[static_cast<std::size_t>(p) * C * BT + col];
        bmat.apply(tile.data(), out.data());
        const int ty = t / g.tiles_w, tx = t % g.tiles_w;
        for (int s = 0; s < m; ++s) {
          const int iy = ty * r + s - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          for (int u = 0; u < m; ++u) {
            const int ix = tx * r + u - g.pad;
            if (ix < 0 || ix >= g.width) continue;
            dx.at(b, c, iy, ix) += out[s * m + u];
          }
        }
      }
  return dx;
}

}  // namespace winograd

FeatureMap winograd_conv_layer(const FeatureMap& x, const WinogradConvLayer& layer, const TransformSet& ts,
                               ConvCounters* counters) {
  check_instance(layer.instance, ts);
  require_rank4(x, "input");
  if (layer.q.dim(1) != x.dim(1))
    throw ShapeError("layer expects " + std::to_string(layer.q.dim(1)) + " input channels, got " +
                     std::to_string(x.dim(1)));
  return winograd::forward(winograd::transform_input(x, ts, layer.pad, counters), layer.q, ts, counters);
}

SparseWinogradWeights pack_sparse(const WinogradConvLayer& layer) {
  require_same_shape(layer.q, layer.mask, "Winograd mask");
  const int O = layer.out_channels(), C = layer.in_channels(), m = layer.q.dim(2), P = m * m;
  SparseWinogradWeights sw{m, O, C, layer.pad, layer.instance, std::vector<std::vector<SparseEntry>>(P), 0};
  for (int o = 0; o < O; ++o)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p) {
        const std::size_t idx = (static_cast<std::size_t>(o) * C + c) * P + p;
        const float v = layer.q[idx];
        if (layer.mask[idx] == 0.0f) {
          if (v != 0.0f)
            throw std::invalid_argument("Winograd weight is nonzero at masked position (" + std::to_string(o) + "," +
                                        std::to_string(c) + "," + std::to_string(p) + ")");
          continue;
        }
        sw.positions[p].push_back({o, c, v});
        ++sw.nonzeros;
      }
  return sw;
}

Tensor unpack_sparse(const SparseWinogradWeights& sw) {
  const int P = sw.m * sw.m;
  Tensor q({sw.out_channels, sw.in_channels, sw.m, sw.m});
  for (int p = 0; p < P; ++p)
    for (const auto& e : sw.positions[p]) q[(static_cast<std::size_t>(e.out_ch) * sw.in_channels + e.in_ch) * P + p] = e.value;
  return q;
}

FeatureMap sparse_winograd_conv_layer(const FeatureMap& x, const SparseWinogradWeights& sw, const TransformSet& ts,
                                      ConvCounters* counters) {
  check_instance(sw.instance, ts);
  require_rank4(x, "input");
  if (sw.in_channels != x.dim(1))
    throw ShapeError("layer expects " + std::to_string(sw.in_channels) + " input channels, got " +
                     std::to_string(x.dim(1)));
  const winograd::TransformedInput in = winograd::transform_input(x, ts, sw.pad, counters);
  const TileGeometry& g = in.geometry;
  const int O = sw.out_channels, C = sw.in_channels, P = sw.m * sw.m, BT = g.batch * g.tiles();
  const auto start = Clock::now();
  std::vector<float> M(static_cast<std::size_t>(P) * O * BT, 0.0f);
  std::uint64_t mults = 0;
  for (int p = 0; p < P; ++p) {
    const float* vp = in.v.data() + static_cast<std::size_t>(p) * C * BT;
    float* mp = M.data() + static_cast<std::size_t>(p) * O * BT;
    for (const auto& e : sw.positions[p]) {
      const float* src = vp + static_cast<std::size_t>(e.in_ch) * BT;
      float* dst = mp + static_cast<std::size_t>(e.out_ch) * BT;
      const float v = e.value;
      for (int k = 0; k < BT; ++k) dst[k] += v * src[k];
      mults += static_cast<std::uint64_t>(BT);
    }
  }
  if (counters) {
    counters->elementwise_mults += mults;
    counters->elementwise_seconds += seconds_since(start);
  }
  return winograd::output_transform(M, O, g, ts, counters);
}

Tensor winograd_weight_grad(const FeatureMap& d_out, const TileSet& tiles, const TransformSet& ts) {
  const winograd::TransformedInput in = winograd::transform_tiles(tiles, ts);
  const std::vector<float> dm = winograd::transform_output_grad(d_out, tiles.geometry, ts);
  return winograd::weight_grad(dm, d_out.dim(1), in, ts);
}

FeatureMap winograd_input_grad(const FeatureMap& d_out, const WinogradConvLayer& layer, const TransformSet& ts) {
  check_instance(layer.instance, ts);
  require_rank4(d_out, "output gradient");
  if (d_out.dim(1) != layer.out_channels()) throw ShapeError("output gradient channels do not match layer");
  const int n = ts.n();
  const int in_h = d_out.dim(2) + n - 1 - 2 * layer.pad, in_w = d_out.dim(3) + n - 1 - 2 * layer.pad;
  if (in_h < 1 || in_w < 1) throw ShapeError("output gradient too small for layer padding");
  const TileGeometry g = make_tile_geometry({d_out.dim(0), layer.in_channels(), in_h, in_w}, layer.instance, layer.pad);
  const std::vector<float> dm = winograd::transform_output_grad(d_out, g, ts);
  return winograd::input_grad(dm, layer.out_channels(), layer.q, g, ts);
}

}  // namespace swp
