#pragma once

#include <cstdint>
#include <vector>

#include "swp/tensor.hpp"
#include "swp/transforms.hpp"

namespace swp {

// [batch][channels][height][width]
using FeatureMap = Tensor;

// Arithmetic and timing instrumentation for the convolution kernels.
struct ConvCounters {
  std::uint64_t elementwise_mults = 0;  // Winograd-domain products q * (B^T I B)
  std::uint64_t transform_mults = 0;    // products by nonzero transform coefficients
  std::uint64_t direct_mults = 0;       // spatial-domain products in direct convolution
  double input_transform_seconds = 0.0;
  double elementwise_seconds = 0.0;
  double output_transform_seconds = 0.0;

  ConvCounters& operator+=(const ConvCounters& other);
};

// Valid stride-1 cross-correlation over the zero-padded input, accumulated
// in double. w is [out_ch][in_ch][n][n].
FeatureMap direct_conv2d(const FeatureMap& x, const Tensor& w, int pad, ConvCounters* counters = nullptr);

// Backward passes of direct_conv2d (reference path).
FeatureMap direct_conv2d_input_grad(const FeatureMap& d_out, const Tensor& w, int pad, int in_h, int in_w);
Tensor direct_conv2d_weight_grad(const FeatureMap& d_out, const FeatureMap& x, int pad, int n);

// q[o][c] = G w[o][c] G^T for every filter; result is [out_ch][in_ch][m][m].
Tensor weights_to_winograd(const Tensor& w, const TransformSet& ts);

struct TileGeometry {
  int batch = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  int pad = 0;
  int m = 0;
  int n = 0;
  int out_h = 0;
  int out_w = 0;
  int tiles_h = 0;
  int tiles_w = 0;

  int r() const noexcept { return m - n + 1; }
  int tiles() const noexcept { return tiles_h * tiles_w; }
  // Zero padding added on the bottom/right so the last tile is full.
  int extra_pad_h() const noexcept { return tiles_h * r() + n - 1 - (height + 2 * pad); }
  int extra_pad_w() const noexcept { return tiles_w * r() + n - 1 - (width + 2 * pad); }
};

TileGeometry make_tile_geometry(const Shape& input_shape, const WinogradInstance& instance, int pad);

// Overlapping m x m input tiles at stride m-n+1.
struct TileSet {
  TileGeometry geometry;
  Tensor tiles;  // [batch][channels][tile_index][m][m], tile_index = ty * tiles_w + tx
};

TileSet tile_input(const FeatureMap& x, const WinogradInstance& instance, int pad);

// Inverse of the output tiling: out_tiles is [batch][channels][tile_index][r][r];
// tiles are placed at stride r and cropped to out_h x out_w.
FeatureMap assemble_output_tiles(const Tensor& out_tiles, const TileGeometry& geometry);

// Per-layer Winograd-domain weights and pruning mask.
struct WinogradConvLayer {
  Tensor q;     // [out_ch][in_ch][m][m]
  Tensor mask;  // same shape, entries 0 or 1
  WinogradInstance instance;
  int pad = 0;

  int out_channels() const { return q.dim(0); }
  int in_channels() const { return q.dim(1); }
  std::size_t nonzeros() const;
  double sparsity() const;

  // q <- q .* mask
  void apply_mask();

  // q = G w G^T, mask = indicator(q != 0).
  static WinogradConvLayer from_spatial(const Tensor& w, const TransformSet& ts, int pad);
};

FeatureMap winograd_conv_layer(const FeatureMap& x, const WinogradConvLayer& layer, const TransformSet& ts,
                               ConvCounters* counters = nullptr);

struct SparseEntry {
  int out_ch = 0;
  int in_ch = 0;
  float value = 0.0f;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

// Nonzero Winograd weights grouped by tile position (i, j): positions[i * m + j]
// lists the (out_ch, in_ch, value) triples active at that position.
struct SparseWinogradWeights {
  int m = 0;
  int out_channels = 0;
  int in_channels = 0;
  int pad = 0;
  WinogradInstance instance;
  std::vector<std::vector<SparseEntry>> positions;
  std::size_t nonzeros = 0;
};

// Throws std::invalid_argument when q is nonzero where the mask is zero.
SparseWinogradWeights pack_sparse(const WinogradConvLayer& layer);
Tensor unpack_sparse(const SparseWinogradWeights& sw);

FeatureMap sparse_winograd_conv_layer(const FeatureMap& x, const SparseWinogradWeights& sw, const TransformSet& ts,
                                      ConvCounters* counters = nullptr);

// dq[o][c] = sum over tiles of (A dO A^T) .* (B^T I B).
Tensor winograd_weight_grad(const FeatureMap& d_out, const TileSet& tiles, const TransformSet& ts);

// Gradient with respect to the layer input; overlapping tile contributions are summed.
FeatureMap winograd_input_grad(const FeatureMap& d_out, const WinogradConvLayer& layer, const TransformSet& ts);

// Position-major kernel building blocks used by the training engine.
namespace winograd {

// B^T I B for every tile, laid out [m*m][channels][batch * tiles].
struct TransformedInput {
  TileGeometry geometry;
  std::vector<float> v;
};

TransformedInput transform_input(const FeatureMap& x, const TransformSet& ts, int pad,
                                 ConvCounters* counters = nullptr);
TransformedInput transform_tiles(const TileSet& tiles, const TransformSet& ts, ConvCounters* counters = nullptr);

// [out][in][m][m] <-> [m*m][out][in]
std::vector<float> to_position_major(const Tensor& q);
Tensor from_position_major(const std::vector<float>& pm, int out_ch, int in_ch, int m);

// Dense element-wise stage plus output transform.
FeatureMap forward(const TransformedInput& in, const Tensor& q, const TransformSet& ts,
                   ConvCounters* counters = nullptr);

// A dO A^T for every output tile, laid out [m*m][out_ch][batch * tiles].
std::vector<float> transform_output_grad(const FeatureMap& d_out, const TileGeometry& geometry,
                                         const TransformSet& ts);

Tensor weight_grad(const std::vector<float>& d_m, int out_ch, const TransformedInput& in, const TransformSet& ts);
FeatureMap input_grad(const std::vector<float>& d_m, int out_ch, const Tensor& q, const TileGeometry& geometry,
                      const TransformSet& ts);

}  // namespace winograd

}  // namespace swp
