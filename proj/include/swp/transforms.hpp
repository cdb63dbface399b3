#pragma once

#include <memory>
#include <string>
#include <vector>

#include <boost/rational.hpp>

#include "swp/matrix.hpp"

namespace swp {

using Rational = boost::rational<long long>;

Rational parse_rational(const std::string& text);
std::string to_string(const Rational& r);

// One Winograd algorithm F(m-n+1, n): m x m input tiles, n x n kernels.
// `points` are the m-1 finite Cook-Toom interpolation points; the point at
// infinity is always used as the m-th point.
struct WinogradInstance {
  int m = 0;
  int n = 0;
  std::vector<Rational> points;

  int output_tile() const noexcept { return m - n + 1; }

  // Throws std::invalid_argument when m <= n, n < 1, the point count is not
  // m-1, or two points coincide.
  void validate() const;

  // {0, 1, -1} for m = 4, {0, 1, -1, 2, -2} for m = 6, continuing with
  // 1/2, -1/2, 3, -3, ... for larger tiles.
  static WinogradInstance with_default_points(int m, int n);

  friend bool operator==(const WinogradInstance&, const WinogradInstance&) = default;
};

// S[i][j][u][v] = G[i][u] * G[j][v]; Q[i][j] = sum_uv S[i][j][u][v] * W[u][v].
struct CoeffTensorS {
  int m = 0;
  int n = 0;
  std::vector<double> s;

  double operator()(int i, int j, int u, int v) const noexcept {
    return s[((static_cast<std::size_t>(i) * m + j) * n + u) * n + v];
  }
};

// H[x][y][i][j][s][t] = A[i][x] * A[j][y] * B[s][i] * B[t][j];
// O[x][y] = sum_ijst H * Q[i][j] * I[s][t].
struct CoeffTensorH {
  int m = 0;
  int r = 0;  // output tile side
  std::vector<double> h;

  double operator()(int x, int y, int i, int j, int s, int t) const noexcept {
    return h[((((static_cast<std::size_t>(x) * r + y) * m + i) * m + j) * m + s) * m + t];
  }
};

// F[i][j] = sqrt(sum_xyst H[x][y][i][j][s][t]^2). Scales squared Winograd
// weights into expected squared output perturbation under unit-variance
// i.i.d. zero-mean inputs.
struct ImportanceMatrix {
  int m = 0;
  std::vector<double> f;

  double operator()(int i, int j) const noexcept { return f[static_cast<std::size_t>(i) * m + j]; }
};

// Transform matrices A (m x r), B (m x m), G (m x n) for one instance, with
// S, H and F precomputed. Immutable after construction.
class TransformSet {
 public:
  explicit TransformSet(WinogradInstance instance);

  const WinogradInstance& instance() const noexcept { return instance_; }
  int m() const noexcept { return instance_.m; }
  int n() const noexcept { return instance_.n; }
  int r() const noexcept { return instance_.output_tile(); }

  const Matrix& A() const noexcept { return a_; }
  const Matrix& B() const noexcept { return b_; }
  const Matrix& G() const noexcept { return g_; }

  // Row-major float copies of A, B, G for the compute kernels.
  const std::vector<float>& A_f() const noexcept { return a_f_; }
  const std::vector<float>& B_f() const noexcept { return b_f_; }
  const std::vector<float>& G_f() const noexcept { return g_f_; }

  const CoeffTensorS& S() const noexcept { return *s_; }
  const CoeffTensorH& H() const noexcept { return *h_; }
  const ImportanceMatrix& F() const noexcept { return *f_; }

 private:
  WinogradInstance instance_;
  Matrix a_, b_, g_;
  std::vector<float> a_f_, b_f_, g_f_;
  std::shared_ptr<const CoeffTensorS> s_;
  std::shared_ptr<const CoeffTensorH> h_;
  std::shared_ptr<const ImportanceMatrix> f_;
};

// Exact rational Cook-Toom construction of A, B, G.
TransformSet generate_transforms(const WinogradInstance& instance);

// Process-wide cache keyed by (m, n, points).
std::shared_ptr<const TransformSet> shared_transforms(const WinogradInstance& instance);

CoeffTensorS coeff_tensor_S(const TransformSet& ts);
CoeffTensorH coeff_tensor_H(const TransformSet& ts);
ImportanceMatrix importance_matrix(const CoeffTensorH& h);

// c[i] = (sum_x A[i][x]^2) * (sum_s B[s][i]^2); F[i][j]^2 = c[i] * c[j].
std::vector<double> importance_factors(const TransformSet& ts);

// Single-tile Winograd convolution in double precision:
// A^T [ (G W G^T) .* (B^T I B) ] A.
Matrix winograd_tile(const TransformSet& ts, const Matrix& w, const Matrix& tile);

// Single-tile Winograd convolution from Winograd-domain weights q.
Matrix winograd_tile_q(const TransformSet& ts, const Matrix& q, const Matrix& tile);

}  // namespace swp
