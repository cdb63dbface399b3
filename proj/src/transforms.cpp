#include "swp/transforms.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

#include <boost/algorithm/string/trim.hpp>

namespace swp {
namespace {

using RationalMatrix = std::vector<std::vector<Rational>>;

Rational power(Rational base, int exp) {
  Rational out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

// Evaluation matrix of a polynomial with `terms` coefficients at the finite
// points followed by the point at infinity (which picks the leading term).
RationalMatrix evaluation_matrix(const std::vector<Rational>& points, int terms) {
  RationalMatrix v(points.size() + 1, std::vector<Rational>(terms, Rational(0)));
  for (std::size_t j = 0; j < points.size(); ++j)
    for (int k = 0; k < terms; ++k) v[j][k] = power(points[j], k);
  v.back()[terms - 1] = 1;
  return v;
}

RationalMatrix invert(RationalMatrix a) {
  const std::size_t n = a.size();
  RationalMatrix inv(n, std::vector<Rational>(n, Rational(0)));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    while (pivot < n && a[pivot][col] == Rational(0)) ++pivot;
    if (pivot == n) throw std::invalid_argument("singular interpolation matrix");
    std::swap(a[col], a[pivot]);
    std::swap(inv[col], inv[pivot]);
    const Rational p = a[col][col];
    for (std::size_t k = 0; k < n; ++k) {
      a[col][k] /= p;
      inv[col][k] /= p;
    }
    for (std::size_t row = 0; row < n; ++row) {
      if (row == col || a[row][col] == Rational(0)) continue;
      const Rational factor = a[row][col];
      for (std::size_t k = 0; k < n; ++k) {
        a[row][k] -= factor * a[col][k];
        inv[row][k] -= factor * inv[col][k];
      }
    }
  }
  return inv;
}

Matrix to_double(const RationalMatrix& r) {
  Matrix out(static_cast<int>(r.size()), static_cast<int>(r.front().size()));
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) = boost::rational_cast<double>(r[i][j]);
  return out;
}

std::vector<float> to_float(const Matrix& m) {
  std::vector<float> out(m.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(m.values()[i]);
  return out;
}

}  // namespace

Rational parse_rational(const std::string& text) {
  const std::string t = boost::algorithm::trim_copy(text);
  try {
    std::size_t used = 0;
    const auto slash = t.find('/');
    if (slash == std::string::npos) {
      const long long v = std::stoll(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return Rational(v);
    }
    const std::string num = t.substr(0, slash);
    const std::string den = t.substr(slash + 1);
    const long long a = std::stoll(num, &used);
    if (used != num.size()) throw std::invalid_argument(t);
    const long long b = std::stoll(den, &used);
    if (used != den.size() || b == 0) throw std::invalid_argument(t);
    return Rational(a, b);
  } catch (const std::logic_error&) {
    throw std::invalid_argument("not a rational number: '" + text + "'");
  }
}

std::string to_string(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

void WinogradInstance::validate() const {
  if (n < 1) throw std::invalid_argument("kernel size must be at least 1");
  if (m <= n)
    throw std::invalid_argument("input tile m=" + std::to_string(m) + " must exceed kernel size n=" +
                                std::to_string(n));
  if (static_cast<int>(points.size()) != m - 1)
    throw std::invalid_argument("F(" + std::to_string(output_tile()) + "," + std::to_string(n) + ") needs " +
                                std::to_string(m - 1) + " interpolation points, got " +
                                std::to_string(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j)
      if (points[i] == points[j]) throw std::invalid_argument("duplicate interpolation point " + to_string(points[i]));
}

WinogradInstance WinogradInstance::with_default_points(int m, int n) {
  // 0, 1, -1, 2, -2, 1/2, -1/2, 3, -3, 1/3, -1/3, 4, -4, ...
  std::vector<Rational> magnitudes = {Rational(1), Rational(2), Rational(1, 2)};
  for (long long k = 3; static_cast<int>(magnitudes.size()) * 2 + 1 < m; ++k) {
    magnitudes.emplace_back(k);
    magnitudes.emplace_back(1, k);
  }
  WinogradInstance inst{m, n, {Rational(0)}};
  for (const auto& mag : magnitudes)
    for (const Rational p : {mag, -mag})
      if (static_cast<int>(inst.points.size()) < m - 1) inst.points.push_back(p);
  if (m < 2) inst.points.clear();
  return inst;
}

TransformSet::TransformSet(WinogradInstance instance) : instance_(std::move(instance)) {
  instance_.validate();
  const int m = instance_.m, n = instance_.n, r = instance_.output_tile();

  // Correlation y = V_r^T [ (V_n g) .* (C^T d) ] with C = V_m^{-1}. The
  // diagonal f is moved from G into B so that G carries the fractions.
  const RationalMatrix vg = evaluation_matrix(instance_.points, n);
  const RationalMatrix vh = evaluation_matrix(instance_.points, r);
  const RationalMatrix c = invert(evaluation_matrix(instance_.points, m));

  std::vector<Rational> f(m, Rational(1));
  for (int j = 0; j + 1 < m; ++j)
    for (int l = 0; l + 1 < m; ++l)
      if (l != j) f[j] *= instance_.points[j] - instance_.points[l];
  if (f[0] < Rational(0)) f[0] = -f[0];

  RationalMatrix g = vg;
  for (int j = 0; j < m; ++j)
    for (int k = 0; k < n; ++k) g[j][k] /= f[j];
  RationalMatrix b = c;
  for (int row = 0; row < m; ++row)
    for (int col = 0; col < m; ++col) b[row][col] *= f[col];

  a_ = to_double(vh);
  b_ = to_double(b);
  g_ = to_double(g);
  a_f_ = to_float(a_);
  b_f_ = to_float(b_);
  g_f_ = to_float(g_);

  auto s = std::make_shared<CoeffTensorS>(coeff_tensor_S(*this));
  auto h = std::make_shared<CoeffTensorH>(coeff_tensor_H(*this));
  auto fm = std::make_shared<ImportanceMatrix>(importance_matrix(*h));
  s_ = std::move(s);
  h_ = std::move(h);
  f_ = std::move(fm);
}

TransformSet generate_transforms(const WinogradInstance& instance) { return TransformSet(instance); }

std::shared_ptr<const TransformSet> shared_transforms(const WinogradInstance& instance) {
  static std::mutex mutex;
  static std::map<std::tuple<int, int, std::vector<std::pair<long long, long long>>>,
                  std::shared_ptr<const TransformSet>>
      cache;
  std::vector<std::pair<long long, long long>> key_points;
  for (const auto& p : instance.points) key_points.emplace_back(p.numerator(), p.denominator());
  const auto key = std::make_tuple(instance.m, instance.n, key_points);
  std::lock_guard lock(mutex);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, std::make_shared<const TransformSet>(instance)).first;
  return it->second;
}

CoeffTensorS coeff_tensor_S(const TransformSet& ts) {
  const int m = ts.m(), n = ts.n();
  CoeffTensorS out{m, n, std::vector<double>(static_cast<std::size_t>(m) * m * n * n)};
  std::size_t k = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) out.s[k++] = ts.G()(i, u) * ts.G()(j, v);
  return out;
}

CoeffTensorH coeff_tensor_H(const TransformSet& ts) {
  const int m = ts.m(), r = ts.r();
  const Matrix& A = ts.A();
  const Matrix& B = ts.B();
  CoeffTensorH out{m, r, std::vector<double>(static_cast<std::size_t>(r) * r * m * m * m * m)};
  std::size_t k = 0;
  for (int x = 0; x < r; ++x)
    for (int y = 0; y < r; ++y)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
          for (int s = 0; s < m; ++s)
            for (int t = 0; t < m; ++t) out.h[k++] = A(i, x) * A(j, y) * B(s, i) * B(t, j);
  return out;
}

ImportanceMatrix importance_matrix(const CoeffTensorH& h) {
  const int m = h.m, r = h.r;
  ImportanceMatrix out{m, std::vector<double>(static_cast<std::size_t>(m) * m, 0.0)};
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double sum = 0.0;
      for (int x = 0; x < r; ++x)
        for (int y = 0; y < r; ++y)
          for (int s = 0; s < m; ++s)
            for (int t = 0; t < m; ++t) {
              const double v = h(x, y, i, j, s, t);
              sum += v * v;
            }
      out.f[static_cast<std::size_t>(i) * m + j] = std::sqrt(sum);
    }
  return out;
}

std::vector<double> importance_factors(const TransformSet& ts) {
  std::vector<double> c(ts.m(), 0.0);
  for (int i = 0; i < ts.m(); ++i) {
    double a = 0.0, b = 0.0;
    for (int x = 0; x < ts.r(); ++x) a += ts.A()(i, x) * ts.A()(i, x);
    for (int s = 0; s < ts.m(); ++s) b += ts.B()(s, i) * ts.B()(s, i);
    c[i] = a * b;
  }
  return c;
}

Matrix winograd_tile_q(const TransformSet& ts, const Matrix& q, const Matrix& tile) {
  const Matrix& A = ts.A();
  const Matrix& B = ts.B();
  const Matrix v = B.transposed() * tile * B;
  return A.transposed() * hadamard(q, v) * A;
}

Matrix winograd_tile(const TransformSet& ts, const Matrix& w, const Matrix& tile) {
  const Matrix& G = ts.G();
  return winograd_tile_q(ts, G * w * G.transposed(), tile);
}

}  // namespace swp
