// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Oracles here are plain loops and matrix products,
// independent of the kernels under test.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "swp/checkpoint.hpp"
#include "swp/cli.hpp"
#include "swp/conv.hpp"
#include "swp/gemm.hpp"
#include "swp/nn.hpp"
#include "swp/pruning.hpp"
#include "swp/train.hpp"
#include "swp/transforms.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace swp;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::shared_ptr<const TransformSet> instance_ts(int m) {
  return shared_transforms(WinogradInstance::with_default_points(m, 3));
}

// Cross-correlation with zero padding, accumulated in double.
Tensor naive_conv(const Tensor& x, const Tensor& w, int pad) {
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), n = w.dim(2);
  const int oh = h + 2 * pad - n + 1, ow = wd + 2 * pad - n + 1;
  Tensor y({b, o, oh, ow});
  for (int bi = 0; bi < b; ++bi)
    for (int oi = 0; oi < o; ++oi)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0.0;
          for (int ci = 0; ci < c; ++ci)
            for (int u = 0; u < n; ++u)
              for (int v = 0; v < n; ++v) {
                const int iy = yy + u - pad, ix = xx + v - pad;
                if (iy >= 0 && iy < h && ix >= 0 && ix < wd) acc += x.at(bi, ci, iy, ix) * w.at(oi, ci, u, v);
              }
          y.at(bi, oi, yy, xx) = static_cast<float>(acc);
        }
  return y;
}

Outcome transform_correctness() {
  const double start = cpu_seconds();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> small(1, 4), side(3, 13), pad(0, 1);
  double worst = 0.0;
  int cases = 0;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    for (int k = 0; k < 500; ++k, ++cases) {
      const Tensor x = test::random_tensor({small(rng), small(rng), side(rng), side(rng)}, rng);
      const Tensor w = test::random_tensor({small(rng), x.dim(1), 3, 3}, rng);
      const int p = pad(rng);
      const auto layer = WinogradConvLayer::from_spatial(w, *ts, p);
      worst = std::max(worst, test::relative_error(winograd_conv_layer(x, layer, *ts), naive_conv(x, w, p)));
    }
  }
  const double secs = cpu_seconds() - start;
  return {worst <= 1e-5 && secs < 60.0,
          fmt::format("{} cases over F(2,3) and F(4,3), worst relative error {:.3g}, {:.1f} s", cases, worst, secs)};
}

// Random distinct small rationals as interpolation points.
WinogradInstance random_instance(std::mt19937_64& rng) {
  const int m = std::uniform_int_distribution<int>(4, 6)(rng);
  std::uniform_int_distribution<int> num(-4, 4), den(1, 3);
  WinogradInstance inst{m, 3, {}};
  while (static_cast<int>(inst.points.size()) < m - 1) {
    const Rational p(num(rng), den(rng));
    if (std::find(inst.points.begin(), inst.points.end(), p) == inst.points.end()) inst.points.push_back(p);
  }
  return inst;
}

double rel(const Matrix& a, const Matrix& b) { return test::relative_error(a, b); }

Outcome appendix_oracles() {
  const double start = cpu_seconds();
  std::mt19937_64 rng(202);
  double worst_s = 0.0, worst_h = 0.0;
  for (int k = 0; k < 100; ++k) {
    const TransformSet ts(random_instance(rng));
    const int m = ts.m(), n = ts.n(), r = ts.r();
    const CoeffTensorS s = coeff_tensor_S(ts);
    const CoeffTensorH h = coeff_tensor_H(ts);

    const Matrix w = test::random_matrix(n, n, rng);
    Matrix q_s(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        for (int u = 0; u < n; ++u)
          for (int v = 0; v < n; ++v) q_s(i, j) += s(i, j, u, v) * w(u, v);
    worst_s = std::max(worst_s, rel(q_s, ts.G() * w * ts.G().transposed()));

    const Matrix q = test::random_matrix(m, m, rng), tile = test::random_matrix(m, m, rng);
    Matrix o_h(r, r);
    for (int x = 0; x < r; ++x)
      for (int y = 0; y < r; ++y)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < m; ++j)
            for (int a = 0; a < m; ++a)
              for (int b = 0; b < m; ++b) o_h(x, y) += h(x, y, i, j, a, b) * q(i, j) * tile(a, b);
    Matrix v = ts.B().transposed() * tile * ts.B();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) v(i, j) *= q(i, j);
    worst_h = std::max(worst_h, rel(o_h, ts.A().transposed() * v * ts.A()));
  }
  const double secs = cpu_seconds() - start;
  return {worst_s <= 1e-6 && worst_h <= 1e-6 && secs < 60.0,
          fmt::format("100 random instances, worst S {:.3g}, worst H {:.3g}, {:.1f} s", worst_s, worst_h, secs)};
}

Outcome importance_matrix_check() {
  const double start = cpu_seconds();
  bool ok = true;
  std::string detail;
  // c_i = (sum_x A[i][x]^2)(sum_s B[s][i]^2) from the matrices themselves.
  const auto factors = [](const TransformSet& ts) {
    std::vector<double> c(ts.m());
    for (int i = 0; i < ts.m(); ++i) {
      double a = 0.0, b = 0.0;
      for (int x = 0; x < ts.r(); ++x) a += ts.A()(i, x) * ts.A()(i, x);
      for (int s = 0; s < ts.m(); ++s) b += ts.B()(s, i) * ts.B()(s, i);
      c[i] = a * b;
    }
    return c;
  };
  const auto f23 = instance_ts(4);
  const auto c23 = factors(*f23);
  const std::vector<double> expected{2, 4, 4, 2};
  for (int i = 0; i < 4; ++i) ok = ok && std::fabs(c23[i] - expected[i]) <= 1e-9 * expected[i];
  detail += fmt::format("F(2,3) c = [{:.6g}, {:.6g}, {:.6g}, {:.6g}]", c23[0], c23[1], c23[2], c23[3]);

  double worst_formula = 0.0, worst_sym = 0.0, worst_rank = 0.0;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    const auto c = factors(*ts);
    const ImportanceMatrix& f = ts->F();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        const double want = std::sqrt(c[i] * c[j]);
        worst_formula = std::max(worst_formula, std::fabs(f(i, j) - want) / want);
        worst_sym = std::max(worst_sym, std::fabs(f(i, j) - f(j, i)) / f(i, j));
        for (int k = 0; k < m; ++k)
          for (int l = 0; l < m; ++l) {
            const double lhs = f(i, j) * f(k, l), rhs = f(i, l) * f(k, j);
            worst_rank = std::max(worst_rank, std::fabs(lhs - rhs) / std::max(lhs, rhs));
          }
      }
  }
  ok = ok && worst_formula <= 1e-9 && worst_sym <= 1e-9 && worst_rank <= 1e-9;

  // E ||A^T [(dq e_ij) .* (B^T I B)] A||^2 = dq^2 F_ij^2 for i.i.d. unit-variance inputs.
  std::mt19937_64 rng(303);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst_mc = 0.0;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    const int r = ts->r();
    const int samples = 100000;
    std::vector<double> acc(m * m, 0.0);
    Matrix tile(m, m);
    for (int s = 0; s < samples; ++s) {
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) tile(a, b) = normal(rng);
      const Matrix v = ts->B().transposed() * tile * ts->B();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
          double e = 0.0;
          for (int x = 0; x < r; ++x)
            for (int y = 0; y < r; ++y) {
              const double d = ts->A()(i, x) * v(i, j) * ts->A()(j, y);
              e += d * d;
            }
          acc[i * m + j] += e;
        }
    }
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        const double want = ts->F()(i, j) * ts->F()(i, j);
        worst_mc = std::max(worst_mc, std::fabs(acc[i * m + j] / samples - want) / want);
      }
  }
  ok = ok && worst_mc <= 0.02;
  const double secs = cpu_seconds() - start;
  ok = ok && secs < 300.0;
  detail += fmt::format("; sqrt(c_i c_j) {:.2g}, symmetry {:.2g}, rank-one {:.2g}; Monte-Carlo worst {:.3g} over 1e5 "
                        "samples; {:.1f} s",
                        worst_formula, worst_sym, worst_rank, worst_mc, secs);
  return {ok, detail};
}

Outcome sparsity_transfer() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> channels(1, 24);
  std::uniform_real_distribution<double> target(0.05, 0.95);
  std::size_t flagged = 0, exact = 0;
  float worst = 0.0f;
  int layers = 0;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    for (int k = 0; k < 25; ++k, ++layers) {
      nn::SpatialConv conv(channels(rng), channels(rng), 3, 1);
      conv.weight().value = test::random_tensor(conv.weight().value.shape(), rng);
      const Tensor before = conv.weight().value;
      const double t = target(rng);
      pruning::prune_layer(conv, *ts, {t, 0.0, false, pruning::Scoring::adjusted});
      // Redundant positions: every weight in D_ij was zeroed.
      const Tensor& w = conv.weight().value;
      const Tensor q = weights_to_winograd(w, *ts);
      const std::size_t filters = w.size() / 9;
      for (std::size_t f = 0; f < filters; ++f)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < m; ++j) {
            bool redundant = true, touched = false;
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v)
                if (ts->G()(i, u) != 0.0 && ts->G()(j, v) != 0.0) {
                  redundant = redundant && w[f * 9 + u * 3 + v] == 0.0f;
                  touched = touched || before[f * 9 + u * 3 + v] != 0.0f;
                }
            if (!redundant || !touched) continue;
            ++flagged;
            const float v = std::fabs(q[f * m * m + i * m + j]);
            worst = std::max(worst, v);
            exact += v <= 1e-7f;
          }
    }
  }
  return {flagged > 0 && exact == flagged,
          fmt::format("{} layers, {}/{} flagged positions with |Q| <= 1e-7 (worst {:.3g})", layers, exact, flagged,
                      worst)};
}

// Worst relative error between analytic gradients and central differences of
// sum(layer(x) .* probe), over inputs and trainable parameters.
double layer_grad_error(nn::Layer& layer, Tensor x, std::mt19937_64& rng, double eps = 1e-2, int samples = 40) {
  const Tensor y = layer.forward(x, true);
  const Tensor probe = test::random_tensor(y.shape(), rng);
  for (nn::Param* p : layer.params()) p->grad.fill(0.0f);
  layer.forward(x, true);
  const Tensor dx = layer.backward(probe);
  std::vector<Tensor> grads;
  for (nn::Param* p : layer.params()) grads.push_back(p->grad);
  const auto f = [&] { return test::weighted_sum(layer.forward(x, true), probe); };
  const auto pick = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(n, samples));
    return idx;
  };
  double worst = 0.0;
  for (std::size_t k : pick(x.size()))
    worst = std::max(worst, test::grad_rel_error(dx[k], test::central_difference(x, k, eps, f), 1e-2));
  auto params = layer.params();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (!params[pi]->trainable) continue;
    for (std::size_t k : pick(params[pi]->value.size()))
      worst = std::max(worst,
                       test::grad_rel_error(grads[pi][k], test::central_difference(params[pi]->value, k, eps, f), 1e-2));
  }
  return worst;
}

void randomize(nn::Param& p, std::mt19937_64& rng, float scale) {
  p.value = test::random_tensor(p.value.shape(), rng, -scale, scale);
}

Outcome gradient_checks() {
  const double start = cpu_seconds();
  std::mt19937_64 rng(505);
  std::map<std::string, double> worst;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    nn::WinogradConv conv({test::random_tensor({3, 2, m, m}, rng, -0.3f, 0.3f), Tensor({3, 2, m, m}, 1.0f),
                           ts->instance(), 1},
                          ts);
    worst["wconv"] = std::max({worst["wconv"], layer_grad_error(conv, test::random_tensor({2, 2, 7, 6}, rng), rng),
                               layer_grad_error(conv, test::random_tensor({2, 2, 3, 3}, rng), rng)});
  }
  {
    nn::SpatialConv conv(2, 3, 3, 1);
    randomize(conv.weight(), rng, 0.5f);
    worst["conv"] = layer_grad_error(conv, test::random_tensor({2, 2, 6, 5}, rng), rng);
  }
  {
    Tensor x = test::random_tensor({2, 3, 4, 4}, rng);
    for (auto& v : x.values()) v = v < 0 ? v - 0.1f : v + 0.1f;
    nn::ReLU relu;
    worst["relu"] = layer_grad_error(relu, x, rng, 1e-3);
  }
  {
    Tensor x({2, 2, 5, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.05f * static_cast<float>(i);
    std::shuffle(x.values().begin(), x.values().end(), rng);
    nn::MaxPool2 pool;
    worst["pool"] = layer_grad_error(pool, x, rng, 1e-3);
  }
  {
    nn::BatchNorm bn(3);
    for (nn::Param* p : bn.params())
      if (p->trainable) randomize(*p, rng, 1.0f);
    worst["bn"] = layer_grad_error(bn, test::random_tensor({4, 3, 3, 3}, rng), rng);
  }
  {
    nn::Flatten flat;
    worst["flatten"] = layer_grad_error(flat, test::random_tensor({2, 3, 2, 2}, rng), rng);
  }
  {
    nn::Dense dense(7, 4);
    for (nn::Param* p : dense.params()) randomize(*p, rng, 0.5f);
    worst["dense"] = layer_grad_error(dense, test::random_tensor({3, 7}, rng), rng);
  }
  {
    nn::SoftmaxCrossEntropy loss;
    const std::vector<int> labels{1, 0, 4};
    loss.set_labels(labels);
    Tensor logits = test::random_tensor({3, 5}, rng, -2.0f, 2.0f);
    loss.forward(logits, true);
    const Tensor dx = loss.backward(Tensor());
    double w = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k)
      w = std::max(w, test::grad_rel_error(dx[k], test::central_difference(logits, k, 1e-2, [&] {
                                             return static_cast<double>(loss.forward(logits, false)[0]);
                                           }),
                                           1e-2));
    worst["softmax"] = w;
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : worst) {
    ok = ok && e <= 1e-2;
    detail += fmt::format("{} {:.2g}, ", name, e);
  }
  const double secs = cpu_seconds() - start;
  return {ok && secs < 300.0, detail + fmt::format("{:.1f} s", secs)};
}

Outcome multiply_accounting() {
  std::mt19937_64 rng(606);
  bool ok = true;
  int checked = 0;
  std::string ratios;
  for (int m : {4, 6}) {
    const auto ts = instance_ts(m);
    const int r = ts->r(), n = 3;
    // Output side divisible by r so the tiling has no remainder.
    const int side = 4 * r * 3;
    const Tensor x = test::random_tensor({2, 5, side, side}, rng);
    Tensor w = test::random_tensor({6, 5, 3, 3}, rng);
    ConvCounters direct, dense;
    direct_conv2d(x, w, 1, &direct);
    auto layer = WinogradConvLayer::from_spatial(w, *ts, 1);
    winograd_conv_layer(x, layer, *ts, &dense);
    // dense * r^2 n^2 == direct * m^2 in integers
    const bool ratio_ok = dense.elementwise_mults * static_cast<std::uint64_t>(r * r * n * n) ==
                          direct.direct_mults * static_cast<std::uint64_t>(m * m);
    ok = ok && ratio_ok;
    ratios += fmt::format("F({},{}) {}/{} {}; ", r, n, dense.elementwise_mults, direct.direct_mults,
                          ratio_ok ? "exact" : "MISMATCH");
    const std::uint64_t tiles = static_cast<std::uint64_t>(side / r) * (side / r);
    for (double s : {0.0, 0.3, 0.5, 0.74, 0.9, 1.0}) {
      auto pruned = layer;
      std::bernoulli_distribution drop(s);
      for (std::size_t k = 0; k < pruned.mask.size(); ++k)
        if (drop(rng)) pruned.mask[k] = 0.0f;
      pruned.apply_mask();
      std::uint64_t nnz = 0;
      for (float v : pruned.q.values()) nnz += v != 0.0f;
      ConvCounters c;
      sparse_winograd_conv_layer(x, pack_sparse(pruned), *ts, &c);
      ok = ok && c.elementwise_mults == nnz * tiles * 2;
      ++checked;
    }
  }
  return {ok, ratios + fmt::format("{} sparse layers with count == nnz x tiles x batch", checked)};
}

std::map<std::string, std::string> read_summary(const fs::path& p) {
  std::map<std::string, std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    const auto comma = line.find(',');
    if (comma != std::string::npos) out[line.substr(0, comma)] = line.substr(comma + 1);
  }
  return out;
}

cli::RunConfig desk_config(const fs::path& out) {
  cli::RunConfig cfg = cli::load_config(fs::path(SWP_SOURCE_DIR) / "configs" / "desk_cifar10.cfg");
  cfg.data_dir = SWP_CIFAR10_DIR;
  cfg.output_dir = out;
  cfg.deterministic = true;
  return cfg;
}

Outcome end_to_end(const fs::path& root) {
  const double start = cpu_seconds();
  const auto wall_start = std::chrono::steady_clock::now();
  cli::RunConfig cfg = desk_config(root / "desk");
  cli::cmd_train(cfg);
  cli::cmd_prune(cfg);
  const double secs = cpu_seconds() - start;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();

  const auto summary = read_summary(cfg.output_dir / "prune_summary.csv");
  const double base = std::stod(summary.at("baseline_test_top1")), final_top1 = std::stod(summary.at("final_test_top1"));
  const auto pruned = checkpoint::load(cfg.output_dir / "pruned.swpk");
  const auto sparsity = pruning::model_sparsity(pruned.model, *shared_transforms(cfg.instance));
  bool all_winograd = true;
  for (std::size_t li : pruned.model.conv_layers())
    all_winograd = all_winograd && pruned.model.layer(li).kind() == nn::LayerKind::WinogradConv;
  const double min_sparsity = *std::min_element(sparsity.begin(), sparsity.end());
  bool files = true;
  for (const char* f : {"history.csv", "sparsity_histogram.csv", "sparsity_positions.csv", "sparsity_heatmap.txt",
                        "MANIFEST.sha256"})
    files = files && fs::exists(cfg.output_dir / f);
  const bool ok = sparsity.size() == 4 && all_winograd && min_sparsity >= 0.5 && base - final_top1 <= 0.02 &&
                  secs <= 7200.0 && files;
  std::string layers;
  for (double s : sparsity) layers += fmt::format("{:.4f} ", s);
  return {ok, fmt::format("layer sparsity [{}], test top1 {:.4f} -> {:.4f} (drop {:.4f}), {:.0f} s CPU ({:.0f} s wall), "
                          "reports {}",
                          layers, base, final_top1, base - final_top1, secs, wall, files ? "written" : "MISSING")};
}

Outcome ablation_direction(const fs::path& root) {
  cli::RunConfig cfg = desk_config(root / "ablation");
  cfg.checkpoint = root / "desk" / "model.swpk";
  cfg.ablation_epochs = 0;
  const auto files = cli::cmd_ablation(cfg);
  // seed,scoring,sparsity,overall_sparsity,top1,baseline_top1
  std::map<std::string, std::map<std::string, std::vector<double>>> by_sparsity;
  std::ifstream in(files.at(0));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (std::stod(cells[2]) >= 0.6) by_sparsity[cells[2]][cells[1]].push_back(std::stod(cells[4]));
  }
  bool ok = !by_sparsity.empty();
  std::string detail;
  for (auto& [s, arms] : by_sparsity) {
    const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    const auto& a = arms["adjusted"];
    const auto& q = arms["magnitude"];
    const bool seeds = a.size() == 3 && q.size() == 3;
    ok = ok && seeds && mean(a) >= mean(q);
    detail += fmt::format("{:.2f}: Q^2F^2 {:.4f} vs |Q| {:.4f} ({} seeds); ", std::stod(s), mean(a), mean(q), a.size());
  }
  return {ok, detail};
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const fs::path& root) {
  std::vector<fs::path> outs;
  for (int k = 0; k < 2; ++k) {
    cli::RunConfig cfg = desk_config(root / fmt::format("determinism_{}", k));
    cfg.train_limit = 500;
    cfg.val_limit = 200;
    cfg.test_limit = 200;
    cfg.train.epochs = 2;
    cfg.schedule.steps = cli::parse_schedule("spatial:0.3:1,winograd:0.5:1");
    cfg.schedule.max_accuracy_drop = 1.0;
    fs::remove_all(cfg.output_dir);
    cli::cmd_train(cfg);
    cli::cmd_prune(cfg);
    outs.push_back(cfg.output_dir);
  }
  std::size_t compared = 0, identical = 0;
  for (const auto& entry : fs::directory_iterator(outs[0])) {
    const auto name = entry.path().filename();
    ++compared;
    identical += fs::exists(outs[1] / name) && read_text(entry.path()) == read_text(outs[1] / name);
  }
  return {compared >= 10 && identical == compared,
          fmt::format("{}/{} checkpoints, CSVs and reports bit-identical across two runs", identical, compared)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_run";
  fs::create_directories(root);
  set_single_threaded(true);
  const bool have_data = fs::exists(fs::path(SWP_CIFAR10_DIR) / "data_batch_1.bin");

  struct Criterion {
    const char* name;
    std::function<Outcome()> check;
    bool needs_data;
  };
  const std::vector<Criterion> criteria{
      {"transform correctness", transform_correctness, false},
      {"S/H reconstruction oracles", appendix_oracles, false},
      {"importance matrix", importance_matrix_check, false},
      {"exact sparsity transfer", sparsity_transfer, false},
      {"gradient checks", gradient_checks, false},
      {"multiply accounting", multiply_accounting, false},
      {"end-to-end desk run", [&] { return end_to_end(root); }, true},
      {"ablation direction", [&] { return ablation_direction(root); }, true},
      {"determinism", [&] { return determinism(root); }, true},
  };
  // Optional second argument: comma-separated 1-based criteria to run.
  std::vector<bool> selected(criteria.size(), argc <= 2);
  if (argc > 2) {
    std::stringstream list(argv[2]);
    for (std::string item; std::getline(list, item, ',');) selected.at(std::stoul(item) - 1) = true;
  }
  int failures = 0, ran = 0;
  std::string report;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!selected[k]) continue;
    ++ran;
    const auto& c = criteria[k];
    Outcome o;
    if (c.needs_data && !have_data) {
      o = {false, fmt::format("CIFAR-10 binaries not found in {}", SWP_CIFAR10_DIR)};
    } else {
      try {
        o = c.check();
      } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
      }
    }
    failures += !o.pass;
    const std::string line = fmt::format("{} {}: {}\n", o.pass ? "PASS" : "FAIL", c.name, o.detail);
    fmt::print("{}", line);
    std::fflush(stdout);
    report += line;
  }
  const std::string summary = fmt::format("{} of {} criteria passed\n", ran - failures, ran);
  fmt::print("{}", summary);
  fs::create_directories(root);
  std::ofstream(root / "acceptance_results.txt") << report << summary;
  return failures == 0 ? 0 : 1;
}
