#include "swp/cli.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <functional>
#include <regex>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "swp/checkpoint.hpp"
#include "swp/conv.hpp"
#include "swp/error.hpp"
#include "swp/gemm.hpp"

namespace swp::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError(fmt::format("config key '{}': value '{}' {}", key, value, why));
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v, "is not a number");
  }
  if (used != v.size() || !std::isfinite(out)) bad_value(key, v, "is not a finite number");
  return out;
}

long long to_integer(const std::string& key, const std::string& v, long long lo) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    bad_value(key, v, "is not an integer");
  }
  if (used != v.size()) bad_value(key, v, "is not an integer");
  if (out < lo) bad_value(key, v, fmt::format("must be >= {}", lo));
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "is not a boolean");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split(v, ',')) out.push_back(to_double(key, item));
  if (out.empty()) bad_value(key, v, "is an empty list");
  return out;
}

std::array<float, 3> to_triple(const std::string& key, const std::string& v) {
  const auto list = to_list(key, v);
  if (list.size() != 3) bad_value(key, v, "needs three comma-separated values");
  return {static_cast<float>(list[0]), static_cast<float>(list[1]), static_cast<float>(list[2])};
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value, const fs::path& base)>;

fs::path resolve(const fs::path& base, const std::string& v) {
  const fs::path p(v);
  return p.is_absolute() ? p : fs::weakly_canonical(base / p);
}

const std::map<std::string, Setter>& setters() {
  using K = const std::string&;
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, K k, K v, auto&) { c.seed = static_cast<std::uint64_t>(to_integer(k, v, 0)); }},
      {"deterministic", [](RunConfig& c, K k, K v, auto&) { c.deterministic = to_bool(k, v); }},
      {"output_dir", [](RunConfig& c, K, K v, const fs::path& b) { c.output_dir = resolve(b, v); }},
      {"dataset",
       [](RunConfig& c, K k, K v, auto&) {
         if (v != "synthetic" && v != "cifar10") bad_value(k, v, "must be synthetic or cifar10");
         c.dataset = v;
       }},
      {"data_dir", [](RunConfig& c, K, K v, const fs::path& b) { c.data_dir = resolve(b, v); }},
      {"train_limit", [](RunConfig& c, K k, K v, auto&) { c.train_limit = to_integer(k, v, 1); }},
      {"val_limit", [](RunConfig& c, K k, K v, auto&) { c.val_limit = to_integer(k, v, 1); }},
      {"test_limit", [](RunConfig& c, K k, K v, auto&) { c.test_limit = to_integer(k, v, 1); }},
      {"synthetic_classes", [](RunConfig& c, K k, K v, auto&) { c.synthetic_classes = to_integer(k, v, 2); }},
      {"synthetic_size", [](RunConfig& c, K k, K v, auto&) { c.synthetic_size = to_integer(k, v, 1); }},
      {"synthetic_train", [](RunConfig& c, K k, K v, auto&) { c.synthetic_train = to_integer(k, v, 1); }},
      {"synthetic_val", [](RunConfig& c, K k, K v, auto&) { c.synthetic_val = to_integer(k, v, 1); }},
      {"synthetic_test", [](RunConfig& c, K k, K v, auto&) { c.synthetic_test = to_integer(k, v, 1); }},
      {"norm_mean", [](RunConfig& c, K k, K v, auto&) { c.normalization.mean = to_triple(k, v); }},
      {"norm_std", [](RunConfig& c, K k, K v, auto&) { c.normalization.std = to_triple(k, v); }},
      {"topology", [](RunConfig& c, K, K v, auto&) { c.topology = v; }},
      {"instance_m", [](RunConfig& c, K k, K v, auto&) { c.instance.m = to_integer(k, v, 2); }},
      {"instance_n", [](RunConfig& c, K k, K v, auto&) { c.instance.n = to_integer(k, v, 1); }},
      {"instance_points",
       [](RunConfig& c, K k, K v, auto&) {
         c.instance.points.clear();
         for (const auto& p : split(v, ',')) {
           try {
             c.instance.points.push_back(parse_rational(p));
           } catch (const std::exception&) {
             bad_value(k, v, "contains a malformed rational");
           }
         }
       }},
      {"epochs", [](RunConfig& c, K k, K v, auto&) { c.train.epochs = to_integer(k, v, 0); }},
      {"batch_size", [](RunConfig& c, K k, K v, auto&) { c.train.batch_size = to_integer(k, v, 1); }},
      {"learning_rate", [](RunConfig& c, K k, K v, auto&) { c.train.sgd.learning_rate = to_double(k, v); }},
      {"momentum", [](RunConfig& c, K k, K v, auto&) { c.train.sgd.momentum = to_double(k, v); }},
      {"weight_decay", [](RunConfig& c, K k, K v, auto&) { c.train.sgd.weight_decay = to_double(k, v); }},
      {"cosine", [](RunConfig& c, K k, K v, auto&) { c.train.cosine = to_bool(k, v); }},
      {"augment", [](RunConfig& c, K k, K v, auto&) { c.train.augment = to_bool(k, v); }},
      {"checkpoint", [](RunConfig& c, K, K v, const fs::path& b) { c.checkpoint = resolve(b, v); }},
      {"schedule", [](RunConfig& c, K, K v, auto&) { c.schedule.steps = parse_schedule(v); }},
      {"schedule_mode",
       [](RunConfig& c, K k, K v, auto&) {
         if (v != "sparsity" && v != "threshold") bad_value(k, v, "must be sparsity or threshold");
         c.threshold_mode = v == "threshold";
       }},
      {"max_accuracy_drop", [](RunConfig& c, K k, K v, auto&) { c.schedule.max_accuracy_drop = to_double(k, v); }},
      {"scoring",
       [](RunConfig& c, K k, K v, auto&) {
         if (v != "adjusted" && v != "magnitude") bad_value(k, v, "must be adjusted or magnitude");
         c.schedule.scoring = v == "adjusted" ? pruning::Scoring::adjusted : pruning::Scoring::magnitude;
       }},
      {"spatial_learning_rate", [](RunConfig& c, K k, K v, auto&) { c.spatial_learning_rate = to_double(k, v); }},
      {"winograd_learning_rate", [](RunConfig& c, K k, K v, auto&) { c.winograd_learning_rate = to_double(k, v); }},
      {"adjust_gradients", [](RunConfig& c, K k, K v, auto&) { c.adjust_gradients = to_bool(k, v); }},
      {"adjust_alpha", [](RunConfig& c, K k, K v, auto&) { c.train.sgd.adjust_alpha = to_double(k, v); }},
      {"probe_sparsity", [](RunConfig& c, K k, K v, auto&) { c.sensitivity.probe_sparsity = to_double(k, v); }},
      {"loss_budget", [](RunConfig& c, K k, K v, auto&) { c.sensitivity.loss_budget = to_double(k, v); }},
      {"sweep_step", [](RunConfig& c, K k, K v, auto&) { c.sensitivity.sweep_step = to_double(k, v); }},
      {"beta", [](RunConfig& c, K k, K v, auto&) { c.beta = to_double(k, v); }},
      {"bench_batch", [](RunConfig& c, K k, K v, auto&) { c.bench_batch = to_integer(k, v, 1); }},
      {"bench_in", [](RunConfig& c, K k, K v, auto&) { c.bench_in = to_integer(k, v, 1); }},
      {"bench_out", [](RunConfig& c, K k, K v, auto&) { c.bench_out = to_integer(k, v, 1); }},
      {"bench_size", [](RunConfig& c, K k, K v, auto&) { c.bench_size = to_integer(k, v, 1); }},
      {"bench_sparsities", [](RunConfig& c, K k, K v, auto&) { c.bench_sparsities = to_list(k, v); }},
      {"bench_repeats", [](RunConfig& c, K k, K v, auto&) { c.bench_repeats = to_integer(k, v, 1); }},
      {"ablation_seeds", [](RunConfig& c, K k, K v, auto&) { c.ablation_seeds = to_integer(k, v, 1); }},
      {"ablation_sparsities", [](RunConfig& c, K k, K v, auto&) { c.ablation_sparsities = to_list(k, v); }},
      {"ablation_sparsity", [](RunConfig& c, K k, K v, auto&) { c.ablation_sparsity = to_double(k, v); }},
      {"ablation_epochs", [](RunConfig& c, K k, K v, auto&) { c.ablation_epochs = to_integer(k, v, 0); }},
      {"ablation_learning_rates", [](RunConfig& c, K k, K v, auto&) { c.ablation_learning_rates = to_list(k, v); }},
      {"ablation_alphas", [](RunConfig& c, K k, K v, auto&) { c.ablation_alphas = to_list(k, v); }},
  };
  return table;
}

void check_fraction(const std::string& key, double v) {
  if (!(v >= 0.0 && v <= 1.0)) bad_value(key, fmt::format("{}", v), "must lie in [0, 1]");
}

}  // namespace

std::vector<pruning::PruneStep> parse_schedule(const std::string& text) {
  std::vector<pruning::PruneStep> steps;
  if (trim(text).empty()) return steps;
  for (const auto& entry : split(text, ',')) {
    const auto parts = split(entry, ':');
    if (parts.size() != 3) bad_value("schedule", entry, "must be phase:target:epochs");
    pruning::PruneStep s;
    s.phase = pruning::parse_phase(parts[0]);
    s.target = to_double("schedule", parts[1]);
    s.retrain_epochs = static_cast<int>(to_integer("schedule", parts[2], 0));
    steps.push_back(s);
  }
  return steps;
}

RunConfig parse_config(const std::string& text, const fs::path& base_dir) {
  static const std::regex layer_re(R"(layer(\d+))");
  RunConfig cfg;
  std::set<std::string> seen;
  bool instance_given = false, points_given = false;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("config line {}: expected key = value", line_no));
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(fmt::format("config line {}: empty key", line_no));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' is given twice");
    std::smatch match;
    if (std::regex_match(key, match, layer_re)) {
      const double v = to_double(key, value);
      check_fraction(key, v);
      cfg.schedule.overrides[std::stoul(match[1])] = v;
    } else if (key.starts_with("checksum.") && key.size() > 9) {
      cfg.checksums[key.substr(9)] = value;
    } else if (const auto it = setters().find(key); it != setters().end()) {
      it->second(cfg, key, value, base_dir);
      instance_given = instance_given || key == "instance_m" || key == "instance_n";
      points_given = points_given || key == "instance_points";
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  if (instance_given && !points_given) cfg.instance = WinogradInstance::with_default_points(cfg.instance.m, cfg.instance.n);
  try {
    cfg.instance.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config instance: ") + e.what());
  }
  cfg.train.validate();
  cfg.schedule.validate();
  check_fraction("probe_sparsity", cfg.sensitivity.probe_sparsity);
  check_fraction("ablation_sparsity", cfg.ablation_sparsity);
  for (double s : cfg.bench_sparsities) check_fraction("bench_sparsities", s);
  for (double s : cfg.ablation_sparsities) check_fraction("ablation_sparsities", s);
  if (cfg.beta < 0.0) bad_value("beta", fmt::format("{}", cfg.beta), "must be >= 0");
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), fs::absolute(path).parent_path());
}

Splits load_splits(const RunConfig& cfg) {
  Splits s;
  if (cfg.dataset == "synthetic") {
    const int total = cfg.synthetic_train + cfg.synthetic_val + cfg.synthetic_test;
    const data::Dataset all = data::synthetic_dataset(cfg.seed, cfg.synthetic_classes, total, cfg.synthetic_size);
    s.train = data::slice(all, 0, cfg.synthetic_train);
    s.val = data::slice(all, cfg.synthetic_train, cfg.synthetic_train + cfg.synthetic_val);
    s.test = data::slice(all, cfg.synthetic_train + cfg.synthetic_val, total);
    s.val.split = "val";
    s.test.split = "test";
    return s;
  }
  if (cfg.data_dir.empty()) throw ConfigError("config key 'data_dir' is required for dataset cifar10");
  for (const auto& [file, digest] : cfg.checksums) {
    const std::string actual = checkpoint::file_sha256(cfg.data_dir / file);
    if (actual != digest)
      throw FormatError(fmt::format("checksum mismatch for {}: expected {}, got {}", (cfg.data_dir / file).string(),
                                    digest, actual));
  }
  const data::Dataset train =
      data::load_cifar10(cfg.data_dir, data::Split::train, cfg.normalization, cfg.train_limit + cfg.val_limit);
  if (train.size() < cfg.train_limit + cfg.val_limit)
    throw ConfigError(fmt::format("train_limit + val_limit = {} exceeds the {} training records",
                                  cfg.train_limit + cfg.val_limit, train.size()));
  s.train = data::slice(train, 0, cfg.train_limit);
  s.val = data::slice(train, cfg.train_limit, cfg.train_limit + cfg.val_limit);
  s.val.split = "val";
  s.test = data::load_cifar10(cfg.data_dir, data::Split::test, cfg.normalization, cfg.test_limit);
  return s;
}

namespace {

void prepare(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  set_single_threaded(cfg.deterministic);
}

void log_line(const std::string& s) { fmt::print(stderr, "{}\n", s); }

Shape sample_shape(const data::Dataset& ds) { return {ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)}; }

fs::path input_checkpoint(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? cfg.output_dir / "model.swpk" : cfg.checkpoint;
}

std::vector<std::string> layer_names(const nn::Model& model) {
  std::vector<std::string> names;
  for (std::size_t li : model.conv_layers()) names.push_back(fmt::format("{}_{}", li, model.layer(li).describe()));
  return names;
}

void write_key_values(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "key,value\n";
  for (const auto& [k, v] : rows) out << k << "," << v << "\n";
}

std::string num(double v) { return fmt::format("{:.17g}", v); }

std::string fraction(std::uint64_t a, std::uint64_t b) {
  const std::uint64_t g = std::gcd(a, b);
  return fmt::format("{}/{}", a / g, b / g);
}

nn::TrainConfig retrain_config(const RunConfig& cfg, double lr, bool adjust) {
  nn::TrainConfig tc = cfg.train;
  tc.sgd.learning_rate = lr;
  tc.adjust_winograd = adjust;
  tc.record_wall_time = !cfg.deterministic;
  return tc;
}

}  // namespace

void write_manifest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() != "MANIFEST.sha256")
      files.push_back(fs::relative(entry.path(), dir));
  std::sort(files.begin(), files.end());
  std::ofstream out(dir / "MANIFEST.sha256");
  if (!out) throw Error("cannot write manifest in " + dir.string());
  for (const auto& f : files) out << checkpoint::file_sha256(dir / f) << "  " << f.generic_string() << "\n";
}

std::vector<fs::path> cmd_train(const RunConfig& cfg) {
  prepare(cfg);
  const Splits splits = load_splits(cfg);
  nn::Model model = nn::build_model(cfg.topology, sample_shape(splits.train), cfg.seed, cfg.instance);
  std::mt19937_64 rng(cfg.seed);
  nn::TrainConfig tc = cfg.train;
  tc.record_wall_time = !cfg.deterministic;
  const auto rows = nn::train(model, splits.train, &splits.val, tc, rng, [](const nn::EpochLog& r) {
    log_line(fmt::format("epoch {} {} loss {:.4f} top1 {:.4f}", r.epoch, r.split, r.loss, r.top1));
  });
  const double test_top1 = nn::evaluate(model, splits.test).top1;
  log_line(fmt::format("test top1 {:.4f}", test_top1));

  const fs::path ckpt = cfg.output_dir / "model.swpk", log = cfg.output_dir / "train_log.csv",
                 summary = cfg.output_dir / "train_summary.csv";
  checkpoint::save(ckpt, model,
                   {{"seed", std::to_string(cfg.seed)}, {"dataset", cfg.dataset}, {"rng", checkpoint::rng_state(rng)}});
  nn::write_training_log(log, rows);
  write_key_values(summary, {{"val_top1", num(rows.empty() ? nn::evaluate(model, splits.val).top1 : rows.back().top1)},
                             {"test_top1", num(test_top1)},
                             {"model_sha256", checkpoint::model_hash(model)}});
  write_manifest(cfg.output_dir);
  return {ckpt, log, summary};
}

std::vector<LayerSparsityReport> sparsity_report(const nn::Model& model, const WinogradInstance& fallback) {
  const auto fallback_ts = shared_transforms(fallback);
  std::vector<LayerSparsityReport> out;
  for (std::size_t li : model.conv_layers()) {
    const nn::Layer& layer = model.layer(li);
    Tensor q;
    int m = 0;
    if (layer.kind() == nn::LayerKind::WinogradConv) {
      const auto& conv = static_cast<const nn::WinogradConv&>(layer);
      q = conv.q().value;
      m = conv.transforms().m();
    } else {
      const auto& w = static_cast<const nn::SpatialConv&>(layer).weight();
      Tensor masked = w.value;
      if (w.masked())
        for (std::size_t k = 0; k < masked.size(); ++k) masked[k] *= w.mask[k];
      q = weights_to_winograd(masked, *fallback_ts);
      m = fallback_ts->m();
    }
    LayerSparsityReport r;
    r.layer = li;
    r.name = layer.describe();
    r.m = m;
    const std::size_t mm = static_cast<std::size_t>(m) * m;
    r.filters = q.size() / mm;
    r.histogram.assign(mm + 1, 0);
    std::vector<std::size_t> zero_all(mm, 0), zero_nonempty(mm, 0);
    for (std::size_t f = 0; f < r.filters; ++f) {
      std::size_t zeros = 0;
      for (std::size_t k = 0; k < mm; ++k) zeros += q[f * mm + k] == 0.0f;
      ++r.histogram[zeros];
      const bool empty = zeros == mm;
      r.empty_filters += empty;
      for (std::size_t k = 0; k < mm; ++k)
        if (q[f * mm + k] == 0.0f) {
          ++zero_all[k];
          if (!empty) ++zero_nonempty[k];
        }
    }
    const std::size_t nonempty = r.filters - r.empty_filters;
    for (std::size_t k = 0; k < mm; ++k) {
      r.position_all.push_back(static_cast<double>(zero_all[k]) / static_cast<double>(r.filters));
      r.position_nonempty.push_back(nonempty ? static_cast<double>(zero_nonempty[k]) / static_cast<double>(nonempty)
                                             : 0.0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string ascii_heatmap(const std::vector<double>& grid, int m) {
  static const std::string ramp = " .:-=+*#%@";
  std::string out;
  for (int i = 0; i < m; ++i) {
    out += "  |";
    for (int j = 0; j < m; ++j) {
      const double v = std::clamp(grid[i * m + j], 0.0, 1.0);
      const auto level = std::min<std::size_t>(ramp.size() - 1, static_cast<std::size_t>(v * ramp.size()));
      out += std::string(2, ramp[level]);
    }
    out += "|  ";
    for (int j = 0; j < m; ++j) out += fmt::format(" {:4.2f}", grid[i * m + j]);
    out += "\n";
  }
  return out;
}

std::vector<fs::path> cmd_report_sparsity(const RunConfig& cfg, const fs::path& ckpt, const std::string& prefix) {
  fs::create_directories(cfg.output_dir);
  const checkpoint::Checkpoint c = checkpoint::load(ckpt);
  const auto reports = sparsity_report(c.model, cfg.instance);
  const fs::path hist = cfg.output_dir / (prefix + "_histogram.csv"),
                 pos = cfg.output_dir / (prefix + "_positions.csv"), map = cfg.output_dir / (prefix + "_heatmap.txt");
  std::ofstream h(hist), p(pos), t(map);
  if (!h || !p || !t) throw Error("cannot write sparsity reports in " + cfg.output_dir.string());
  h << "layer,name,pruned_in_filter,filters\n";
  p << "layer,name,i,j,sparsity_all_filters,sparsity_nonempty_filters\n";
  for (const auto& r : reports) {
    for (std::size_t b = 0; b < r.histogram.size(); ++b) h << fmt::format("{},{},{},{}\n", r.layer, r.name, b, r.histogram[b]);
    for (int i = 0; i < r.m; ++i)
      for (int j = 0; j < r.m; ++j)
        p << fmt::format("{},{},{},{},{},{}\n", r.layer, r.name, i, j, num(r.position_all[i * r.m + j]),
                         num(r.position_nonempty[i * r.m + j]));
    t << fmt::format("layer {} ({}): {} filters, {} fully pruned\n", r.layer, r.name, r.filters, r.empty_filters);
    t << "pruned-count histogram (bin: filters)\n ";
    for (std::size_t b = 0; b < r.histogram.size(); ++b)
      if (r.histogram[b]) t << fmt::format(" {}:{}", b, r.histogram[b]);
    t << "\nposition sparsity, all filters\n" << ascii_heatmap(r.position_all, r.m);
    t << "position sparsity, filters with a weight left\n" << ascii_heatmap(r.position_nonempty, r.m) << "\n";
  }
  h.close();
  p.close();
  t.close();
  write_manifest(cfg.output_dir);
  return {hist, pos, map};
}

std::vector<fs::path> cmd_sensitivity(const RunConfig& cfg) {
  prepare(cfg);
  const Splits splits = load_splits(cfg);
  checkpoint::Checkpoint c = checkpoint::load(input_checkpoint(cfg));
  const std::string before = checkpoint::model_hash(c.model);
  const auto table = pruning::sensitivity_scan(c.model, splits.val, cfg.instance, cfg.sensitivity);
  const std::string after = checkpoint::model_hash(c.model);
  if (before != after) throw Error("sensitivity scan did not restore the model");
  const fs::path csv = cfg.output_dir / "sensitivity.csv", thresholds = cfg.output_dir / "thresholds.csv";
  pruning::write_sensitivity_csv(csv, table);
  const auto t = pruning::calibrate_thresholds(table, cfg.beta);
  std::ofstream out(thresholds);
  out << "layer,name,beta,threshold\n";
  for (std::size_t k = 0; k < t.size(); ++k)
    out << fmt::format("{},{},{},{}\n", table.rows[k].layer, table.rows[k].name, num(cfg.beta), num(t[k]));
  out << fmt::format("# model sha256 before {} after {}\n", before, after);
  out.close();
  for (const auto& r : table.rows)
    log_line(fmt::format("layer {} {} probe loss {:.4f} threshold {:.5g}", r.layer, r.name, r.accuracy_loss,
                         r.threshold_2pct));
  write_manifest(cfg.output_dir);
  return {csv, thresholds};
}

std::vector<fs::path> cmd_prune(const RunConfig& cfg, const std::string& phase) {
  if (phase != "all" && phase != "spatial" && phase != "winograd")
    throw ConfigError("prune phase '" + phase + "' must be all, spatial or winograd");
  prepare(cfg);
  const Splits splits = load_splits(cfg);
  checkpoint::Checkpoint c = checkpoint::load(input_checkpoint(cfg));
  nn::Model model = std::move(c.model);

  pruning::PruneSchedule schedule = cfg.schedule;
  schedule.steps.clear();
  for (const auto& s : cfg.schedule.steps)
    if (phase == "all" || pruning::to_string(s.phase) == phase) schedule.steps.push_back(s);

  std::vector<fs::path> written;
  if (cfg.threshold_mode) {
    const auto table = pruning::sensitivity_scan(model, splits.val, cfg.instance, cfg.sensitivity);
    written.push_back(cfg.output_dir / "sensitivity.csv");
    pruning::write_sensitivity_csv(written.back(), table);
    for (auto& s : schedule.steps) {
      s.use_threshold = true;
      if (s.phase == pruning::Phase::spatial) s.layer_thresholds = pruning::calibrate_thresholds(table, s.target);
    }
  }
  schedule.validate();

  pruning::PipelineConfig pc;
  pc.instance = cfg.instance;
  const double spatial_lr = cfg.spatial_learning_rate.value_or(cfg.train.sgd.learning_rate);
  pc.spatial_retrain = retrain_config(cfg, spatial_lr, false);
  pc.winograd_retrain = retrain_config(cfg, cfg.winograd_learning_rate.value_or(spatial_lr / 10.0), cfg.adjust_gradients);
  std::mt19937_64 rng(cfg.seed);
  if (const auto it = c.metadata.find("rng"); it != c.metadata.end()) checkpoint::restore_rng(rng, it->second);

  const auto names = layer_names(model);
  const double baseline_test = nn::evaluate(model, splits.test).top1;
  const auto result = pruning::prune_pipeline(model, schedule, splits.train, splits.val, pc, rng);
  for (const auto& r : result.history)
    log_line(fmt::format("step {} {} {} sparsity {:.4f} val top1 {:.4f}", r.iteration, pruning::to_string(r.phase),
                         r.event, r.overall_sparsity, r.top1));
  const double final_test = nn::evaluate(model, splits.test).top1;

  const fs::path history = cfg.output_dir / "history.csv", ckpt = cfg.output_dir / "pruned.swpk",
                 summary = cfg.output_dir / "prune_summary.csv";
  pruning::write_history_csv(history, result.history, names);
  int accepted = 0;
  for (const auto& r : result.history) accepted = r.event == "prune" ? r.iteration : accepted;
  if (result.stopped || result.diverged) accepted = std::max(0, accepted - 1);
  checkpoint::save(ckpt, model,
                   {{"seed", std::to_string(cfg.seed)},
                    {"schedule_position", std::to_string(accepted)},
                    {"rng", checkpoint::rng_state(rng)}});

  double overall = 0.0;
  const auto sparsity = pruning::model_sparsity(model, *shared_transforms(cfg.instance), &overall);
  std::vector<std::pair<std::string, std::string>> rows{
      {"baseline_val_top1", num(result.history.empty() ? 0.0 : result.history.front().baseline_top1)},
      {"baseline_test_top1", num(baseline_test)},
      {"final_test_top1", num(final_test)},
      {"test_top1_drop", num(baseline_test - final_test)},
      {"overall_sparsity", num(overall)},
      {"stopped", result.stopped ? "true" : "false"},
      {"diverged", result.diverged ? "true" : "false"},
      {"accepted_steps", std::to_string(accepted)}};
  for (std::size_t k = 0; k < sparsity.size(); ++k) rows.emplace_back("sparsity_" + names[k], num(sparsity[k]));
  write_key_values(summary, rows);
  written.insert(written.end(), {history, ckpt, summary});
  const auto reports = cmd_report_sparsity(cfg, ckpt);
  written.insert(written.end(), reports.begin(), reports.end());
  write_manifest(cfg.output_dir);
  return written;
}

namespace {

template <typename F>
double best_seconds(int repeats, F&& f) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return best;
}

}  // namespace

std::vector<fs::path> cmd_bench(const RunConfig& cfg) {
  prepare(cfg);
  const fs::path csv = cfg.output_dir / "bench.csv";
  std::ofstream out(csv);
  if (!out) throw Error("cannot write " + csv.string());
  out << "instance,kernel,sparsity,nnz,tiles,batch,elementwise_mults,expected_mults,mult_ratio_vs_direct,"
         "expected_ratio_vs_direct,expected_ratio_exact,seconds,speedup_vs_dense_winograd\n";
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<WinogradInstance> instances{WinogradInstance::with_default_points(4, cfg.instance.n)};
  if (!(cfg.instance == instances.front())) instances.push_back(cfg.instance);

  Tensor x({cfg.bench_batch, cfg.bench_in, cfg.bench_size, cfg.bench_size});
  for (auto& v : x.values()) v = normal(rng);
  for (const auto& inst : instances) {
    const auto ts = shared_transforms(inst);
    const int n = inst.n, m = inst.m, r = inst.output_tile(), pad = (n - 1) / 2;
    const std::string name = fmt::format("F{}_{}", r, n);
    Tensor w({cfg.bench_out, cfg.bench_in, n, n});
    for (auto& v : w.values()) v = normal(rng);

    ConvCounters direct;
    const double direct_s = best_seconds(cfg.bench_repeats, [&] {
      direct = {};
      direct_conv2d(x, w, pad, &direct);
    });
    const auto geometry = make_tile_geometry(x.shape(), inst, pad);
    const std::uint64_t tiles = static_cast<std::uint64_t>(geometry.tiles());
    const std::uint64_t direct_expected = static_cast<std::uint64_t>(cfg.bench_batch) * cfg.bench_out * cfg.bench_in *
                                          n * n * geometry.out_h * geometry.out_w;
    out << fmt::format("{},direct,0,{},{},{},{},{},1,1,1/1,{},\n", name, w.size(), tiles, cfg.bench_batch,
                       direct.direct_mults, direct_expected, num(direct_s));

    const WinogradConvLayer dense = WinogradConvLayer::from_spatial(w, *ts, pad);
    ConvCounters dc;
    const double dense_s = best_seconds(cfg.bench_repeats, [&] {
      dc = {};
      winograd_conv_layer(x, dense, *ts, &dc);
    });
    const std::uint64_t dense_expected = static_cast<std::uint64_t>(cfg.bench_out) * cfg.bench_in * m * m * tiles *
                                         cfg.bench_batch;
    const double tiles_exact = static_cast<double>(geometry.out_h * geometry.out_w) / (r * r);
    out << fmt::format("{},winograd_dense,0,{},{},{},{},{},{},{},{},{},1\n", name, dense.q.size(), tiles,
                       cfg.bench_batch, dc.elementwise_mults, dense_expected,
                       num(static_cast<double>(dc.elementwise_mults) / static_cast<double>(direct.direct_mults)),
                       num(static_cast<double>(m * m) / (r * r * n * n) * (tiles / tiles_exact)), fraction(m * m, r * r * n * n),
                       num(dense_s));

    for (double sparsity : cfg.bench_sparsities) {
      WinogradConvLayer layer = dense;
      const auto flags = pruning::select_lowest(
          pruning::layer_winograd_importance(layer.q, ts->F(), pruning::Scoring::adjusted), sparsity);
      for (std::size_t k = 0; k < flags.size(); ++k)
        if (flags[k]) layer.mask[k] = 0.0f;
      layer.apply_mask();
      const SparseWinogradWeights sw = pack_sparse(layer);
      ConvCounters sc;
      const double sparse_s = best_seconds(cfg.bench_repeats, [&] {
        sc = {};
        sparse_winograd_conv_layer(x, sw, *ts, &sc);
      });
      const std::uint64_t expected = static_cast<std::uint64_t>(sw.nonzeros) * tiles * cfg.bench_batch;
      out << fmt::format("{},winograd_sparse,{},{},{},{},{},{},{},{},{},{},{}\n", name, num(sparsity), sw.nonzeros,
                         tiles, cfg.bench_batch, sc.elementwise_mults, expected,
                         num(static_cast<double>(sc.elementwise_mults) / static_cast<double>(direct.direct_mults)),
                         num(static_cast<double>(sw.nonzeros) / dense.q.size() * m * m / (r * r * n * n) *
                             (tiles / tiles_exact)),
                         fraction(sw.nonzeros * m * m, dense.q.size() * r * r * n * n), num(sparse_s), num(dense_s / sparse_s));
      log_line(fmt::format("{} sparsity {:.2f}: {} mults, {:.4f}s sparse vs {:.4f}s dense", name, sparsity,
                           sc.elementwise_mults, sparse_s, dense_s));
    }
  }
  out.close();
  write_manifest(cfg.output_dir);
  return {csv};
}

std::vector<fs::path> cmd_ablation(const RunConfig& cfg) {
  prepare(cfg);
  const Splits splits = load_splits(cfg);
  const fs::path importance_csv = cfg.output_dir / "ablation_importance.csv",
                 retrain_csv = cfg.output_dir / "ablation_retraining.csv";
  std::ofstream imp(importance_csv);
  if (!imp) throw Error("cannot write " + importance_csv.string());
  imp << "seed,scoring,sparsity,overall_sparsity,top1,baseline_top1\n";

  nn::Model first_converted;
  for (int k = 0; k < cfg.ablation_seeds; ++k) {
    const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(k);
    nn::Model model;
    if (k == 0 && !cfg.checkpoint.empty()) {
      model = checkpoint::load(cfg.checkpoint).model;
    } else {
      model = nn::build_model(cfg.topology, sample_shape(splits.train), seed, cfg.instance);
      std::mt19937_64 rng(seed);
      nn::TrainConfig tc = cfg.train;
      tc.record_wall_time = false;
      nn::train(model, splits.train, nullptr, tc, rng);
    }
    const nn::Model converted = pruning::convert_to_winograd(model, cfg.instance);
    if (k == 0) first_converted = converted;
    nn::Model base = converted;
    const double baseline = nn::evaluate(base, splits.test).top1;
    log_line(fmt::format("ablation seed {} baseline top1 {:.4f}", seed, baseline));
    for (double sparsity : cfg.ablation_sparsities)
      for (const auto scoring : {pruning::Scoring::adjusted, pruning::Scoring::magnitude}) {
        nn::Model probe = converted;
        const auto conv = probe.conv_layers();
        for (std::size_t c = 0; c < conv.size(); ++c) {
          const auto it = cfg.schedule.overrides.find(c);
          const double target = it != cfg.schedule.overrides.end() ? it->second : sparsity;
          pruning::prune_layer(probe.layer(conv[c]), *shared_transforms(cfg.instance), {target, 0.0, false, scoring});
        }
        double overall = 0.0;
        pruning::model_sparsity(probe, *shared_transforms(cfg.instance), &overall);
        const double top1 = nn::evaluate(probe, splits.test).top1;
        const std::string label = scoring == pruning::Scoring::adjusted ? "adjusted" : "magnitude";
        imp << fmt::format("{},{},{},{},{},{}\n", seed, label, num(sparsity), num(overall), num(top1), num(baseline));
        log_line(fmt::format("  {} at {:.2f}: top1 {:.4f}", label, sparsity, top1));
      }
  }
  imp.close();

  // Retraining ablation on the first model, pruned by q^2 F^2.
  std::ofstream ret(retrain_csv);
  if (!ret) throw Error("cannot write " + retrain_csv.string());
  ret << "mode,alpha,learning_rate,epoch,top1\n";
  nn::Model pruned = first_converted;
  const auto conv = pruned.conv_layers();
  for (std::size_t c = 0; c < conv.size(); ++c) {
    const auto it = cfg.schedule.overrides.find(c);
    pruning::prune_layer(pruned.layer(conv[c]), *shared_transforms(cfg.instance),
                         {it != cfg.schedule.overrides.end() ? it->second : cfg.ablation_sparsity, 0.0, false});
  }
  struct Arm {
    std::string mode;
    double alpha;
    double lr;
  };
  std::vector<Arm> arms;
  for (double lr : cfg.ablation_learning_rates) {
    arms.push_back({"plain", 0.0, lr});
    arms.push_back({"adjusted", 1.5, lr});
  }
  const double mid_lr = cfg.ablation_learning_rates[cfg.ablation_learning_rates.size() / 2];
  for (double a : cfg.ablation_alphas) arms.push_back({"alpha_sweep", a, mid_lr});
  for (const auto& arm : arms) {
    nn::Model m = pruned;
    std::mt19937_64 rng(cfg.seed);
    ret << fmt::format("{},{},{},0,{}\n", arm.mode, num(arm.alpha), num(arm.lr), num(nn::evaluate(m, splits.test).top1));
    nn::TrainConfig tc = retrain_config(cfg, arm.lr, arm.mode != "plain");
    tc.sgd.adjust_alpha = arm.alpha;
    tc.cosine = false;
    tc.epochs = 1;
    for (int e = 1; e <= cfg.ablation_epochs; ++e) {
      nn::train(m, splits.train, nullptr, tc, rng);
      const double top1 = nn::evaluate(m, splits.test).top1;
      ret << fmt::format("{},{},{},{},{}\n", arm.mode, num(arm.alpha), num(arm.lr), e, num(top1));
      log_line(fmt::format("  {} alpha {} lr {} epoch {}: top1 {:.4f}", arm.mode, arm.alpha, arm.lr, e, top1));
    }
  }
  ret.close();
  write_manifest(cfg.output_dir);
  return {importance_csv, retrain_csv};
}

std::vector<fs::path> cmd_gen_transforms(const RunConfig& cfg) {
  prepare(cfg);
  const auto ts = shared_transforms(cfg.instance);
  const fs::path csv = cfg.output_dir / fmt::format("transforms_F{}_{}.csv", ts->r(), ts->n());
  std::ofstream out(csv);
  if (!out) throw Error("cannot write " + csv.string());
  out << "matrix,row,col,value\n";
  const auto dump = [&](const char* name, const Matrix& mat) {
    for (int i = 0; i < mat.rows(); ++i)
      for (int j = 0; j < mat.cols(); ++j) out << fmt::format("{},{},{},{}\n", name, i, j, num(mat(i, j)));
  };
  dump("A", ts->A());
  dump("B", ts->B());
  dump("G", ts->G());
  for (int i = 0; i < ts->m(); ++i)
    for (int j = 0; j < ts->m(); ++j) out << fmt::format("F,{},{},{}\n", i, j, num(ts->F()(i, j)));
  out.close();
  write_manifest(cfg.output_dir);
  return {csv};
}

int run(int argc, char** argv) {
  CLI::App app{"Spatial-Winograd pruning toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_dir, phase = "all", report_checkpoint;
  std::uint64_t seed = 0;
  bool deterministic = false;
  auto* config_opt = app.add_option("--config", config_path, "key=value run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
  app.add_flag("--deterministic", deterministic, "single-threaded, reproducible run");
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides output_dir)");

  auto* train = app.add_subcommand("train", "train the dense model");
  auto* prune = app.add_subcommand("prune", "two-phase pruning with retraining");
  prune->add_option("--phase", phase, "all, spatial or winograd");
  auto* sensitivity = app.add_subcommand("sensitivity", "per-layer sensitivity scan");
  auto* bench = app.add_subcommand("bench", "multiply counts and kernel timings");
  auto* report = app.add_subcommand("report-sparsity", "sparsity distribution of a checkpoint");
  report->add_option("--checkpoint", report_checkpoint, "checkpoint to inspect");
  auto* ablation = app.add_subcommand("ablation", "importance and gradient-adjustment ablations");
  auto* gen = app.add_subcommand("gen-transforms", "write A, B, G and F as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    RunConfig cfg = config_opt->count() ? load_config(config_path) : parse_config("");
    if (seed_opt->count()) cfg.seed = seed;
    if (deterministic) cfg.deterministic = true;
    if (out_opt->count()) cfg.output_dir = fs::absolute(out_dir);
    std::vector<fs::path> written;
    if (train->parsed()) written = cmd_train(cfg);
    if (prune->parsed()) written = cmd_prune(cfg, phase);
    if (sensitivity->parsed()) written = cmd_sensitivity(cfg);
    if (bench->parsed()) written = cmd_bench(cfg);
    if (report->parsed())
      written = cmd_report_sparsity(cfg, report_checkpoint.empty() ? input_checkpoint(cfg) : fs::path(report_checkpoint));
    if (ablation->parsed()) written = cmd_ablation(cfg);
    if (gen->parsed()) written = cmd_gen_transforms(cfg);
    for (const auto& f : written) fmt::print("{}\n", f.string());
    return kExitOk;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace swp::cli
