#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <unistd.h>

#include <gtest/gtest.h>

#include "swp/data.hpp"
#include "swp/error.hpp"
#include "swp/nn.hpp"
#include "swp/train.hpp"
#include "test_support.hpp"

namespace swp::data {
namespace {

namespace fs = std::filesystem;

std::vector<std::uint8_t> fake_records(std::size_t n, std::uint8_t label = 3) {
  std::vector<std::uint8_t> bytes(n * kCifarRecordBytes);
  for (std::size_t r = 0; r < n; ++r) {
    bytes[r * kCifarRecordBytes] = static_cast<std::uint8_t>((label + r) % 10);
    for (std::size_t p = 1; p < kCifarRecordBytes; ++p) bytes[r * kCifarRecordBytes + p] = static_cast<std::uint8_t>((p + r) % 256);
  }
  return bytes;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("swp_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(DecodeCifar10, LayoutAndNormalization) {
  const auto bytes = fake_records(2);
  const Normalization norm;
  const Dataset ds = decode_cifar10(bytes, norm, "test");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(ds.labels[0], 3);
  EXPECT_EQ(ds.labels[1], 4);
  // Record 1, green channel, row 2, column 5 is byte 1 + 1024 + 2 * 32 + 5 of the record.
  const std::size_t p = 1 + 1024 + 2 * 32 + 5;
  const float raw = static_cast<float>((p + 1) % 256) / 255.0f;
  EXPECT_FLOAT_EQ(ds.images.at(1, 1, 2, 5), (raw - norm.mean[1]) / norm.std[1]);
}

TEST(DecodeCifar10, RejectsBadLabel) {
  auto bytes = fake_records(2);
  bytes[kCifarRecordBytes] = 255;
  EXPECT_THROW(decode_cifar10(bytes, {}, "test"), FormatError);
  bytes[kCifarRecordBytes] = 9;
  EXPECT_NO_THROW(decode_cifar10(bytes, {}, "test"));
}

TEST(DecodeCifar10, RejectsPartialRecord) {
  auto bytes = fake_records(1);
  bytes.pop_back();
  EXPECT_THROW(decode_cifar10(bytes, {}, "test"), FormatError);
}

TEST(LoadCifar10, MissingFile) {
  const fs::path dir = temp_dir("missing");
  try {
    load_cifar10(dir, Split::test);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("test_batch.bin"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(LoadCifar10, TruncatedFileNamesByteCounts) {
  const fs::path dir = temp_dir("truncated");
  write_file(dir / "test_batch.bin", fake_records(10));
  try {
    load_cifar10(dir, Split::test);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(10 * kCifarRecordBytes)), std::string::npos) << msg;
    EXPECT_NE(msg.find("30730000"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(LoadCifar10, FullSizedSyntheticFile) {
  const fs::path dir = temp_dir("full");
  write_file(dir / "test_batch.bin", fake_records(kCifarRecordsPerFile));
  const Dataset ds = load_cifar10(dir, Split::test);
  EXPECT_EQ(ds.size(), 10000u);
  const Dataset head = load_cifar10(dir, Split::test, {}, 25);
  EXPECT_EQ(head.size(), 25u);
  EXPECT_EQ(head.labels[24], ds.labels[24]);
  fs::remove_all(dir);
}

#ifdef SWP_CIFAR10_DIR
TEST(LoadCifar10, RealTestSplit) {
  const fs::path dir = SWP_CIFAR10_DIR;
  if (!fs::exists(dir / "test_batch.bin")) GTEST_SKIP() << "CIFAR-10 not present at " << dir;
  const Dataset ds = load_cifar10(dir, Split::test);
  EXPECT_EQ(ds.size(), 10000u);
  std::vector<int> counts(10, 0);
  for (int l : ds.labels) ++counts.at(l);
  for (int c : counts) EXPECT_EQ(c, 1000);
}
#endif

TEST(Normalization, Invertible) {
  std::mt19937_64 rng(1);
  Tensor x = test::random_tensor({4, 3, 5, 5}, rng, 0.0f, 1.0f);
  const Tensor original = x;
  normalize(x, {});
  EXPECT_NE(x, original);
  denormalize(x, {});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], original[i], 1e-6);
}

TEST(Synthetic, Deterministic) {
  const Dataset a = synthetic_dataset(7, 4, 64, 8), b = synthetic_dataset(7, 4, 64, 8);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  const Dataset c = synthetic_dataset(8, 4, 64, 8);
  EXPECT_NE(a.images, c.images);
  EXPECT_NO_THROW(a.validate());
  EXPECT_THROW(synthetic_dataset(1, 1, 10, 8), ConfigError);
}

// Logistic regression on raw pixels, trained by full-batch gradient descent
// on the first half and scored on the second.
TEST(Synthetic, LinearlySeparable) {
  const Dataset ds = synthetic_dataset(3, 2, 512, 16);
  const std::size_t d = ds.images.size() / ds.size();
  std::vector<double> w(d, 0.0);
  double bias = 0.0;
  const std::size_t half = ds.size() / 2;
  const auto score = [&](std::size_t i) {
    double z = bias;
    for (std::size_t k = 0; k < d; ++k) z += w[k] * ds.images[i * d + k];
    return z;
  };
  for (int it = 0; it < 200; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < half; ++i) {
      const double err = 1.0 / (1.0 + std::exp(-score(i))) - ds.labels[i];
      for (std::size_t k = 0; k < d; ++k) gw[k] += err * ds.images[i * d + k];
      gb += err;
    }
    for (std::size_t k = 0; k < d; ++k) w[k] -= 0.01 * gw[k] / half;
    bias -= 0.01 * gb / half;
  }
  std::size_t correct = 0;
  for (std::size_t i = half; i < ds.size(); ++i) correct += (score(i) > 0) == (ds.labels[i] == 1);
  EXPECT_GT(static_cast<double>(correct) / (ds.size() - half), 0.9);
}

TEST(Synthetic, TwoConvModelLearnsQuickly) {
  const Dataset all = synthetic_dataset(11, 10, 2500, 16);
  const Dataset train_set = slice(all, 0, 2000), eval_set = slice(all, 2000, 2500);
  EXPECT_EQ(eval_set.size(), 500u);
  EXPECT_EQ(eval_set.labels[0], all.labels[2000]);
  nn::Model model = nn::build_model("conv8,bn,relu,pool,conv16,bn,relu,pool,flatten,dense10", {3, 16, 16}, 1);
  nn::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.sgd.learning_rate = 0.05;
  std::mt19937_64 rng(1);
  nn::train(model, train_set, nullptr, cfg, rng);
  EXPECT_GE(nn::evaluate(model, eval_set).top1, 0.95);
}

TEST(Batching, GatherWithoutAugmentCopies) {
  const Dataset ds = synthetic_dataset(2, 3, 10, 8);
  std::mt19937_64 rng(0);
  const std::vector<std::size_t> idx{4, 1};
  const Tensor b = gather_batch(ds, idx, false, rng);
  EXPECT_EQ(b.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_EQ(b.at(0, 2, 3, 4), ds.images.at(4, 2, 3, 4));
  EXPECT_EQ(b.at(1, 0, 7, 7), ds.images.at(1, 0, 7, 7));
  EXPECT_EQ(gather_labels(ds, idx), (std::vector<int>{ds.labels[4], ds.labels[1]}));
  const std::vector<std::size_t> bad{10};
  EXPECT_THROW(gather_batch(ds, bad, false, rng), ShapeError);
}

TEST(Batching, AugmentIsShiftOrFlip) {
  const Dataset ds = synthetic_dataset(2, 3, 4, 12);
  std::mt19937_64 rng(5);
  const std::vector<std::size_t> idx{0};
  const Tensor b = gather_batch(ds, idx, true, rng);
  // Every nonzero output pixel must come from the same channel of the source
  // under one flip/shift; find it by brute force.
  bool found = false;
  for (int mirror = 0; mirror < 2 && !found; ++mirror)
    for (int dy = -4; dy <= 4 && !found; ++dy)
      for (int dx = -4; dx <= 4 && !found; ++dx) {
        bool ok = true;
        for (int c = 0; c < 3 && ok; ++c)
          for (int y = 0; y < 12 && ok; ++y)
            for (int x = 0; x < 12 && ok; ++x) {
              const int sy = y + dy, sx0 = x + dx, sx = mirror ? 11 - sx0 : sx0;
              const float expected = (sy >= 0 && sy < 12 && sx0 >= 0 && sx0 < 12) ? ds.images.at(0, c, sy, sx) : 0.0f;
              ok = b.at(0, c, y, x) == expected;
            }
        found = ok;
      }
  EXPECT_TRUE(found);
}

}  // namespace
}  // namespace swp::data
