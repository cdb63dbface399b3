#include "swp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "swp/error.hpp"

namespace swp::data {

void Dataset::validate() const {
  if (labels.empty()) throw FormatError("dataset '" + split + "' is empty");
  if (images.rank() != 4 || static_cast<std::size_t>(images.dim(0)) != labels.size())
    throw FormatError("dataset '" + split + "' image tensor " + shape_to_string(images.shape()) + " does not match " +
                      std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw FormatError("dataset '" + split + "' record " + std::to_string(i) + " has label " +
                        std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes) + ")");
}

std::vector<std::string> cifar10_files(Split split) {
  if (split == Split::test) return {"test_batch.bin"};
  std::vector<std::string> out;
  for (int i = 1; i <= 5; ++i) out.push_back("data_batch_" + std::to_string(i) + ".bin");
  return out;
}

void normalize(Tensor& images, const Normalization& norm) {
  const int N = images.dim(0), C = images.dim(1), S = images.dim(2) * images.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* p = images.data() + (static_cast<std::size_t>(n) * C + c) * S;
      for (int s = 0; s < S; ++s) p[s] = (p[s] - norm.mean[c % 3]) / norm.std[c % 3];
    }
}

void denormalize(Tensor& images, const Normalization& norm) {
  const int N = images.dim(0), C = images.dim(1), S = images.dim(2) * images.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* p = images.data() + (static_cast<std::size_t>(n) * C + c) * S;
      for (int s = 0; s < S; ++s) p[s] = p[s] * norm.std[c % 3] + norm.mean[c % 3];
    }
}

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const Normalization& norm, const std::string& split) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError("CIFAR-10 data of " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                      std::to_string(kCifarRecordBytes) + "-byte records");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.split = split;
  ds.num_classes = 10;
  ds.images = Tensor({static_cast<int>(n), 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError("CIFAR-10 record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    ds.labels[r] = rec[0];
    float* img = ds.images.data() + r * (kCifarRecordBytes - 1);
    for (std::size_t p = 0; p + 1 < kCifarRecordBytes; ++p) img[p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  if (n > 0) normalize(ds.images, norm);
  return ds;
}

Dataset load_cifar10(const std::filesystem::path& directory, Split split, const Normalization& norm,
                     std::size_t limit) {
  std::vector<std::uint8_t> bytes;
  for (const auto& name : cifar10_files(split)) {
    const auto path = directory / name;
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw FormatError("missing CIFAR-10 file " + path.string());
    if (size != kCifarFileBytes)
      throw FormatError("CIFAR-10 file " + path.string() + " has " + std::to_string(size) + " bytes, expected " +
                        std::to_string(kCifarFileBytes));
    std::size_t want = kCifarFileBytes;
    if (limit > 0) {
      const std::size_t have = bytes.size() / kCifarRecordBytes;
      if (have >= limit) break;
      want = std::min(kCifarRecordsPerFile, limit - have) * kCifarRecordBytes;
    }
    std::ifstream in(path, std::ios::binary);
    const std::size_t offset = bytes.size();
    bytes.resize(offset + want);
    if (!in.read(reinterpret_cast<char*>(bytes.data() + offset), static_cast<std::streamsize>(want)))
      throw FormatError("short read from " + path.string());
  }
  Dataset ds = decode_cifar10(bytes, norm, split == Split::train ? "train" : "test");
  ds.validate();
  return ds;
}

Dataset synthetic_dataset(std::uint64_t seed, int classes, int n, int size, int channels) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (n < 1 || size < 1 || channels < 1) throw ConfigError("synthetic dataset dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 0.35f);

  // Each class prototype is a sum of three Gaussian bumps with per-channel signs.
  const int S = size * size;
  std::vector<float> protos(static_cast<std::size_t>(classes) * channels * S, 0.0f);
  for (int k = 0; k < classes; ++k)
    for (int bump = 0; bump < 3; ++bump) {
      const float cy = unit(rng) * size, cx = unit(rng) * size;
      const float sigma = size * (0.12f + 0.1f * unit(rng));
      for (int c = 0; c < channels; ++c) {
        const float amp = unit(rng) < 0.5f ? -1.0f : 1.0f;
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const float d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            protos[(static_cast<std::size_t>(k) * channels + c) * S + y * size + x] +=
                amp * std::exp(-d2 / (2.0f * sigma * sigma));
          }
      }
    }

  Dataset ds;
  ds.split = "synthetic";
  ds.num_classes = classes;
  ds.images = Tensor({n, channels, size, size});
  ds.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int k = i % classes;
    ds.labels[i] = k;
    float* img = ds.images.data() + static_cast<std::size_t>(i) * channels * S;
    const float* proto = protos.data() + static_cast<std::size_t>(k) * channels * S;
    for (int p = 0; p < channels * S; ++p) img[p] = proto[p] + noise(rng);
  }
  return ds;
}

Tensor gather_batch(const Dataset& ds, std::span<const std::size_t> indices, bool augment, std::mt19937_64& rng) {
  const int C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
  const std::size_t per = static_cast<std::size_t>(C) * H * W;
  Tensor batch({static_cast<int>(indices.size()), C, H, W});
  std::uniform_int_distribution<int> shift(-4, 4);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= ds.size()) throw ShapeError("batch index " + std::to_string(indices[b]) + " out of range");
    const float* src = ds.images.data() + indices[b] * per;
    float* dst = batch.data() + b * per;
    if (!augment) {
      std::copy_n(src, per, dst);
      continue;
    }
    const bool mirror = flip(rng);
    const int dy = shift(rng), dx = shift(rng);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int sy = y + dy, sx0 = x + dx;
          const int sx = mirror ? W - 1 - sx0 : sx0;
          dst[(static_cast<std::size_t>(c) * H + y) * W + x] =
              (sy >= 0 && sy < H && sx0 >= 0 && sx0 < W) ? src[(static_cast<std::size_t>(c) * H + sy) * W + sx] : 0.0f;
        }
  }
  return batch;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(ds.labels.at(i));
  return out;
}

Dataset slice(const Dataset& ds, std::size_t begin, std::size_t end) {
  end = std::min(end, ds.size());
  begin = std::min(begin, end);
  Dataset out;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  Shape s = ds.images.shape();
  const std::size_t per = ds.images.size() / std::max<std::size_t>(ds.size(), 1);
  s[0] = static_cast<int>(end - begin);
  const auto first = ds.images.values().begin() + static_cast<std::ptrdiff_t>(begin * per);
  out.images = Tensor(s, std::vector<float>(first, first + static_cast<std::ptrdiff_t>((end - begin) * per)));
  out.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

}  // namespace swp::data
