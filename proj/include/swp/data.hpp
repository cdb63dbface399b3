#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swp/tensor.hpp"

namespace swp::data {

// Per-channel standardization applied after scaling pixels to [0, 1].
struct Normalization {
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> std{0.2470f, 0.2435f, 0.2616f};
};

struct Dataset {
  Tensor images;  // [N][C][H][W]
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  // Throws FormatError unless labels are in range and N > 0.
  void validate() const;
};

enum class Split { train, test };

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::size_t kCifarFileBytes = kCifarRecordBytes * kCifarRecordsPerFile;

// File names of the binary batches for a split, relative to the dataset directory.
std::vector<std::string> cifar10_files(Split split);

// Reads the CIFAR-10 binary batches. `limit` > 0 keeps only the first `limit`
// records in file order. Throws FormatError on missing or wrongly sized files
// and out-of-range label bytes.
Dataset load_cifar10(const std::filesystem::path& directory, Split split, const Normalization& norm = {},
                     std::size_t limit = 0);

// Decodes raw records (label byte + 3072 pixel bytes each).
Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const Normalization& norm, const std::string& split);

// Class-conditional Gaussian blob images, bit-identical for identical arguments.
Dataset synthetic_dataset(std::uint64_t seed, int classes, int n, int size, int channels = 3);

// In place: (x - mean) / std per channel, and the inverse.
void normalize(Tensor& images, const Normalization& norm);
void denormalize(Tensor& images, const Normalization& norm);

// Copies the selected records into a batch. With augment set, each image is
// flipped horizontally with probability 1/2 and shifted by a random 4-pixel
// pad-and-crop offset (zero fill).
Tensor gather_batch(const Dataset& ds, std::span<const std::size_t> indices, bool augment, std::mt19937_64& rng);
std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

// Records [begin, end), clamped to the dataset size.
Dataset slice(const Dataset& ds, std::size_t begin, std::size_t end);
inline Dataset take(const Dataset& ds, std::size_t count) { return slice(ds, 0, count); }

}  // namespace swp::data
