#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pas/graph.hpp"
#include "pas/tensor.hpp"

namespace pas {

// In-memory labelled images, stored as float N×C×H×W.
struct Dataset {
  InputShape shape;
  std::size_t num_classes = 0;
  std::vector<float> images;
  std::vector<int> labels;
  bool augment = false;  // random crop (pad 4) + horizontal flip when batching for training

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return shape.channels * shape.height * shape.width; }
  std::vector<std::size_t> class_histogram() const;
};

struct ChannelStats {
  std::vector<double> mean, stddev;
};

ChannelStats channel_stats(const Dataset& data);
void normalize(Dataset& data, const ChannelStats& stats);

template <typename T>
struct LabeledBatch {
  Tensor<T> images;
  std::vector<int> labels;
};

// Gaussian images labelled by the argmax of a fixed random conv teacher. Class
// biases of the teacher are shifted until every class is populated.
Dataset synthetic_teacher_dataset(std::uint64_t seed, std::size_t samples, std::size_t classes, InputShape shape);

// Records of 1 label byte + 3072 pixel bytes (3×32×32, channel-major).
Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& source = "buffer");
// Reads data_batch_*.bin (train) or test_batch.bin (test) from `dir`.
Dataset load_cifar10_binary(const std::filesystem::path& dir, bool train = true);

// IDX image (magic 0x803) and label (magic 0x801) files.
Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);
Dataset load_mnist_idx(const std::filesystem::path& dir, bool train = true);

// Deterministic shuffled split; the first part holds `first_fraction` of the samples.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double first_fraction, std::uint64_t seed);

// Sample order of one epoch: a pure function of (n, seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// Gathers `indices` into a batch. With `augment` and data.augment set, crops
// and flips are drawn from `aug_seed`.
template <typename T>
LabeledBatch<T> make_batch(const Dataset& data, std::span<const std::size_t> indices, bool augment = false,
                           std::uint64_t aug_seed = 0);

}  // namespace pas
