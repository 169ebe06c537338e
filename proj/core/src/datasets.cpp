#include "pas/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "pas/error.hpp"
#include "pas/ops.hpp"
#include "pas/random.hpp"

namespace pas {

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (int l : labels) h.at(static_cast<std::size_t>(l)) += 1;
  return h;
}

ChannelStats channel_stats(const Dataset& data) {
  const std::size_t c = data.shape.channels;
  const std::size_t area = data.shape.height * data.shape.width;
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.stddev.assign(c, 0.0);
  if (data.size() == 0) return st;
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = data.images.data() + (n * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) st.mean[ch] += p[i];
    }
  }
  const double count = static_cast<double>(data.size() * area);
  for (auto& m : st.mean) m /= count;
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = data.images.data() + (n * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) {
        const double d = p[i] - st.mean[ch];
        st.stddev[ch] += d * d;
      }
    }
  }
  for (auto& s : st.stddev) s = std::sqrt(s / count);
  return st;
}

void normalize(Dataset& data, const ChannelStats& stats) {
  const std::size_t c = data.shape.channels;
  if (stats.mean.size() != c || stats.stddev.size() != c) {
    throw DimensionError("normalize: statistics for " + std::to_string(stats.mean.size()) + " channels, data has " +
                         std::to_string(c));
  }
  const std::size_t area = data.shape.height * data.shape.width;
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double sd = stats.stddev[ch] > 0 ? stats.stddev[ch] : 1.0;
      float* p = data.images.data() + (n * c + ch) * area;
      for (std::size_t i = 0; i < area; ++i) p[i] = static_cast<float>((p[i] - stats.mean[ch]) / sd);
    }
  }
}

Dataset synthetic_teacher_dataset(std::uint64_t seed, std::size_t samples, std::size_t classes, InputShape shape) {
  if (classes < 2) throw ConfigKeyError("classes", "synthetic dataset needs at least 2 classes");
  if (samples < classes) {
    throw ConfigKeyError("samples", "synthetic dataset needs samples >= classes (" + std::to_string(samples) + " < " +
                                        std::to_string(classes) + ")");
  }
  Dataset data;
  data.shape = shape;
  data.num_classes = classes;
  data.images.resize(samples * data.image_size());
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  // Each image is a Gaussian mix of a few fixed smooth patterns plus pixel
  // noise, so labels depend on a low-dimensional latent.
  constexpr std::size_t kLatent = 8;
  constexpr double kNoise = 0.3;
  const std::size_t sz = data.image_size();
  const std::size_t ih = shape.height, iw = shape.width;
  std::vector<double> patterns(kLatent * sz);
  for (auto& v : patterns) v = normal(rng);
  for (std::size_t pass = 0; pass < 2; ++pass) {
    std::vector<double> blurred(patterns.size(), 0.0);
    for (std::size_t p = 0; p < kLatent * shape.channels; ++p) {
      const double* src = patterns.data() + p * ih * iw;
      double* dst = blurred.data() + p * ih * iw;
      for (std::size_t y = 0; y < ih; ++y) {
        for (std::size_t x = 0; x < iw; ++x) {
          double acc = 0.0;
          int count = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = static_cast<int>(y) + dy, xx = static_cast<int>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<int>(ih) || xx >= static_cast<int>(iw)) continue;
              acc += src[static_cast<std::size_t>(yy) * iw + static_cast<std::size_t>(xx)];
              ++count;
            }
          }
          dst[y * iw + x] = acc / count;
        }
      }
    }
    patterns.swap(blurred);
  }
  for (std::size_t j = 0; j < kLatent; ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < sz; ++i) sq += patterns[j * sz + i] * patterns[j * sz + i];
    const double norm = std::sqrt(sq / static_cast<double>(sz)) + 1e-12;
    for (std::size_t i = 0; i < sz; ++i) patterns[j * sz + i] /= norm;
  }
  std::vector<double> z(kLatent);
  for (std::size_t n = 0; n < samples; ++n) {
    for (auto& v : z) v = normal(rng);
    float* img = data.images.data() + n * sz;
    for (std::size_t i = 0; i < sz; ++i) {
      double v = kNoise * normal(rng);
      for (std::size_t j = 0; j < kLatent; ++j) v += z[j] * patterns[j * sz + i] / std::sqrt(double(kLatent));
      img[i] = static_cast<float>(v);
    }
  }

  // Teacher: conv3×3 → relu → conv3×3/2 → relu → global pool → linear.
  constexpr std::size_t kHidden = 16;
  std::mt19937_64 trng(mix_seed(seed, 2));
  auto random_tensor = [&](Shape s, double sd) {
    Tensor<double> t(s);
    for (auto& v : t.data()) v = sd * normal(trng);
    return t;
  };
  const Tensor<double> k1 = random_tensor({kHidden, shape.channels, 3, 3}, std::sqrt(2.0 / (9.0 * shape.channels)));
  const Tensor<double> k2 = random_tensor({kHidden, kHidden, 3, 3}, std::sqrt(2.0 / (9.0 * kHidden)));
  const Tensor<double> w = random_tensor({classes, kHidden}, std::sqrt(1.0 / kHidden));

  std::vector<double> logits(samples * classes);
  {
    NoGradGuard guard;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < samples; start += kChunk) {
      const std::size_t n = std::min(kChunk, samples - start);
      std::vector<double> buf(data.images.begin() + static_cast<std::ptrdiff_t>(start * data.image_size()),
                              data.images.begin() + static_cast<std::ptrdiff_t>((start + n) * data.image_size()));
      Tensor<double> x({n, shape.channels, shape.height, shape.width}, std::move(buf));
      Tensor<double> h = relu(conv2d(x, k1, Tensor<double>{}, {1, 1}));
      h = relu(conv2d(h, k2, Tensor<double>{}, {2, 1}));
      Tensor<double> out = linear(global_avg_pool(h), w, Tensor<double>{});
      std::copy(out.data().begin(), out.data().end(), logits.begin() + static_cast<std::ptrdiff_t>(start * classes));
    }
  }
  // Center and scale logits so the bias shift has a common unit.
  double mean = 0, sq = 0;
  for (double l : logits) mean += l;
  mean /= static_cast<double>(logits.size());
  for (double l : logits) sq += (l - mean) * (l - mean);
  const double scale = std::sqrt(sq / static_cast<double>(logits.size())) + 1e-12;

  std::vector<double> bias(classes, 0.0);
  std::vector<std::size_t> counts(classes);
  auto assign = [&] {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < samples; ++i) {
      std::size_t best = 0;
      double best_v = -1e300;
      for (std::size_t k = 0; k < classes; ++k) {
        const double v = logits[i * classes + k] / scale + bias[k];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      data.labels.resize(samples);
      data.labels[i] = static_cast<int>(best);
      counts[best] += 1;
    }
  };
  // Shift class thresholds toward a balanced histogram.
  const double uniform = 1.0 / static_cast<double>(classes);
  for (int iter = 0; iter < 400; ++iter) {
    assign();
    double worst = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double freq = static_cast<double>(counts[k]) / static_cast<double>(samples);
      worst = std::max(worst, std::abs(freq - uniform));
      bias[k] += 0.5 * (uniform - freq) / uniform * 0.1;
    }
    if (worst < 0.25 * uniform) break;
  }
  assign();
  for (std::size_t k = 0; k < classes; ++k) {
    if (counts[k] == 0) throw NumericError("synthetic dataset: class " + std::to_string(k) + " is empty");
  }
  return data;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void append(Dataset& into, const Dataset& part) {
  if (into.size() == 0) {
    into = part;
    return;
  }
  into.images.insert(into.images.end(), part.images.begin(), part.images.end());
  into.labels.insert(into.labels.end(), part.labels.begin(), part.labels.end());
}

}  // namespace

Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& source) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  if (bytes.size() % kRecord != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kRecord;
    throw FormatError(source + ": truncated CIFAR-10 record at byte offset " + std::to_string(offset) + " (size " +
                      std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(kRecord) + ")");
  }
  Dataset data;
  data.shape = {3, 32, 32};
  data.num_classes = 10;
  data.augment = true;
  const std::size_t n = bytes.size() / kRecord;
  data.images.resize(n * kPixels);
  data.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t label = bytes[r * kRecord];
    if (label > 9) {
      throw FormatError(source + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(r * kRecord));
    }
    data.labels[r] = label;
    for (std::size_t i = 0; i < kPixels; ++i) data.images[r * kPixels + i] = bytes[r * kRecord + 1 + i] / 255.0f;
  }
  return data;
}

Dataset load_cifar10_binary(const std::filesystem::path& dir, bool train) {
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) {
      auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (std::filesystem::exists(p)) files.push_back(p);
    }
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  if (files.empty()) throw IoError("no CIFAR-10 batch files in " + dir.string());
  Dataset data;
  for (const auto& f : files) append(data, parse_cifar10_records(read_file(f), f.string()));
  return data;
}

Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  if (images.size() < 16) throw FormatError("IDX images: header truncated at byte offset " + std::to_string(images.size()));
  if (labels.size() < 8) throw FormatError("IDX labels: header truncated at byte offset " + std::to_string(labels.size()));
  if (read_be32(images, 0) != 0x803) throw FormatError("IDX images: magic mismatch at byte offset 0 (expected 0x00000803)");
  if (read_be32(labels, 0) != 0x801) throw FormatError("IDX labels: magic mismatch at byte offset 0 (expected 0x00000801)");
  const std::size_t n = read_be32(images, 4);
  const std::size_t h = read_be32(images, 8);
  const std::size_t w = read_be32(images, 12);
  if (read_be32(labels, 4) != n) {
    throw FormatError("IDX labels: count " + std::to_string(read_be32(labels, 4)) + " at byte offset 4 does not match " +
                      std::to_string(n) + " images");
  }
  if (images.size() != 16 + n * h * w) {
    throw FormatError("IDX images: payload ends at byte offset " + std::to_string(images.size()) + ", expected " +
                      std::to_string(16 + n * h * w));
  }
  if (labels.size() != 8 + n) {
    throw FormatError("IDX labels: payload ends at byte offset " + std::to_string(labels.size()) + ", expected " +
                      std::to_string(8 + n));
  }
  Dataset data;
  data.shape = {1, h, w};
  data.num_classes = 10;
  data.images.resize(n * h * w);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n * h * w; ++i) data.images[i] = images[16 + i] / 255.0f;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[8 + i] > 9) {
      throw FormatError("IDX labels: label out of range at byte offset " + std::to_string(8 + i));
    }
    data.labels[i] = labels[8 + i];
  }
  return data;
}

Dataset load_mnist_idx(const std::filesystem::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  const auto images = read_file(dir / (prefix + "-images-idx3-ubyte"));
  const auto labels = read_file(dir / (prefix + "-labels-idx1-ubyte"));
  return parse_mnist_idx(images, labels);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 1000 + epoch));
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double first_fraction, std::uint64_t seed) {
  if (!(first_fraction > 0.0 && first_fraction < 1.0)) {
    throw ConfigError("split fraction must lie in (0, 1)");
  }
  const auto order = epoch_order(data.size(), seed, 0);
  const std::size_t cut = static_cast<std::size_t>(std::round(first_fraction * static_cast<double>(data.size())));
  Dataset a, b;
  for (Dataset* d : {&a, &b}) {
    d->shape = data.shape;
    d->num_classes = data.num_classes;
    d->augment = data.augment;
  }
  const std::size_t sz = data.image_size();
  for (std::size_t i = 0; i < order.size(); ++i) {
    Dataset& dst = i < cut ? a : b;
    const std::size_t k = order[i];
    dst.images.insert(dst.images.end(), data.images.begin() + static_cast<std::ptrdiff_t>(k * sz),
                      data.images.begin() + static_cast<std::ptrdiff_t>((k + 1) * sz));
    dst.labels.push_back(data.labels[k]);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
LabeledBatch<T> make_batch(const Dataset& data, std::span<const std::size_t> indices, bool augment,
                           std::uint64_t aug_seed) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t c = data.shape.channels, h = data.shape.height, w = data.shape.width;
  const std::size_t sz = data.image_size();
  std::vector<T> values(indices.size() * sz);
  LabeledBatch<T> batch;
  batch.labels.reserve(indices.size());
  const bool aug = augment && data.augment;
  std::mt19937_64 rng(aug_seed);
  constexpr int kPad = 4;
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const std::size_t k = indices[n];
    if (k >= data.size()) throw DimensionError("make_batch: index " + std::to_string(k) + " out of range");
    batch.labels.push_back(data.labels[k]);
    const float* src = data.images.data() + k * sz;
    T* dst = values.data() + n * sz;
    if (!aug) {
      std::copy(src, src + sz, dst);
      continue;
    }
    const int dy = static_cast<int>(rng() % (2 * kPad + 1)) - kPad;
    const int dx = static_cast<int>(rng() % (2 * kPad + 1)) - kPad;
    const bool flip = (rng() & 1) != 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const int sy = static_cast<int>(y) + dy;
          const int sx0 = static_cast<int>(flip ? w - 1 - x : x) + dx;
          T v{0};
          if (sy >= 0 && sy < static_cast<int>(h) && sx0 >= 0 && sx0 < static_cast<int>(w)) {
            v = static_cast<T>(src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx0)]);
          }
          dst[(ch * h + y) * w + x] = v;
        }
      }
    }
  }
  batch.images = Tensor<T>({indices.size(), c, h, w}, std::move(values));
  return batch;
}

template LabeledBatch<float> make_batch(const Dataset&, std::span<const std::size_t>, bool, std::uint64_t);
template LabeledBatch<double> make_batch(const Dataset&, std::span<const std::size_t>, bool, std::uint64_t);

}  // namespace pas
