#include "restune/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "restune/errors.hpp"
#include "restune/rng.hpp"

namespace restune {

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace detail

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t n = item_size();
  std::vector<double> values(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw ContractError("dataset index out of range");
    const float* src = pixels.data() + indices[i] * n;
    std::copy(src, src + n, values.begin() + static_cast<long>(i * n));
  }
  return Tensor::from({indices.size(), channels, height, width}, std::move(values));
}

std::vector<std::uint32_t> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<std::uint32_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{channels, height, width, num_classes, {}, {}};
  const std::size_t n = item_size();
  out.pixels.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    const float* src = pixels.data() + i * n;
    out.pixels.insert(out.pixels.end(), src, src + n);
    out.labels.push_back(labels.at(i));
  }
  return out;
}

void Dataset::append(const Dataset& other) {
  if (other.channels != channels || other.height != height || other.width != width ||
      other.num_classes != num_classes) {
    throw DimensionError("cannot append datasets with different image shapes or class counts");
  }
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

void DatasetSpec::validate() const {
  if (source != "synthetic" && source != "file") throw ConfigError("data source must be 'synthetic' or 'file'");
  if (source == "file" && path.empty()) throw ConfigError("data source 'file' needs a path");
  const double total = train_fraction + val_fraction + test_fraction;
  if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0 || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  if (source == "synthetic") {
    if (num_classes == 0) throw ConfigError("synthetic dataset needs at least one class");
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("image dimensions must be >= 1");
    if (size < num_classes) throw ConfigError("dataset size must be >= num_classes");
    if (noise < 0) throw ConfigError("noise must be >= 0");
    if (distractor < 0) throw ConfigError("distractor must be >= 0");
  }
}

namespace {

struct Blob {
  std::size_t channel;
  double row;
  double col;
};

constexpr std::size_t kBlobsPerClass = 2;
constexpr double kBackground = 0.1;
constexpr double kClassAmplitude = 0.6;
constexpr double kTransferAmplitude = 0.35;

// Blob dictionary shared by every variant of a given seed: two blocks (task
// A, task B) of num_classes * kBlobsPerClass blobs each.
std::vector<Blob> blob_dictionary(const DatasetSpec& spec) {
  Rng rng = make_rng({spec.seed, 0x64696374ULL, spec.num_classes, spec.channels, spec.height, spec.width});
  std::uniform_real_distribution<double> row(0.5, static_cast<double>(spec.height) - 1.5);
  std::uniform_real_distribution<double> col(0.5, static_cast<double>(spec.width) - 1.5);
  std::uniform_int_distribution<std::size_t> channel(0, spec.channels - 1);
  std::vector<Blob> blobs(2 * spec.num_classes * kBlobsPerClass);
  for (Blob& b : blobs) b = Blob{channel(rng), row(rng), col(rng)};
  return blobs;
}

void render_blob(std::span<float> image, const DatasetSpec& spec, const Blob& blob, double amplitude) {
  const double sigma = std::max<double>(1.0, static_cast<double>(std::max(spec.height, spec.width)) / 8.0);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t r = 0; r < spec.height; ++r) {
    for (std::size_t c = 0; c < spec.width; ++c) {
      const double dr = static_cast<double>(r) - blob.row;
      const double dc = static_cast<double>(c) - blob.col;
      image[(blob.channel * spec.height + r) * spec.width + c] +=
          static_cast<float>(amplitude * std::exp(-(dr * dr + dc * dc) * inv));
    }
  }
}

void render_class(std::span<float> image, const DatasetSpec& spec, const std::vector<Blob>& dict, std::size_t block,
                  std::size_t cls, double amplitude, Rng& rng) {
  std::uniform_real_distribution<double> jitter(0.8, 1.2);
  const std::size_t base = (block * spec.num_classes + cls) * kBlobsPerClass;
  for (std::size_t j = 0; j < kBlobsPerClass; ++j) render_blob(image, spec, dict[base + j], amplitude * jitter(rng));
}

}  // namespace

Dataset synth_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.source != "synthetic") throw ConfigError("synth_dataset called for a non-synthetic spec");
  const auto dict = blob_dictionary(spec);
  Rng rng = make_rng({spec.seed, 0x73616d70ULL, static_cast<std::uint64_t>(spec.variant)});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_class(0, spec.num_classes - 1);

  Dataset data{spec.channels, spec.height, spec.width, spec.num_classes, {}, {}};
  const std::size_t n = data.item_size();
  data.labels.resize(spec.size);
  for (std::size_t i = 0; i < spec.size; ++i) data.labels[i] = static_cast<std::uint32_t>(i % spec.num_classes);
  std::shuffle(data.labels.begin(), data.labels.end(), rng);

  data.pixels.assign(spec.size * n, static_cast<float>(kBackground));
  for (std::size_t i = 0; i < spec.size; ++i) {
    std::span<float> image(data.pixels.data() + i * n, n);
    const std::size_t cls = data.labels[i];
    switch (spec.variant) {
      case SyntheticVariant::Plain:
      case SyntheticVariant::TransferA:
        render_class(image, spec, dict, 0, cls, kClassAmplitude, rng);
        break;
      case SyntheticVariant::TransferB:
        if (spec.distractor > 0) render_class(image, spec, dict, 0, any_class(rng), spec.distractor, rng);
        render_class(image, spec, dict, 1, cls, kTransferAmplitude, rng);
        break;
    }
    for (float& p : image) {
      p = static_cast<float>(std::clamp(static_cast<double>(p) + spec.noise * noise(rng), 0.0, 1.0));
    }
  }
  return data;
}

DatasetSplits split_dataset(const Dataset& data, const DatasetSpec& spec) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({spec.seed, 0x73706c74ULL});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(data.size())));
  const std::size_t n_val = std::min(data.size() - n_train, static_cast<std::size_t>(std::llround(
                                                                  spec.val_fraction * static_cast<double>(data.size()))));
  std::span<const std::size_t> all(order);
  DatasetSplits out;
  out.train = data.subset(all.subspan(0, n_train));
  out.val = data.subset(all.subspan(n_train, n_val));
  out.test = data.subset(all.subspan(n_train + n_val));
  return out;
}

DatasetSplits load_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset all = spec.source == "file" ? load_binary_dataset(spec.path) : synth_dataset(spec);
  return split_dataset(all, spec);
}

std::vector<std::uint8_t> encode_binary_dataset(const Dataset& data) {
  detail::ByteWriter w;
  w.magic("RTDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.num_classes));
  w.u32(static_cast<std::uint32_t>(data.channels));
  w.u32(static_cast<std::uint32_t>(data.height));
  w.u32(static_cast<std::uint32_t>(data.width));
  const std::size_t n = data.item_size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    w.u32(data.labels[i]);
    for (std::size_t j = 0; j < n; ++j) w.f32(data.pixels[i * n + j]);
  }
  return std::move(w.buffer());
}

void save_binary_dataset(const Dataset& data, const std::string& path) {
  detail::write_file(path, encode_binary_dataset(data));
}

Dataset parse_binary_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "dataset");
  r.expect_magic("RTDS");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion) {
    throw ParseError("dataset: unsupported version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32("count");
  const std::uint32_t classes = r.u32("classes");
  Dataset data;
  data.channels = r.u32("channels");
  data.height = r.u32("height");
  data.width = r.u32("width");
  data.num_classes = classes;
  if (count == 0) throw EmptyDatasetError("dataset file holds no items (count = 0)");
  if (classes == 0 || data.channels == 0 || data.height == 0 || data.width == 0) {
    throw ParseError("dataset: zero-sized header field", r.offset());
  }
  const std::size_t n = data.item_size();
  // Reject impossible counts before allocating.
  r.need(static_cast<std::size_t>(count) * (4 + 4 * n), "items");
  data.labels.reserve(count);
  data.pixels.reserve(static_cast<std::size_t>(count) * n);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t label_at = r.offset();
    const std::uint32_t label = r.u32("label");
    if (label >= classes) {
      throw ParseError("dataset: label " + std::to_string(label) + " >= classes " + std::to_string(classes), label_at);
    }
    data.labels.push_back(label);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t at = r.offset();
      const float v = r.f32("pixel");
      if (!(v >= 0.0f && v <= 1.0f)) throw ParseError("dataset: pixel value outside [0, 1]", at);
      data.pixels.push_back(v);
    }
  }
  if (r.remaining() != 0) throw ParseError("dataset: trailing bytes after last item", r.offset());
  return data;
}

Dataset load_binary_dataset(const std::string& path) { return parse_binary_dataset(detail::read_file(path)); }

}  // namespace restune
