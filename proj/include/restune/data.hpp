#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "restune/tensor.hpp"

namespace restune {

// Labelled images held as f32 in [0, 1], row-major [C, H, W] per item.
struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t num_classes = 0;
  std::vector<float> pixels;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t item_size() const { return channels * height * width; }

  // [indices.size(), C, H, W] as 64-bit tensor.
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<std::uint32_t> labels_at(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  // Appends `other`; shapes and class counts must agree.
  void append(const Dataset& other);

  bool operator==(const Dataset&) const = default;
};

enum class SyntheticVariant { Plain, TransferA, TransferB };

struct DatasetSpec {
  std::string source = "synthetic";  // "synthetic" or "file"
  std::string path;                  // for source == "file"
  SyntheticVariant variant = SyntheticVariant::Plain;
  std::size_t num_classes = 4;
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t size = 256;
  double train_fraction = 0.75;
  double val_fraction = 0.25;
  double test_fraction = 0.0;
  double noise = 0.1;
  // Amplitude of the task-A overlay in TransferB images (0 disables it).
  double distractor = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Class-conditional Gaussian-blob images. Each class owns a set of blobs at
// fixed positions; samples jitter blob amplitudes and add pixel noise.
//
// The transfer variants share one blob dictionary. Task A draws class k from
// the first block of blobs; task B uses a disjoint block of blobs (the class
// feature directions rotated into an unused subspace) and additionally
// overlays a random task-A pattern as a distractor.
Dataset synth_dataset(const DatasetSpec& spec);

// Deterministic shuffle by `seed`, then split by the spec fractions.
DatasetSplits split_dataset(const Dataset& data, const DatasetSpec& spec);

// synth_dataset (or load_binary_dataset for source == "file") + split.
DatasetSplits load_dataset(const DatasetSpec& spec);

// Binary layout (little-endian): "RTDS", u32 version (1), u32 count,
// u32 classes, u32 C, u32 H, u32 W, then count x (u32 label, C*H*W f32).
inline constexpr std::uint32_t kDatasetVersion = 1;

void save_binary_dataset(const Dataset& data, const std::string& path);
Dataset load_binary_dataset(const std::string& path);
Dataset parse_binary_dataset(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_binary_dataset(const Dataset& data);

}  // namespace restune
