#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "restune/model.hpp"
#include "restune/tensor.hpp"

namespace restune {

enum class StorageDtype : std::uint8_t { F64 = 0, F32 = 1 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  StorageDtype dtype = StorageDtype::F64;
  Shape shape;
  std::vector<double> values;  // widened to f64 when stored as f32
};

// Layout (little-endian): "RTCK", u32 version, u32 config length + config
// text, u32 tensor count, then per tensor: u16 name length + name, u8 dtype,
// u8 ndim, ndim x u64 dims, raw values; finally a CRC32 of every byte before it.
struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::vector<StoredTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file);
// ChecksumError on CRC mismatch, ParseError on malformed or unsupported input.
CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes);
CheckpointFile read_checkpoint(const std::string& path);

// Every parameter (frozen and trainable) in name order plus the config text.
CheckpointFile checkpoint_of(const ModelGraph& model, StorageDtype dtype = StorageDtype::F64);
void save_checkpoint(const ModelGraph& model, const std::string& path, StorageDtype dtype = StorageDtype::F64);

// Rebuilds backbone and tuners from the embedded config, then loads values.
ModelGraph load_checkpoint(const std::string& path);
ModelGraph model_from_checkpoint(const CheckpointFile& file);

// Copies every stored tensor into `model`. Unknown names and missing
// parameters raise TensorMismatchError; shape disagreements raise
// DimensionError naming the tensor.
void load_checkpoint_into(ModelGraph& model, const CheckpointFile& file);

struct ImportReport {
  std::vector<std::string> loaded;  // model parameter names
  std::vector<std::string> unused;  // stored names no mapping refers to
};

// model parameter name -> stored tensor name
using NameMap = std::map<std::string, std::string>;

// Identity mapping over the model's backbone parameters.
NameMap identity_name_map(const ModelGraph& model);

// Initialises the frozen backbone of `model` from a checkpoint-format file.
// Every backbone parameter must be mapped to a stored tensor of dtype
// `expected`; all missing ones are listed in one TensorMismatchError.
ImportReport import_weights(ModelGraph& model, const CheckpointFile& file, const NameMap& name_map,
                            StorageDtype expected = StorageDtype::F64);
ImportReport import_weights(ModelGraph& model, const std::string& path, const NameMap& name_map,
                            StorageDtype expected = StorageDtype::F64);

}  // namespace restune
