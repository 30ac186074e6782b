#include "restune/checkpoint.hpp"

#include <algorithm>
#include <set>

#include <zlib.h>

#include "binary_io.hpp"
#include "restune/config.hpp"
#include "restune/errors.hpp"

namespace restune {

namespace {

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file) {
  detail::ByteWriter w;
  w.magic("RTCK");
  w.u32(file.version);
  w.u32(static_cast<std::uint32_t>(file.config_text.size()));
  w.bytes(file.config_text.data(), file.config_text.size());
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const StoredTensor& t : file.tensors) {
    if (t.name.size() > 0xffff) throw ContractError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xff) throw ContractError("tensor '" + t.name + "' has too many dimensions");
    if (shape_numel(t.shape) != t.values.size()) {
      throw DimensionError("tensor '" + t.name + "' holds " + std::to_string(t.values.size()) +
                           " values for shape " + shape_str(t.shape));
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    if (t.dtype == StorageDtype::F64) {
      for (double v : t.values) w.f64(v);
    } else {
      for (double v : t.values) w.f32(static_cast<float>(v));
    }
  }
  w.u32(crc_of(w.buffer()));
  return std::move(w.buffer());
}

CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader header(bytes, "checkpoint");
  header.expect_magic("RTCK");
  if (bytes.size() < 12) throw ParseError("checkpoint: truncated before checksum", bytes.size());
  const auto payload = bytes.first(bytes.size() - 4);
  detail::ByteReader tail(bytes.subspan(bytes.size() - 4), "checkpoint");
  const std::uint32_t stored = tail.u32("crc32");
  const std::uint32_t actual = crc_of(payload);
  if (stored != actual) {
    throw ChecksumError("checkpoint: CRC32 mismatch (stored " + std::to_string(stored) + ", computed " +
                        std::to_string(actual) + ")");
  }

  detail::ByteReader r(payload, "checkpoint");
  r.expect_magic("RTCK");
  CheckpointFile file;
  const std::size_t version_at = r.offset();
  file.version = r.u32("version");
  if (file.version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(file.version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     version_at);
  }
  const std::uint32_t config_len = r.u32("config length");
  file.config_text = r.str(config_len, "config text");
  const std::uint32_t count = r.u32("tensor count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const std::size_t at = r.offset();
    t.name = r.str(r.u16("name length"), "tensor name");
    if (!names.insert(t.name).second) throw ParseError("checkpoint: duplicate tensor '" + t.name + "'", at);
    const std::size_t dtype_at = r.offset();
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype > 1) throw ParseError("checkpoint: unknown dtype code " + std::to_string(dtype), dtype_at);
    t.dtype = static_cast<StorageDtype>(dtype);
    const std::uint8_t ndim = r.u8("ndim");
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::size_t dim_at = r.offset();
      const std::uint64_t dim = r.u64("dimension");
      if (dim == 0) throw ParseError("checkpoint: zero dimension in '" + t.name + "'", dim_at);
      if (dim > r.remaining() || numel > r.remaining() / dim) {
        throw ParseError("checkpoint: tensor '" + t.name + "' is larger than the file", dim_at);
      }
      numel *= dim;
      t.shape.push_back(dim);
    }
    const std::size_t width = t.dtype == StorageDtype::F64 ? 8 : 4;
    r.need(numel * width, "tensor values");
    t.values.resize(numel);
    for (double& v : t.values) v = t.dtype == StorageDtype::F64 ? r.f64("value") : r.f32("value");
    file.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw ParseError("checkpoint: trailing bytes before checksum", r.offset());
  return file;
}

CheckpointFile read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

CheckpointFile checkpoint_of(const ModelGraph& model, StorageDtype dtype) {
  if (!model.materialized()) throw ContractError("cannot checkpoint a layout-only model");
  CheckpointFile file;
  file.config_text = model_config_text(model.config, model.attach_specs());
  for (const Parameter* p : model.params.all()) {
    const auto v = p->value.data();
    file.tensors.push_back({p->name, dtype, p->shape, std::vector<double>(v.begin(), v.end())});
  }
  return file;
}

void save_checkpoint(const ModelGraph& model, const std::string& path, StorageDtype dtype) {
  detail::write_file(path, encode_checkpoint(checkpoint_of(model, dtype)));
}

void load_checkpoint_into(ModelGraph& model, const CheckpointFile& file) {
  std::set<std::string> seen;
  for (const StoredTensor& t : file.tensors) {
    if (!model.params.contains(t.name)) {
      throw TensorMismatchError("checkpoint tensor '" + t.name + "' does not exist in the model");
    }
    Parameter& p = model.params.at(t.name);
    if (p.shape != t.shape) {
      throw DimensionError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) +
                           ", model expects " + shape_str(p.shape));
    }
    seen.insert(t.name);
  }
  for (const Parameter* p : model.params.all()) {
    if (!seen.contains(p->name)) throw TensorMismatchError("checkpoint lacks parameter '" + p->name + "'");
  }
  for (const StoredTensor& t : file.tensors) {
    auto dst = model.params.at(t.name).value.mutable_data();
    std::copy(t.values.begin(), t.values.end(), dst.begin());
  }
}

ModelGraph model_from_checkpoint(const CheckpointFile& file) {
  const RunConfig cfg = parse_run_config(file.config_text, "checkpoint config");
  ModelGraph model = build_backbone(cfg.backbone);
  attach(model, cfg.attach_specs());
  load_checkpoint_into(model, file);
  return model;
}

ModelGraph load_checkpoint(const std::string& path) { return model_from_checkpoint(read_checkpoint(path)); }

NameMap identity_name_map(const ModelGraph& model) {
  NameMap map;
  for (const Parameter* p : model.params.all()) {
    if (is_backbone_parameter(p->name)) map.emplace(p->name, p->name);
  }
  return map;
}

ImportReport import_weights(ModelGraph& model, const CheckpointFile& file, const NameMap& name_map,
                            StorageDtype expected) {
  std::map<std::string, const StoredTensor*> stored;
  for (const StoredTensor& t : file.tensors) stored.emplace(t.name, &t);

  std::vector<std::string> missing;
  for (const Parameter* p : model.params.all()) {
    if (!is_backbone_parameter(p->name)) continue;
    const auto m = name_map.find(p->name);
    if (m == name_map.end()) {
      missing.push_back(p->name + " (not in name map)");
    } else if (!stored.contains(m->second)) {
      missing.push_back(p->name + " (file has no '" + m->second + "')");
    }
  }
  if (!missing.empty()) {
    std::string msg = "import: missing mandatory backbone tensors:";
    for (const auto& n : missing) msg += "\n  " + n;
    throw TensorMismatchError(msg);
  }

  for (const auto& [model_name, file_name] : name_map) {
    if (!model.params.contains(model_name)) {
      throw TensorMismatchError("import: name map target '" + model_name + "' is not a model parameter");
    }
    if (!is_backbone_parameter(model_name)) {
      throw TensorMismatchError("import: '" + model_name + "' is not a backbone parameter");
    }
    const auto it = stored.find(file_name);
    if (it == stored.end()) throw TensorMismatchError("import: file has no tensor '" + file_name + "'");
    const StoredTensor& t = *it->second;
    if (t.dtype != expected) {
      throw TensorMismatchError("import: tensor '" + file_name + "' is stored as " +
                                (t.dtype == StorageDtype::F64 ? "f64" : "f32") + ", expected " +
                                (expected == StorageDtype::F64 ? "f64" : "f32"));
    }
    if (t.shape != model.params.at(model_name).shape) {
      throw DimensionError("import: tensor '" + file_name + "' has shape " + shape_str(t.shape) + ", '" +
                           model_name + "' expects " + shape_str(model.params.at(model_name).shape));
    }
  }

  ImportReport report;
  std::set<std::string> used;
  for (const auto& [model_name, file_name] : name_map) {
    const StoredTensor& t = *stored.at(file_name);
    auto dst = model.params.at(model_name).value.mutable_data();
    std::copy(t.values.begin(), t.values.end(), dst.begin());
    report.loaded.push_back(model_name);
    used.insert(file_name);
  }
  for (const StoredTensor& t : file.tensors) {
    if (!used.contains(t.name)) report.unused.push_back(t.name);
  }
  return report;
}

ImportReport import_weights(ModelGraph& model, const std::string& path, const NameMap& name_map,
                            StorageDtype expected) {
  return import_weights(model, read_checkpoint(path), name_map, expected);
}

}  // namespace restune
