#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "restune/data.hpp"
#include "restune/model.hpp"
#include "restune/training.hpp"
#include "restune/tuners.hpp"

namespace restune {

// One [tuner] section: the same tuner at `op` of each listed block.
struct TunerEntry {
  std::optional<std::vector<std::size_t>> blocks;  // nullopt = every block
  AttachPoint op = AttachPoint::MHA;
  TunerSpec tuner;

  bool operator==(const TunerEntry&) const = default;
};

// Optional source-task training of the backbone before it is frozen.
struct PretrainConfig {
  SyntheticVariant variant = SyntheticVariant::TransferA;
  std::size_t size = 512;
  TrainConfig train = [] {
    TrainConfig t;
    t.epochs = 20;
    t.lr = 3e-3;
    return t;
  }();
};

struct RunConfig {
  BackboneConfig backbone;
  std::vector<TunerEntry> tuners;
  TrainConfig train;
  DatasetSpec data;
  std::optional<PretrainConfig> pretrain;
  std::string output_dir = "run";

  bool has_backbone = false;
  bool has_train = false;
  bool has_data = false;
  bool has_output = false;

  // Expands the [tuner] entries against backbone.depth.
  std::vector<AttachSpec> attach_specs() const;
  // Throws ConfigError naming the first missing section.
  void require(std::initializer_list<const char*> sections) const;
};

// Line-oriented INI text. `origin` prefixes error messages.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::string& path);

// Text form of a backbone plus its attached tuners, accepted by
// parse_run_config.
std::string model_config_text(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs);

std::string_view to_string(SyntheticVariant v);
SyntheticVariant parse_variant(std::string_view text);

}  // namespace restune
