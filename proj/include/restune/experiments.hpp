#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "restune/config.hpp"
#include "restune/data.hpp"
#include "restune/model.hpp"
#include "restune/training.hpp"
#include "restune/tuners.hpp"

namespace restune {

// Trains every backbone parameter of `model` on the synthetic source task
// (image shape, classes and seed taken from `data`), then freezes the backbone
// and resets the head to its initial values. Returns the source-task
// accuracy after training.
double pretrain_backbone(ModelGraph& model, const PretrainConfig& pretrain, const DatasetSpec& data);

// build_backbone, plus pretrain_backbone when `pretrain` is set.
ModelGraph prepare_backbone(const BackboneConfig& cfg, const std::optional<PretrainConfig>& pretrain,
                            const DatasetSpec& data);

// Worker threads for parallel runs: RES_TUNER_THREADS if set (>= 1), else the
// hardware concurrency.
std::size_t thread_budget();

inline constexpr std::array<TunerKind, 4> kMatrixKinds{TunerKind::ResAttn, TunerKind::Prefix, TunerKind::Prompt,
                                                       TunerKind::Adapter};
inline constexpr std::array<AttachPoint, 3> kMatrixOps{AttachPoint::MHA, AttachPoint::FFN, AttachPoint::Block};

struct MatrixOptions {
  TrainConfig train;
  // Hyperparameters per kind; kinds not listed use TunerSpec defaults.
  std::map<TunerKind, TunerSpec> tuner_specs;
  std::size_t threads = 1;
};

struct MatrixCell {
  std::vector<AttachSpec> specs;
  bool zero_init_identity = false;  // fresh tuners leave eval logits bit-identical
  bool frozen_intact = false;       // no frozen byte changed by training
  std::size_t trainable_params = 0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct AttachMatrix {
  // single[kind][op]: one kind at one op of every block.
  std::vector<std::vector<MatrixCell>> single;
  // dual[mha_kind][ffn_kind]: a kind at MHA and a kind at FFN of every block.
  std::vector<std::vector<MatrixCell>> dual;
};

// Every cell is trained from a clone of `base` with the same options; cells
// run on up to `threads` threads, results are placed by grid position.
AttachMatrix run_attach_matrix(const ModelGraph& base, const DatasetSplits& data, const MatrixOptions& options);

struct TransferOptions {
  BackboneConfig backbone;
  DatasetSpec target;  // variant TransferB
  PretrainConfig pretrain;
  TrainConfig tune;
  TunerSpec tuner;  // attached at `op` of every block
  AttachPoint op = AttachPoint::MHA;
};

struct TransferResult {
  double source_accuracy = 0.0;  // pretrained backbone on the source task
  double probe_accuracy = 0.0;   // head only, target validation split
  double tuned_accuracy = 0.0;   // tuner + head, target validation split
};

// Linear probe versus tuner on a frozen backbone pretrained on the source task.
TransferResult run_transfer(const TransferOptions& options);

}  // namespace restune
