#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "restune/nn.hpp"
#include "restune/parameters.hpp"
#include "restune/tensor.hpp"
#include "restune/tuners.hpp"

namespace restune {

struct BackboneConfig {
  std::size_t dim = 16;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t patch = 4;
  std::size_t image_size = 8;
  std::size_t in_channels = 1;
  std::size_t num_classes = 4;
  std::size_t mlp_ratio = 4;
  bool qkv_bias = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t num_patches() const { return (image_size / patch) * (image_size / patch); }
  // Patches plus the class token.
  std::size_t tokens() const { return num_patches() + 1; }

  bool operator==(const BackboneConfig&) const = default;
};

// ViT-B/16 as used for the published parameter accounting.
BackboneConfig vit_b16_config(std::size_t num_classes = 100);

// Pre-norm transformer block. All parameters frozen by default.
struct Block {
  LayerNormLayer norm1;
  MultiHeadAttention attn;
  LayerNormLayer norm2;
  Mlp mlp;
};

struct TunerSlot {
  AttachSpec spec;
  Tuner tuner;
};

using SlotKey = std::pair<std::size_t, AttachPoint>;

// Frozen backbone + attached tuners + classifier head. Owns its parameters;
// move-only.
struct ModelGraph {
  BackboneConfig config;
  ParameterStore params;

  LinearLayer patch_embed;  // [C * patch * patch, dim]
  Tensor cls_token;         // [1, 1, dim]
  Tensor pos_embed;         // [1, tokens, dim], fixed sinusoidal, not a parameter
  std::vector<Block> blocks;
  LayerNormLayer norm;
  LinearLayer head;  // [dim, num_classes], always trainable

  std::map<SlotKey, TunerSlot> tuners;

  // Attached specs in slot order.
  std::vector<AttachSpec> attach_specs() const;
  bool materialized() const { return params.materialized(); }
};

struct BuildOptions {
  // false: record parameter names/shapes/flags only (no allocation).
  bool materialize = true;
};

ModelGraph build_backbone(const BackboneConfig& cfg, BuildOptions options = {});

Tensor sinusoidal_position_embedding(std::size_t tokens, std::size_t dim);

// images [B, C, H, W] -> patch rows [B, patches, C * p * p].
Tensor patchify(const Tensor& images, std::size_t patch);

// One pre-norm block with the residual tuners of its slots:
//   u = x + MHA(n1(x)) + T_mha(n1(x))
//   v = u + FFN(n2(u)) + T_ffn(n2(u))
//   out = v + T_block(x)
Tensor block_forward(const Tensor& x, const Block& block, const TunerSlot* mha_slot, const TunerSlot* ffn_slot,
                     const TunerSlot* block_slot, const ForwardContext& ctx);

// Runs block `index` of `model` with whatever tuners are attached to it.
Tensor block_forward(const ModelGraph& model, std::size_t index, const Tensor& x, const ForwardContext& ctx);

// patch-embed -> class token + positions -> blocks -> norm -> head.
Tensor forward(const ModelGraph& model, const Tensor& images, const ForwardContext& ctx = kEval);

bool is_backbone_parameter(const std::string& name);
bool is_tuner_parameter(const std::string& name);
bool is_head_parameter(const std::string& name);

// Freezes every backbone parameter. Tuners and the head are untouched.
void freeze_all(ModelGraph& model);
// Makes backbone parameters trainable (pretraining a synthetic backbone).
void unfreeze_backbone(ModelGraph& model);
// Trainable parameters ordered by name.
std::vector<Parameter*> trainable_parameters(ModelGraph& model);

// Adds each spec's tuner at its (block, op) slot. Order of `specs` does not
// affect the result. Rejects occupied slots and out-of-range blocks.
ModelGraph& attach(ModelGraph& model, const std::vector<AttachSpec>& specs);

// Same tuner at `op` of every block.
std::vector<AttachSpec> uniform_specs(std::size_t depth, AttachPoint op, const TunerSpec& tuner);

struct CountOptions {
  bool include_head = false;
  bool include_bias = false;
};

struct ParamCount {
  // Component name ("tuners.<block>.<op>" or "head") -> scalar count.
  std::vector<std::pair<std::string, std::size_t>> components;
  std::size_t total = 0;
};

// Sums the sizes of parameters flagged trainable.
ParamCount count_trainable_params(const ModelGraph& model, CountOptions options = {});

// Closed-form count of the same quantity from the configuration alone.
std::size_t analytic_trainable_params(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs,
                                      CountOptions options = {});

// Every parameter, frozen or not.
std::size_t count_all_params(const ModelGraph& model);

// Deep copy: same config, tuners and parameter values.
ModelGraph clone_model(const ModelGraph& model);

}  // namespace restune
