#include "restune/model.hpp"

#include <algorithm>
#include <cmath>

#include "restune/errors.hpp"
#include "restune/ops.hpp"

namespace restune {

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("backbone config: " + msg); };
  if (dim == 0) fail("dim must be >= 1");
  if (depth == 0) fail("depth must be >= 1");
  if (heads == 0) fail("heads must be >= 1");
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  if (patch == 0) fail("patch must be >= 1");
  if (image_size == 0 || image_size % patch != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch " + std::to_string(patch));
  }
  if (in_channels == 0) fail("in_channels must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
}

BackboneConfig vit_b16_config(std::size_t num_classes) {
  BackboneConfig cfg;
  cfg.dim = 768;
  cfg.depth = 12;
  cfg.heads = 12;
  cfg.patch = 16;
  cfg.image_size = 224;
  cfg.in_channels = 3;
  cfg.num_classes = num_classes;
  return cfg;
}

std::vector<AttachSpec> ModelGraph::attach_specs() const {
  std::vector<AttachSpec> out;
  out.reserve(tuners.size());
  for (const auto& [key, slot] : tuners) out.push_back(slot.spec);
  return out;
}

Tensor sinusoidal_position_embedding(std::size_t tokens, std::size_t dim) {
  std::vector<double> values(tokens * dim);
  for (std::size_t pos = 0; pos < tokens; ++pos) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(dim);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      values[pos * dim + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({1, tokens, dim}, std::move(values));
}

ModelGraph build_backbone(const BackboneConfig& cfg, BuildOptions options) {
  cfg.validate();
  ModelGraph m{cfg, ParameterStore(options.materialize), {}, {}, {}, {}, {}, {}, {}};
  Rng rng = make_rng({cfg.seed});
  const std::size_t patch_in = cfg.in_channels * cfg.patch * cfg.patch;

  m.patch_embed = LinearLayer::create(m.params, "backbone.patch_embed", patch_in, cfg.dim, true, false,
                                      trunc_normal_init(rng));
  m.cls_token = m.params.add("backbone.cls_token", {1, 1, cfg.dim}, false, trunc_normal_init(rng));
  if (options.materialize) m.pos_embed = sinusoidal_position_embedding(cfg.tokens(), cfg.dim);

  const MHAConfig mha_cfg{cfg.dim, cfg.heads, cfg.qkv_bias, 0.0, 0.0};
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string prefix = "backbone.blocks." + std::to_string(i);
    Block block;
    block.norm1 = LayerNormLayer::create(m.params, prefix + ".norm1", cfg.dim, false);
    block.attn = MultiHeadAttention::create(m.params, prefix + ".attn", mha_cfg, false, rng);
    block.norm2 = LayerNormLayer::create(m.params, prefix + ".norm2", cfg.dim, false);
    block.mlp = Mlp::create(m.params, prefix + ".mlp", cfg.dim, cfg.mlp_ratio * cfg.dim, false, rng);
    m.blocks.push_back(std::move(block));
  }
  m.norm = LayerNormLayer::create(m.params, "backbone.norm", cfg.dim, false);
  m.head = LinearLayer::create(m.params, "head", cfg.dim, cfg.num_classes, true, true, trunc_normal_init(rng));
  return m;
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.ndim() != 4 || images.dim(2) % patch != 0 || images.dim(3) % patch != 0) {
    throw DimensionError("patchify: images " + shape_str(images.shape()) + " do not tile into " +
                         std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  const std::size_t b = images.dim(0), c = images.dim(1);
  const std::size_t gh = images.dim(2) / patch, gw = images.dim(3) / patch;
  Tensor grid = reshape(images, {b, c, gh, patch, gw, patch});
  return reshape(permute(grid, {0, 2, 4, 1, 3, 5}), {b, gh * gw, c * patch * patch});
}

namespace {

bool needs_query(const TunerSlot& slot) {
  const TunerKind k = kind_of(slot.tuner);
  return k == TunerKind::Prefix || k == TunerKind::Prompt;
}

Tensor run_slot(const TunerSlot& slot, const Tensor& input, const Tensor& query, const MultiHeadAttention& host,
                const ForwardContext& ctx) {
  Tensor q = query;
  if (!q.defined() && needs_query(slot)) q = host.query(input);
  return tuner_forward(slot.tuner, TunerInput{input, q, host, ctx});
}

}  // namespace

Tensor block_forward(const Tensor& x, const Block& block, const TunerSlot* mha_slot, const TunerSlot* ffn_slot,
                     const TunerSlot* block_slot, const ForwardContext& ctx) {
  if (x.ndim() != 3 || x.dim(2) != block.attn.cfg.dim) {
    throw DimensionError("block input " + shape_str(x.shape()) + " does not match width " +
                         std::to_string(block.attn.cfg.dim));
  }
  Tensor h1 = block.norm1.forward(x);
  MultiHeadAttention::Output attn = block.attn.forward(h1, ctx);
  Tensor u = add(x, attn.y);
  if (mha_slot) u = add(u, run_slot(*mha_slot, h1, attn.q, block.attn, ctx));

  Tensor h2 = block.norm2.forward(u);
  Tensor v = add(u, block.mlp.forward(h2, 0.0, ctx));
  if (ffn_slot) v = add(v, run_slot(*ffn_slot, h2, Tensor(), block.attn, ctx));

  if (block_slot) v = add(v, run_slot(*block_slot, x, attn.q, block.attn, ctx));
  return v;
}

Tensor block_forward(const ModelGraph& model, std::size_t index, const Tensor& x, const ForwardContext& ctx) {
  if (index >= model.blocks.size()) throw ContractError("block index " + std::to_string(index) + " out of range");
  auto find = [&](AttachPoint op) -> const TunerSlot* {
    auto it = model.tuners.find({index, op});
    return it == model.tuners.end() ? nullptr : &it->second;
  };
  return block_forward(x, model.blocks[index], find(AttachPoint::MHA), find(AttachPoint::FFN),
                       find(AttachPoint::Block), ctx);
}

Tensor forward(const ModelGraph& model, const Tensor& images, const ForwardContext& ctx) {
  if (!model.materialized()) throw ContractError("forward() on a layout-only model");
  const BackboneConfig& cfg = model.config;
  const Shape expected{images.ndim() == 4 ? images.dim(0) : 0, cfg.in_channels, cfg.image_size, cfg.image_size};
  if (images.ndim() != 4 || images.shape() != expected) {
    throw DimensionError("images " + shape_str(images.shape()) + " do not match configured [B, " +
                         std::to_string(cfg.in_channels) + ", " + std::to_string(cfg.image_size) + ", " +
                         std::to_string(cfg.image_size) + "]");
  }
  const std::size_t batch = images.dim(0);
  Tensor tokens = model.patch_embed.forward(patchify(images, cfg.patch));
  Tensor cls = expand(model.cls_token, {batch, 1, cfg.dim});
  Tensor x = concat({cls, tokens}, 1);
  x = add(x, expand(model.pos_embed, {batch, cfg.tokens(), cfg.dim}));
  for (std::size_t i = 0; i < model.blocks.size(); ++i) x = block_forward(model, i, x, ctx);
  Tensor features = select(model.norm.forward(x), 1, 0);
  return model.head.forward(features);
}

bool is_backbone_parameter(const std::string& name) { return name.starts_with("backbone."); }
bool is_tuner_parameter(const std::string& name) { return name.starts_with("tuners."); }
bool is_head_parameter(const std::string& name) { return name.starts_with("head."); }

void freeze_all(ModelGraph& model) {
  for (Parameter* p : model.params.all()) {
    if (is_backbone_parameter(p->name)) model.params.set_trainable(p->name, false);
  }
}

void unfreeze_backbone(ModelGraph& model) {
  for (Parameter* p : model.params.all()) {
    if (is_backbone_parameter(p->name)) model.params.set_trainable(p->name, true);
  }
}

std::vector<Parameter*> trainable_parameters(ModelGraph& model) { return model.params.trainable(); }

namespace {

std::string slot_prefix(std::size_t block, AttachPoint op) {
  return "tuners." + std::to_string(block) + "." + std::string(to_string(op));
}

}  // namespace

ModelGraph& attach(ModelGraph& model, const std::vector<AttachSpec>& specs) {
  // Validate the whole request before touching the model.
  std::vector<SlotKey> requested;
  for (const AttachSpec& s : specs) {
    if (s.block >= model.config.depth) {
      throw ConfigError("attach: block " + std::to_string(s.block) + " out of range for depth " +
                        std::to_string(model.config.depth));
    }
    s.tuner.validate();
    const SlotKey key{s.block, s.op};
    if (model.tuners.count(key) != 0 || std::find(requested.begin(), requested.end(), key) != requested.end()) {
      throw ConflictError("attach: slot (block " + std::to_string(s.block) + ", " + std::string(to_string(s.op)) +
                          ") already has a tuner");
    }
    requested.push_back(key);
  }
  for (const AttachSpec& s : specs) {
    const std::string prefix = slot_prefix(s.block, s.op) + "." + std::string(to_string(s.tuner.kind));
    // Per-slot stream: initial weights do not depend on attachment order.
    Rng rng = make_rng({model.config.seed, 0x74756e6572ULL, s.block, static_cast<std::uint64_t>(s.op),
                        static_cast<std::uint64_t>(s.tuner.kind)});
    Tuner tuner = make_tuner(s.tuner, model.config.dim, model.config.heads, model.params, prefix, rng);
    model.tuners.emplace(SlotKey{s.block, s.op}, TunerSlot{s, std::move(tuner)});
  }
  return model;
}

std::vector<AttachSpec> uniform_specs(std::size_t depth, AttachPoint op, const TunerSpec& tuner) {
  std::vector<AttachSpec> specs;
  for (std::size_t i = 0; i < depth; ++i) specs.push_back({i, op, tuner});
  return specs;
}

ParamCount count_trainable_params(const ModelGraph& model, CountOptions options) {
  ParamCount out;
  std::map<std::string, std::size_t> by_component;
  for (const Parameter* p : model.params.all()) {
    if (!p->trainable) continue;
    std::string component;
    if (is_head_parameter(p->name)) {
      if (!options.include_head) continue;
      component = "head";
    } else if (is_tuner_parameter(p->name)) {
      if (!options.include_bias && p->name.ends_with(".bias")) continue;
      // tuners.<block>.<op>
      const auto second_dot = p->name.find('.', p->name.find('.') + 1);
      component = p->name.substr(0, p->name.find('.', second_dot + 1));
    } else {
      component = "backbone";
    }
    by_component[component] += shape_numel(p->shape);
  }
  for (auto& [name, n] : by_component) {
    out.components.emplace_back(name, n);
    out.total += n;
  }
  return out;
}

std::size_t analytic_trainable_params(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs,
                                      CountOptions options) {
  std::size_t total = 0;
  for (const AttachSpec& s : specs) total += tuner_param_formula(s.tuner, cfg.dim, options.include_bias);
  if (options.include_head) total += cfg.dim * cfg.num_classes + cfg.num_classes;
  return total;
}

std::size_t count_all_params(const ModelGraph& model) {
  std::size_t n = 0;
  for (const Parameter* p : model.params.all()) n += shape_numel(p->shape);
  return n;
}

ModelGraph clone_model(const ModelGraph& model) {
  ModelGraph copy = build_backbone(model.config, {model.materialized()});
  attach(copy, model.attach_specs());
  for (const Parameter* src : model.params.all()) {
    Parameter& dst = copy.params.at(src->name);
    copy.params.set_trainable(src->name, src->trainable);
    if (src->value.defined()) {
      auto from = src->value.data();
      std::copy(from.begin(), from.end(), dst.value.mutable_data().begin());
    }
  }
  return copy;
}

}  // namespace restune
