#include "restune/tuners.hpp"

#include <cmath>

#include "restune/errors.hpp"
#include "restune/ops.hpp"

namespace restune {

std::string_view to_string(TunerKind kind) {
  switch (kind) {
    case TunerKind::Adapter: return "adapter";
    case TunerKind::Prefix: return "prefix";
    case TunerKind::Prompt: return "prompt";
    case TunerKind::ResAttn: return "res_attn";
  }
  return "?";
}

std::string_view to_string(AttachPoint op) {
  switch (op) {
    case AttachPoint::MHA: return "mha";
    case AttachPoint::FFN: return "ffn";
    case AttachPoint::Block: return "block";
  }
  return "?";
}

TunerKind parse_tuner_kind(std::string_view text) {
  for (TunerKind k : {TunerKind::Adapter, TunerKind::Prefix, TunerKind::Prompt, TunerKind::ResAttn}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("unknown tuner kind '" + std::string(text) + "' (expected adapter, prefix, prompt or res_attn)");
}

AttachPoint parse_attach_point(std::string_view text) {
  for (AttachPoint p : {AttachPoint::MHA, AttachPoint::FFN, AttachPoint::Block}) {
    if (text == to_string(p)) return p;
  }
  throw ConfigError("unknown attach point '" + std::string(text) + "' (expected mha, ffn or block)");
}

namespace {

void check_prob(const char* what, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

void check_width(const char* what, const Tensor& x, std::size_t dim) {
  if (x.ndim() != 3 || x.dim(2) != dim) {
    throw DimensionError(std::string(what) + ": input " + shape_str(x.shape()) + " does not match tuner width " +
                         std::to_string(dim));
  }
}

ParameterStore::Init kaiming_uniform_init(std::size_t fan_in, Rng& rng) {
  const double bound = kaiming_uniform_bound(fan_in, std::sqrt(5.0));
  return [&rng, bound](std::span<double> v) { fill_uniform(v, -bound, bound, rng); };
}

// Default nn.Linear bias distribution.
ParameterStore::Init linear_bias_init(std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return [&rng, bound](std::span<double> v) { fill_uniform(v, -bound, bound, rng); };
}

// [heads, L, d] -> [B, heads, L, d]
Tensor broadcast_batch(const Tensor& t, std::size_t batch) {
  Shape one = t.shape();
  one.insert(one.begin(), 1);
  Shape full = t.shape();
  full.insert(full.begin(), batch);
  return expand(reshape(t, one), full);
}

}  // namespace

void TunerSpec::validate() const {
  if (rank == 0 || heads == 0) throw ConfigError("tuner rank and heads must be >= 1");
  if (length == 0) throw ConfigError("tuner length must be >= 1");
  if (bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
  check_prob("attn_drop", attn_drop);
  check_prob("proj_drop", proj_drop);
}

// --- Res-Attn ---------------------------------------------------------------

double ResAttnConfig::scale() const { return std::pow(static_cast<double>(rank), -0.5); }

void ResAttnConfig::validate() const {
  if (dim == 0) throw ConfigError("res_attn: dim must be >= 1");
  if (rank == 0 || heads == 0) throw ConfigError("res_attn: rank and heads must be >= 1");
  check_prob("res_attn attn_drop", attn_drop);
  check_prob("res_attn proj_drop", proj_drop);
}

ResAttnTuner res_attn_init(const ResAttnConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) {
  cfg.validate();
  const std::size_t width = cfg.rank * cfg.heads;
  ResAttnTuner t;
  t.cfg = cfg;
  t.qkv = LinearLayer::create(store, prefix + ".qkv", cfg.dim, 3 * width, cfg.qkv_bias, true,
                              kaiming_uniform_init(cfg.dim, rng), linear_bias_init(cfg.dim, rng));
  t.o = LinearLayer::create(store, prefix + ".o", width, cfg.dim, true, true, zeros_init(), zeros_init());
  return t;
}

Tensor res_attn_forward(const ResAttnTuner& t, const Tensor& x, const ForwardContext& ctx) {
  check_width("res_attn", x, t.cfg.dim);
  const std::size_t b = x.dim(0), n = x.dim(1);
  Tensor qkv = permute(reshape(t.qkv.forward(x), {b, n, 3, t.cfg.heads, t.cfg.rank}), {2, 0, 3, 1, 4});
  Tensor q = select(qkv, 0, 0);
  Tensor k = select(qkv, 0, 1);
  Tensor v = select(qkv, 0, 2);
  AttentionResult attn = scaled_dot_attention(q, k, v, t.cfg.scale(), t.cfg.attn_drop, ctx);
  Tensor merged = merge_heads(attn.context);
  return dropout(t.o.forward(merged), t.cfg.proj_drop, ctx.training, ctx.rng);
}

// --- Prefix -----------------------------------------------------------------

void PrefixConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("prefix: dim must be a positive multiple of heads");
  if (length == 0) throw ConfigError("prefix: length must be >= 1");
  check_prob("prefix attn_drop", attn_drop);
  check_prob("prefix proj_drop", proj_drop);
}

PrefixTuner prefix_init(const PrefixConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) {
  cfg.validate();
  PrefixTuner t;
  t.cfg = cfg;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  auto uniform = [&rng, bound](std::span<double> v) { fill_uniform(v, -bound, bound, rng); };
  t.keys = store.add(prefix + ".keys", {cfg.heads, cfg.length, cfg.head_dim()}, true, uniform);
  t.values = store.add(prefix + ".values", {cfg.heads, cfg.length, cfg.head_dim()}, true, uniform);
  t.o = LinearLayer::create(store, prefix + ".o", cfg.dim, cfg.dim, true, true, zeros_init(), zeros_init());
  return t;
}

Tensor prefix_forward(const PrefixTuner& t, const Tensor& query, const ForwardContext& ctx) {
  if (query.ndim() != 4 || query.dim(1) != t.cfg.heads || query.dim(3) != t.cfg.head_dim()) {
    throw DimensionError("prefix: query " + shape_str(query.shape()) + " does not match " +
                         std::to_string(t.cfg.heads) + " heads of width " + std::to_string(t.cfg.head_dim()));
  }
  const std::size_t batch = query.dim(0);
  Tensor k = broadcast_batch(t.keys, batch);
  Tensor v = broadcast_batch(t.values, batch);
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.cfg.head_dim()));
  AttentionResult attn = scaled_dot_attention(query, k, v, scale, t.cfg.attn_drop, ctx);
  return dropout(t.o.forward(merge_heads(attn.context)), t.cfg.proj_drop, ctx.training, ctx.rng);
}

// --- Prompt -----------------------------------------------------------------

void PromptConfig::validate() const {
  if (dim == 0) throw ConfigError("prompt: dim must be >= 1");
  if (length == 0) throw ConfigError("prompt: length must be >= 1");
  check_prob("prompt attn_drop", attn_drop);
}

PromptTuner prompt_init(const PromptConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) {
  cfg.validate();
  PromptTuner t;
  t.cfg = cfg;
  t.prompts = store.add(prefix + ".prompts", {cfg.length, cfg.dim}, true, trunc_normal_init(rng, 1.0));
  t.gate = store.add(prefix + ".gate", {1}, true, zeros_init());
  return t;
}

Tensor prompt_forward(const PromptTuner& t, const Tensor& query, const MultiHeadAttention& host,
                      const ForwardContext& ctx) {
  if (host.cfg.dim != t.cfg.dim) {
    throw DimensionError("prompt: tuner width " + std::to_string(t.cfg.dim) + " does not match host attention width " +
                         std::to_string(host.cfg.dim));
  }
  if (query.ndim() != 4 || query.dim(1) != host.cfg.heads || query.dim(3) != host.cfg.head_dim()) {
    throw DimensionError("prompt: query " + shape_str(query.shape()) + " does not match host attention heads");
  }
  const std::size_t batch = query.dim(0);
  auto kv = host.project_kv(reshape(t.prompts, {1, t.cfg.length, t.cfg.dim}), /*with_bias=*/false);
  Shape full{batch, host.cfg.heads, t.cfg.length, host.cfg.head_dim()};
  Tensor k = expand(kv.k, full);
  Tensor v = expand(kv.v, full);
  const double scale = 1.0 / std::sqrt(static_cast<double>(host.cfg.head_dim()));
  AttentionResult attn = scaled_dot_attention(query, k, v, scale, t.cfg.attn_drop, ctx);
  Tensor y = linear(merge_heads(attn.context), host.proj.weight);
  return mul(y, expand(reshape(t.gate, {1, 1, 1}), y.shape()));
}

// --- Adapter ----------------------------------------------------------------

void AdapterConfig::validate() const {
  if (dim == 0 || bottleneck == 0) throw ConfigError("adapter: dim and bottleneck must be >= 1");
}

AdapterTuner adapter_init(const AdapterConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng) {
  cfg.validate();
  AdapterTuner t;
  t.cfg = cfg;
  t.down = LinearLayer::create(store, prefix + ".down", cfg.dim, cfg.bottleneck, true, true,
                               kaiming_uniform_init(cfg.dim, rng), linear_bias_init(cfg.dim, rng));
  t.up = LinearLayer::create(store, prefix + ".up", cfg.bottleneck, cfg.dim, true, true, zeros_init(), zeros_init());
  return t;
}

Tensor adapter_forward(const AdapterTuner& t, const Tensor& x, const ForwardContext&) {
  check_width("adapter", x, t.cfg.dim);
  return t.up.forward(gelu(t.down.forward(x)));
}

// --- Dispatch ---------------------------------------------------------------

Tuner make_tuner(const TunerSpec& spec, std::size_t dim, std::size_t backbone_heads, ParameterStore& store,
                 const std::string& prefix, Rng& rng) {
  spec.validate();
  switch (spec.kind) {
    case TunerKind::ResAttn:
      return res_attn_init({dim, spec.rank, spec.heads, spec.qkv_bias, spec.attn_drop, spec.proj_drop}, store, prefix,
                           rng);
    case TunerKind::Prefix:
      return prefix_init({dim, backbone_heads, spec.length, spec.attn_drop, spec.proj_drop}, store, prefix, rng);
    case TunerKind::Prompt:
      return prompt_init({dim, spec.length, spec.attn_drop}, store, prefix, rng);
    case TunerKind::Adapter:
      return adapter_init({dim, spec.bottleneck}, store, prefix, rng);
  }
  throw ConfigError("unhandled tuner kind");
}

TunerKind kind_of(const Tuner& tuner) {
  struct Visitor {
    TunerKind operator()(const AdapterTuner&) const { return TunerKind::Adapter; }
    TunerKind operator()(const PrefixTuner&) const { return TunerKind::Prefix; }
    TunerKind operator()(const PromptTuner&) const { return TunerKind::Prompt; }
    TunerKind operator()(const ResAttnTuner&) const { return TunerKind::ResAttn; }
  };
  return std::visit(Visitor{}, tuner);
}

Tensor tuner_forward(const Tuner& tuner, const TunerInput& in) {
  struct Visitor {
    const TunerInput& in;
    Tensor operator()(const AdapterTuner& t) const { return adapter_forward(t, in.x, in.ctx); }
    Tensor operator()(const PrefixTuner& t) const { return prefix_forward(t, in.query, in.ctx); }
    Tensor operator()(const PromptTuner& t) const { return prompt_forward(t, in.query, in.host, in.ctx); }
    Tensor operator()(const ResAttnTuner& t) const { return res_attn_forward(t, in.x, in.ctx); }
  };
  return std::visit(Visitor{in}, tuner);
}

std::size_t tuner_param_formula(const TunerSpec& spec, std::size_t dim, bool include_bias) {
  switch (spec.kind) {
    case TunerKind::ResAttn: {
      const std::size_t rh = spec.rank * spec.heads;
      std::size_t n = dim * 3 * rh + rh * dim;
      if (include_bias) n += dim + (spec.qkv_bias ? 3 * rh : 0);
      return n;
    }
    case TunerKind::Prefix:
      return 2 * spec.length * dim + dim * dim + (include_bias ? dim : 0);
    case TunerKind::Prompt:
      return spec.length * dim + 1;
    case TunerKind::Adapter:
      return 2 * dim * spec.bottleneck + (include_bias ? spec.bottleneck + dim : 0);
  }
  return 0;
}

}  // namespace restune
