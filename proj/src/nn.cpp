#include "restune/nn.hpp"

#include <cmath>

#include "restune/errors.hpp"
#include "restune/ops.hpp"

namespace restune {

LinearLayer LinearLayer::create(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                                bool with_bias, bool trainable, const ParameterStore::Init& weight_init,
                                const ParameterStore::Init& bias_init) {
  LinearLayer layer;
  layer.in_features = in;
  layer.out_features = out;
  layer.weight = store.add(prefix + ".weight", {in, out}, trainable, weight_init);
  if (with_bias) layer.bias = store.add(prefix + ".bias", {out}, trainable, bias_init);
  return layer;
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, weight, bias); }

LayerNormLayer LayerNormLayer::create(ParameterStore& store, const std::string& prefix, std::size_t dim,
                                      bool trainable) {
  LayerNormLayer ln;
  ln.gamma = store.add(prefix + ".weight", {dim}, trainable, ones_init());
  ln.beta = store.add(prefix + ".bias", {dim}, trainable);
  return ln;
}

Tensor LayerNormLayer::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void MHAConfig::validate() const {
  if (dim == 0 || heads == 0) throw ConfigError("attention dim and heads must be >= 1");
  if (dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob_ok(attn_drop) || !prob_ok(proj_drop)) throw ConfigError("dropout probabilities must lie in [0, 1]");
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.ndim() != 3 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2) / heads;
  return permute(reshape(x, {b, n, heads, d}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("merge_heads: expected [B, heads, N, d], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), n = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * d});
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                     double attn_drop, const ForwardContext& ctx) {
  Tensor weights = softmax_lastdim(restune::scale(matmul(q, transpose_last2(k)), scale));
  Tensor dropped = dropout(weights, attn_drop, ctx.training, ctx.rng);
  return {matmul(dropped, v), weights};
}

MultiHeadAttention MultiHeadAttention::create(ParameterStore& store, const std::string& prefix, const MHAConfig& cfg,
                                              bool trainable, Rng& rng) {
  cfg.validate();
  MultiHeadAttention mha;
  mha.cfg = cfg;
  mha.qkv = LinearLayer::create(store, prefix + ".qkv", cfg.dim, 3 * cfg.dim, cfg.qkv_bias, trainable,
                                trunc_normal_init(rng));
  mha.proj = LinearLayer::create(store, prefix + ".proj", cfg.dim, cfg.dim, true, trainable, trunc_normal_init(rng));
  return mha;
}

namespace {

// qkv(x) as [3, B, heads, N, head_dim].
Tensor fused_qkv(const MultiHeadAttention& mha, const Tensor& x, bool with_bias = true) {
  if (x.ndim() != 3 || x.dim(2) != mha.cfg.dim) {
    throw DimensionError("attention input " + shape_str(x.shape()) + " does not match width " +
                         std::to_string(mha.cfg.dim));
  }
  const std::size_t b = x.dim(0), n = x.dim(1);
  Tensor projected = with_bias ? mha.qkv.forward(x) : linear(x, mha.qkv.weight);
  Tensor qkv = reshape(projected, {b, n, 3, mha.cfg.heads, mha.cfg.head_dim()});
  return permute(qkv, {2, 0, 3, 1, 4});
}

}  // namespace

MultiHeadAttention::Output MultiHeadAttention::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor qkv_heads = fused_qkv(*this, x);
  Tensor q = select(qkv_heads, 0, 0);
  Tensor k = select(qkv_heads, 0, 1);
  Tensor v = select(qkv_heads, 0, 2);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  AttentionResult attn = scaled_dot_attention(q, k, v, scale, cfg.attn_drop, ctx);
  Tensor y = dropout(proj.forward(merge_heads(attn.context)), cfg.proj_drop, ctx.training, ctx.rng);
  return {y, q, attn.weights};
}

Tensor MultiHeadAttention::query(const Tensor& x) const { return select(fused_qkv(*this, x), 0, 0); }

MultiHeadAttention::KeyValue MultiHeadAttention::project_kv(const Tensor& tokens, bool with_bias) const {
  Tensor qkv_heads = fused_qkv(*this, tokens, with_bias);
  return {select(qkv_heads, 0, 1), select(qkv_heads, 0, 2)};
}

Mlp Mlp::create(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                bool trainable, Rng& rng) {
  Mlp mlp;
  mlp.fc1 = LinearLayer::create(store, prefix + ".fc1", dim, hidden, true, trainable, trunc_normal_init(rng));
  mlp.fc2 = LinearLayer::create(store, prefix + ".fc2", hidden, dim, true, trainable, trunc_normal_init(rng));
  return mlp;
}

Tensor Mlp::forward(const Tensor& x, double drop, const ForwardContext& ctx) const {
  Tensor h = dropout(gelu(fc1.forward(x)), drop, ctx.training, ctx.rng);
  return dropout(fc2.forward(h), drop, ctx.training, ctx.rng);
}

ParameterStore::Init trunc_normal_init(Rng& rng, double stddev) {
  return [&rng, stddev](std::span<double> v) { fill_trunc_normal(v, stddev, rng); };
}

}  // namespace restune
