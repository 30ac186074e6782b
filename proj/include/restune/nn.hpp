#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "restune/parameters.hpp"
#include "restune/rng.hpp"
#include "restune/tensor.hpp"

namespace restune {

// Per-call execution mode. Dropout only fires when `training` is set.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

inline const ForwardContext kEval{};

struct LinearLayer {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weight;               // [in, out]
  std::optional<Tensor> bias;  // [out]

  // Registers `<prefix>.weight` (and `<prefix>.bias`) in the store.
  static LinearLayer create(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                            bool with_bias, bool trainable, const ParameterStore::Init& weight_init,
                            const ParameterStore::Init& bias_init = {});

  Tensor forward(const Tensor& x) const;
};

struct LayerNormLayer {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-6;

  static LayerNormLayer create(ParameterStore& store, const std::string& prefix, std::size_t dim, bool trainable);

  Tensor forward(const Tensor& x) const;
};

struct MHAConfig {
  std::size_t dim = 0;
  std::size_t heads = 1;
  bool qkv_bias = true;
  double attn_drop = 0.0;
  double proj_drop = 0.0;

  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
};

// [B, N, heads * d] -> [B, heads, N, d]
Tensor split_heads(const Tensor& x, std::size_t heads);
// [B, heads, N, d] -> [B, N, heads * d]
Tensor merge_heads(const Tensor& x);

struct AttentionResult {
  Tensor context;  // [B, heads, N, d]
  Tensor weights;  // [B, heads, N, M], post-softmax, pre-dropout
};

// softmax(q k^T * scale) v over the last two dims. k and v are
// [B, heads, M, d]; q is [B, heads, N, d].
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                     double attn_drop, const ForwardContext& ctx);

// Backbone attention with one fused QKV projection of width 3 * dim laid out
// as [q | k | v], each split into heads.
struct MultiHeadAttention {
  MHAConfig cfg;
  LinearLayer qkv;   // [dim, 3 * dim]
  LinearLayer proj;  // [dim, dim]

  static MultiHeadAttention create(ParameterStore& store, const std::string& prefix, const MHAConfig& cfg,
                                   bool trainable, Rng& rng);

  struct Output {
    Tensor y;        // [B, N, dim]
    Tensor q;        // [B, heads, N, head_dim]
    Tensor weights;  // [B, heads, N, N]
  };

  Output forward(const Tensor& x, const ForwardContext& ctx) const;

  // Queries this block would compute for `x` ([B, N, dim]).
  Tensor query(const Tensor& x) const;

  struct KeyValue {
    Tensor k;  // [B, heads, L, head_dim]
    Tensor v;
  };
  // Projects token embeddings [B, L, dim] through the shared K/V projections.
  KeyValue project_kv(const Tensor& tokens, bool with_bias = true) const;
};

struct Mlp {
  LinearLayer fc1;  // [dim, hidden]
  LinearLayer fc2;  // [hidden, dim]

  static Mlp create(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                    bool trainable, Rng& rng);

  Tensor forward(const Tensor& x, double drop, const ForwardContext& ctx) const;
};

// Truncated normal(0, 0.02) weights, used for every backbone projection.
ParameterStore::Init trunc_normal_init(Rng& rng, double stddev = 0.02);

}  // namespace restune
