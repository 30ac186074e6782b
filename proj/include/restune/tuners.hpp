#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <variant>

#include "restune/nn.hpp"
#include "restune/parameters.hpp"
#include "restune/rng.hpp"
#include "restune/tensor.hpp"

namespace restune {

enum class TunerKind { Adapter, Prefix, Prompt, ResAttn };
enum class AttachPoint { MHA, FFN, Block };

std::string_view to_string(TunerKind kind);
std::string_view to_string(AttachPoint op);
TunerKind parse_tuner_kind(std::string_view text);
AttachPoint parse_attach_point(std::string_view text);

// Declarative description of one tuner, independent of the backbone width.
struct TunerSpec {
  TunerKind kind = TunerKind::ResAttn;
  std::size_t rank = 4;        // res_attn: per-head low-rank width
  std::size_t heads = 4;       // res_attn: tuner head count
  bool qkv_bias = false;       // res_attn
  double attn_drop = 0.0;      // res_attn, prefix, prompt
  double proj_drop = 0.0;      // res_attn, prefix
  std::size_t length = 10;     // prefix / prompt token count
  std::size_t bottleneck = 4;  // adapter width

  void validate() const;
  bool operator==(const TunerSpec&) const = default;
};

struct AttachSpec {
  std::size_t block = 0;
  AttachPoint op = AttachPoint::MHA;
  TunerSpec tuner;

  bool operator==(const AttachSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Res-Attn: an independent low-rank multi-head self-attention.
//   qkv: [dim, 3 * rank * heads], kaiming-uniform(a = sqrt(5))
//   o:   [rank * heads, dim] with bias, zero-initialised
// ---------------------------------------------------------------------------

struct ResAttnConfig {
  std::size_t dim = 0;
  std::size_t rank = 4;
  std::size_t heads = 4;
  bool qkv_bias = false;
  double attn_drop = 0.0;
  double proj_drop = 0.0;

  // Attention temperature rank^-0.5.
  double scale() const;
  void validate() const;
};

struct ResAttnTuner {
  ResAttnConfig cfg;
  LinearLayer qkv;
  LinearLayer o;
};

ResAttnTuner res_attn_init(const ResAttnConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng);
Tensor res_attn_forward(const ResAttnTuner& t, const Tensor& x, const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Parallel prefix: backbone queries attend over trainable keys/values.
// ---------------------------------------------------------------------------

struct PrefixConfig {
  std::size_t dim = 0;
  std::size_t heads = 1;  // must equal the host attention's head count
  std::size_t length = 10;
  double attn_drop = 0.0;
  double proj_drop = 0.0;

  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
};

struct PrefixTuner {
  PrefixConfig cfg;
  Tensor keys;    // [heads, length, head_dim]
  Tensor values;  // [heads, length, head_dim]
  LinearLayer o;  // [dim, dim], zero-initialised
};

PrefixTuner prefix_init(const PrefixConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng);
// query: [B, heads, N, head_dim] from the host attention.
Tensor prefix_forward(const PrefixTuner& t, const Tensor& query, const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Parallel prompt: trainable prompt tokens projected by the host attention's
// frozen K/V weights; result mapped back through the frozen output weight and
// scaled by a trainable scalar gate. The shared projections are applied
// without their biases. Prompts start random so their rows are not tied; the
// zero-initialised gate gives the zero output at construction.
// ---------------------------------------------------------------------------

struct PromptConfig {
  std::size_t dim = 0;
  std::size_t length = 10;
  double attn_drop = 0.0;

  void validate() const;
};

struct PromptTuner {
  PromptConfig cfg;
  Tensor prompts;  // [length, dim]
  Tensor gate;     // [1], zero-initialised
};

PromptTuner prompt_init(const PromptConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng);
Tensor prompt_forward(const PromptTuner& t, const Tensor& query, const MultiHeadAttention& host,
                      const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Parallel adapter: up(gelu(down(x))) with `up` zero-initialised.
// ---------------------------------------------------------------------------

struct AdapterConfig {
  std::size_t dim = 0;
  std::size_t bottleneck = 4;

  void validate() const;
};

struct AdapterTuner {
  AdapterConfig cfg;
  LinearLayer down;  // [dim, bottleneck]
  LinearLayer up;    // [bottleneck, dim]
};

AdapterTuner adapter_init(const AdapterConfig& cfg, ParameterStore& store, const std::string& prefix, Rng& rng);
Tensor adapter_forward(const AdapterTuner& t, const Tensor& x, const ForwardContext& ctx);

// ---------------------------------------------------------------------------

using Tuner = std::variant<AdapterTuner, PrefixTuner, PromptTuner, ResAttnTuner>;

// Builds the tuner described by `spec` for a backbone of width `dim` whose
// attention has `backbone_heads` heads.
Tuner make_tuner(const TunerSpec& spec, std::size_t dim, std::size_t backbone_heads, ParameterStore& store,
                 const std::string& prefix, Rng& rng);

TunerKind kind_of(const Tuner& tuner);

// Everything a tuner at one slot may read: the slot input, the queries the
// host attention computes for it, and the host attention itself.
struct TunerInput {
  const Tensor& x;
  const Tensor& query;
  const MultiHeadAttention& host;
  const ForwardContext& ctx;
};

Tensor tuner_forward(const Tuner& tuner, const TunerInput& in);

// Closed-form trainable parameter count of one tuner. With include_bias
// false, every bias vector inside the tuner is left out.
std::size_t tuner_param_formula(const TunerSpec& spec, std::size_t dim, bool include_bias);

}  // namespace restune
