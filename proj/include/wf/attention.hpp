#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wf/rng.hpp"
#include "wf/tensor.hpp"

namespace wf {

// Model-level attention strategies with a uniform forward contract.
enum class AttentionMechanism { alternating, standard, two_axis, bottleneck };

// Cost accounting also addresses the two alternating halves individually.
enum class CostMechanism { intra, inter, alternating, standard, two_axis, bottleneck };

AttentionMechanism parse_mechanism(const std::string& name);
CostMechanism parse_cost_mechanism(const std::string& name);
std::string to_string(AttentionMechanism m);
std::string to_string(CostMechanism m);

// Which axis an attention application mixes; the other grid axes fold into
// the batch.
enum class AttentionAxis { over_patches, over_channels, flat };

struct AttentionLayout {
  AttentionAxis axis = AttentionAxis::flat;
};

template <typename S>
struct MhaParams {
  Tensor<S> w_q, w_k, w_v, w_o;  // [d_e, d_e]
  std::int64_t heads = 1;

  std::int64_t d_e() const { return w_q.dim(0); }
  std::int64_t head_dim() const { return d_e() / heads; }
  void validate() const;

  static MhaParams init(std::int64_t d_e, std::int64_t heads, Rng& rng,
                        bool requires_grad = true);
};

// Analytic and measured cost of one attention application at a sweep point.
struct CostReport {
  CostMechanism mechanism = CostMechanism::standard;
  std::string config_name;
  std::int64_t channels = 0;
  std::int64_t np = 0;
  std::int64_t d_e = 0;
  std::uint64_t score_elements = 0;
  std::uint64_t score_flops = 0;
  double median_ns = 0.0;
  std::uint64_t peak_bytes = 0;
  std::string status = "ok";
};

// Forward-pass instrumentation. score_pairs counts query-key interactions
// per logical output position (broadcast reuse included), which reproduces
// the closed-form element counts exactly; the alloc meter tracks transient
// tensor buffers on the attention path.
struct AttnInstrument {
  std::uint64_t score_pairs = 0;
  AllocMeter alloc;
};

AttnInstrument* active_attn_instrument();

class AttnInstrumentScope {
 public:
  explicit AttnInstrumentScope(AttnInstrument& inst);
  ~AttnInstrumentScope();
  AttnInstrumentScope(const AttnInstrumentScope&) = delete;
  AttnInstrumentScope& operator=(const AttnInstrumentScope&) = delete;

 private:
  AttnInstrument* prev_;
  AllocMeterScope alloc_scope_;
};

// Multi-head attention over x: [Bf, S, d_e]. key_mask is [Bf, S] with 1 =
// attendable; masked keys receive exactly zero weight (additive -inf before
// softmax) and fully masked query rows output zero.
template <typename S>
Tensor<S> mha(const Tensor<S>& x, const MhaParams<S>& params,
              const std::vector<std::uint8_t>& key_mask);

// Scores/softmax/weighted-sum on pre-projected per-head tensors
// q,k,v: [Bf, H, S, hd]. Exposed so the benchmark can time the part of the
// mechanism whose complexity the analytic model covers. instrument_bcast is
// the number of logical output positions each score row serves.
template <typename S>
Tensor<S> attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                         const Tensor<S>* key_bias, std::int64_t instrument_bcast = 1);

// Head split/merge between [Bf, S, d_e] and [Bf, H, S, hd].
template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, std::int64_t heads);
template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x);

// Additive 0/-inf key bias [Bf, 1, 1, S] from a 0/1 mask.
template <typename S>
Tensor<S> key_bias_from_mask(const std::vector<std::uint8_t>& key_mask, std::int64_t bf,
                             std::int64_t s);

// The four mechanisms. All take a token grid t: [B, C, Np, d_e] and the
// per-example channel pad mask [B, C] (1 = real), and return the same shape.

// Attention over the Np patches within each channel; pad channels come back
// all-zero (every key masked).
template <typename S>
Tensor<S> intra_channel_attention(const Tensor<S>& t, const MhaParams<S>& params,
                                  const std::vector<std::uint8_t>& pad_mask);

// Attention across the C channels at each patch index; pad channels are
// masked as keys. Every example needs at least one real channel.
template <typename S>
Tensor<S> inter_channel_attention(const Tensor<S>& t, const MhaParams<S>& params,
                                  const std::vector<std::uint8_t>& pad_mask);

// Full attention over the flattened C*Np sequence.
template <typename S>
Tensor<S> standard_attention(const Tensor<S>& t, const MhaParams<S>& params,
                             const std::vector<std::uint8_t>& pad_mask);

// Mean of inter-channel attention (params_c) and intra-channel attention
// (params_p).
template <typename S>
Tensor<S> two_axis_attention(const Tensor<S>& t, const MhaParams<S>& params_c,
                             const MhaParams<S>& params_p,
                             const std::vector<std::uint8_t>& pad_mask);

// Pooled-query/key scheme: channel attention on Np-pooled tokens, then patch
// attention with the broadcast channel result as values. Pad channels are
// excluded from both pools.
template <typename S>
Tensor<S> bottleneck_attention(const Tensor<S>& t, const MhaParams<S>& params,
                               const std::vector<std::uint8_t>& pad_mask);

// Bottleneck stages on pre-projected q,k,v: [B, C, Np, d_e]; exposed for the
// benchmark's core timing.
template <typename S>
Tensor<S> bottleneck_channel_stage(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                   const std::vector<std::uint8_t>& pad_mask,
                                   std::int64_t heads);
template <typename S>
Tensor<S> bottleneck_patch_stage(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& a1,
                                 const std::vector<std::uint8_t>& pad_mask, std::int64_t heads);

// Closed-form score-element / FLOP counts (Table-2 style):
//   intra C*Np^2 | inter C^2*Np | alternating max(intra, inter) per layer |
//   standard (C*Np)^2 | two_axis and bottleneck C*Np*(C+Np);
// score_flops = score_elements * d_e.
CostReport attention_cost(CostMechanism mechanism, std::int64_t channels, std::int64_t np,
                          std::int64_t d_e);

}  // namespace wf
