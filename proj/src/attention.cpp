#include "wf/attention.hpp"

#include <cmath>
#include <limits>

namespace wf {

namespace {
thread_local AttnInstrument* g_attn_instrument = nullptr;

void count_scores(std::int64_t bf, std::int64_t sq, std::int64_t sk, std::int64_t bcast) {
  if (g_attn_instrument) {
    g_attn_instrument->score_pairs += static_cast<std::uint64_t>(bf) * static_cast<std::uint64_t>(sq) *
                                      static_cast<std::uint64_t>(sk) * static_cast<std::uint64_t>(bcast);
  }
}

template <typename S>
void check_grid(const Tensor<S>& t, const std::vector<std::uint8_t>& pad_mask, const char* op) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected [B,C,Np,d_e] grid, got " + shape_str(t.shape()));
  }
  if (static_cast<std::int64_t>(pad_mask.size()) != t.dim(0) * t.dim(1)) {
    throw ShapeError(std::string(op) + ": pad mask size does not match B*C");
  }
}
}  // namespace

AttentionMechanism parse_mechanism(const std::string& name) {
  if (name == "alternating") return AttentionMechanism::alternating;
  if (name == "standard") return AttentionMechanism::standard;
  if (name == "two_axis") return AttentionMechanism::two_axis;
  if (name == "bottleneck") return AttentionMechanism::bottleneck;
  throw ConfigError("unknown attention mechanism '" + name + "'");
}

CostMechanism parse_cost_mechanism(const std::string& name) {
  if (name == "intra") return CostMechanism::intra;
  if (name == "inter") return CostMechanism::inter;
  if (name == "alternating") return CostMechanism::alternating;
  if (name == "standard") return CostMechanism::standard;
  if (name == "two_axis") return CostMechanism::two_axis;
  if (name == "bottleneck") return CostMechanism::bottleneck;
  throw ConfigError("unknown attention mechanism '" + name + "'");
}

std::string to_string(AttentionMechanism m) {
  switch (m) {
    case AttentionMechanism::alternating: return "alternating";
    case AttentionMechanism::standard: return "standard";
    case AttentionMechanism::two_axis: return "two_axis";
    case AttentionMechanism::bottleneck: return "bottleneck";
  }
  return "?";
}

std::string to_string(CostMechanism m) {
  switch (m) {
    case CostMechanism::intra: return "intra";
    case CostMechanism::inter: return "inter";
    case CostMechanism::alternating: return "alternating";
    case CostMechanism::standard: return "standard";
    case CostMechanism::two_axis: return "two_axis";
    case CostMechanism::bottleneck: return "bottleneck";
  }
  return "?";
}

template <typename S>
void MhaParams<S>::validate() const {
  const std::int64_t de = w_q.dim(0);
  for (const Tensor<S>* w : {&w_q, &w_k, &w_v, &w_o}) {
    if (w->rank() != 2 || w->dim(0) != de || w->dim(1) != de) {
      throw ConfigError("MhaParams: projections must all be [" + std::to_string(de) + "," +
                        std::to_string(de) + "]");
    }
  }
  if (heads < 1 || de % heads != 0) {
    throw ConfigError("MhaParams: d_e=" + std::to_string(de) + " not divisible by H=" +
                      std::to_string(heads));
  }
}

template <typename S>
MhaParams<S> MhaParams<S>::init(std::int64_t d_e, std::int64_t heads, Rng& rng,
                                bool requires_grad) {
  MhaParams p;
  p.heads = heads;
  for (Tensor<S>* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    *w = Tensor<S>::zeros({d_e, d_e}, requires_grad);
    for (auto& v : w->data()) v = static_cast<S>(rng.trunc_normal(0.02));
  }
  p.validate();
  return p;
}

AttnInstrument* active_attn_instrument() { return g_attn_instrument; }

AttnInstrumentScope::AttnInstrumentScope(AttnInstrument& inst)
    : prev_(g_attn_instrument), alloc_scope_(inst.alloc) {
  g_attn_instrument = &inst;
}

AttnInstrumentScope::~AttnInstrumentScope() { g_attn_instrument = prev_; }

template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, std::int64_t heads) {
  const std::int64_t bf = x.dim(0), s = x.dim(1), de = x.dim(2);
  return permute(reshape(x, {bf, s, heads, de / heads}), {0, 2, 1, 3});
}

template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  const std::int64_t bf = x.dim(0), h = x.dim(1), s = x.dim(2), hd = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {bf, s, h * hd});
}

template <typename S>
Tensor<S> key_bias_from_mask(const std::vector<std::uint8_t>& key_mask, std::int64_t bf,
                             std::int64_t s) {
  if (static_cast<std::int64_t>(key_mask.size()) != bf * s) {
    throw ShapeError("key_bias_from_mask: mask size mismatch");
  }
  Tensor<S> bias = Tensor<S>::zeros({bf, 1, 1, s});
  auto d = bias.data();
  constexpr S kNegInf = -std::numeric_limits<S>::infinity();
  for (std::int64_t i = 0; i < bf * s; ++i) {
    if (!key_mask[static_cast<std::size_t>(i)]) d[i] = kNegInf;
  }
  return bias;
}

template <typename S>
Tensor<S> attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                         const Tensor<S>* key_bias, std::int64_t instrument_bcast) {
  const std::int64_t bf = q.dim(0), sq = q.dim(2), sk = k.dim(2), hd = q.dim(3);
  count_scores(bf, sq, sk, instrument_bcast);
  Tensor<S> scores = mul_scalar(matmul_nt(q, k), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  if (key_bias) scores = add(scores, *key_bias);
  Tensor<S> weights = softmax(scores, -1);
  return matmul(weights, v);
}

template <typename S>
Tensor<S> mha(const Tensor<S>& x, const MhaParams<S>& params,
              const std::vector<std::uint8_t>& key_mask) {
  params.validate();
  if (x.rank() != 3 || x.dim(2) != params.d_e()) {
    throw ShapeError("mha: expected [Bf,S," + std::to_string(params.d_e()) + "], got " +
                     shape_str(x.shape()));
  }
  const std::int64_t bf = x.dim(0), s = x.dim(1);
  Tensor<S> q = split_heads(matmul_nt(x, params.w_q), params.heads);
  Tensor<S> k = split_heads(matmul_nt(x, params.w_k), params.heads);
  Tensor<S> v = split_heads(matmul_nt(x, params.w_v), params.heads);
  Tensor<S> bias = key_bias_from_mask<S>(key_mask, bf, s);
  Tensor<S> ctx = attention_core(q, k, v, &bias);
  return matmul_nt(merge_heads(ctx), params.w_o);
}

// ---- mechanism folds --------------------------------------------------------

namespace {

// Fold the grid so the layout's mixing axis becomes the sequence; the other
// axes join the batch.
template <typename S>
Tensor<S> fold_grid(const Tensor<S>& t, AttentionLayout layout) {
  const std::int64_t b = t.dim(0), c = t.dim(1), np = t.dim(2), de = t.dim(3);
  switch (layout.axis) {
    case AttentionAxis::over_patches: return reshape(t, {b * c, np, de});
    case AttentionAxis::over_channels: return reshape(permute(t, {0, 2, 1, 3}), {b * np, c, de});
    case AttentionAxis::flat: return reshape(t, {b, c * np, de});
  }
  throw ContractError("fold_grid: unknown layout");
}

template <typename S>
Tensor<S> unfold_grid(const Tensor<S>& x, AttentionLayout layout, std::int64_t b, std::int64_t c,
                      std::int64_t np, std::int64_t de) {
  switch (layout.axis) {
    case AttentionAxis::over_patches: return reshape(x, {b, c, np, de});
    case AttentionAxis::over_channels: return permute(reshape(x, {b, np, c, de}), {0, 2, 1, 3});
    case AttentionAxis::flat: return reshape(x, {b, c, np, de});
  }
  throw ContractError("unfold_grid: unknown layout");
}

// Key mask in the folded layout. Pad channels are unattendable keys; under
// over_patches a pad channel becomes a fully masked sequence.
std::vector<std::uint8_t> fold_key_mask(const std::vector<std::uint8_t>& pad_mask,
                                        AttentionLayout layout, std::int64_t b, std::int64_t c,
                                        std::int64_t np) {
  std::vector<std::uint8_t> key_mask;
  switch (layout.axis) {
    case AttentionAxis::over_patches:
    case AttentionAxis::flat:
      key_mask.resize(static_cast<std::size_t>(b * c * np));
      for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const std::uint8_t real = pad_mask[static_cast<std::size_t>(bc)];
        for (std::int64_t i = 0; i < np; ++i) {
          key_mask[static_cast<std::size_t>(bc * np + i)] = real;
        }
      }
      break;
    case AttentionAxis::over_channels:
      key_mask.resize(static_cast<std::size_t>(b * np * c));
      for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t i = 0; i < np; ++i) {
          for (std::int64_t ci = 0; ci < c; ++ci) {
            key_mask[static_cast<std::size_t>((bi * np + i) * c + ci)] =
                pad_mask[static_cast<std::size_t>(bi * c + ci)];
          }
        }
      }
      break;
  }
  return key_mask;
}

template <typename S>
Tensor<S> axis_attention(const Tensor<S>& t, const MhaParams<S>& params,
                         const std::vector<std::uint8_t>& pad_mask, AttentionLayout layout,
                         const char* op) {
  check_grid(t, pad_mask, op);
  const std::int64_t b = t.dim(0), c = t.dim(1), np = t.dim(2), de = t.dim(3);
  const auto key_mask = fold_key_mask(pad_mask, layout, b, c, np);
  Tensor<S> out = mha(fold_grid(t, layout), params, key_mask);
  return unfold_grid(out, layout, b, c, np, de);
}

}  // namespace

template <typename S>
Tensor<S> intra_channel_attention(const Tensor<S>& t, const MhaParams<S>& params,
                                  const std::vector<std::uint8_t>& pad_mask) {
  return axis_attention(t, params, pad_mask, {AttentionAxis::over_patches},
                        "intra_channel_attention");
}

template <typename S>
Tensor<S> inter_channel_attention(const Tensor<S>& t, const MhaParams<S>& params,
                                  const std::vector<std::uint8_t>& pad_mask) {
  check_grid(t, pad_mask, "inter_channel_attention");
  const std::int64_t b = t.dim(0), c = t.dim(1);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    bool any = false;
    for (std::int64_t ci = 0; ci < c; ++ci) any = any || pad_mask[static_cast<std::size_t>(bi * c + ci)];
    if (!any) throw ContractError("inter_channel_attention: example " + std::to_string(bi) +
                                  " has zero real channels");
  }
  return axis_attention(t, params, pad_mask, {AttentionAxis::over_channels},
                        "inter_channel_attention");
}

template <typename S>
Tensor<S> standard_attention(const Tensor<S>& t, const MhaParams<S>& params,
                             const std::vector<std::uint8_t>& pad_mask) {
  return axis_attention(t, params, pad_mask, {AttentionAxis::flat}, "standard_attention");
}

template <typename S>
Tensor<S> two_axis_attention(const Tensor<S>& t, const MhaParams<S>& params_c,
                             const MhaParams<S>& params_p,
                             const std::vector<std::uint8_t>& pad_mask) {
  Tensor<S> a1 = inter_channel_attention(t, params_c, pad_mask);
  Tensor<S> a2 = intra_channel_attention(t, params_p, pad_mask);
  return mul_scalar(add(a1, a2), S(0.5));
}

// ---- bottleneck -------------------------------------------------------------

namespace {

// Mean over Np: [B, C, Np, d_e] -> [B, C, 1, d_e]. The time axis carries no
// padding, so this is a plain mean.
template <typename S>
Tensor<S> pool_patches(const Tensor<S>& x) {
  return mul_scalar(reduce_sum(x, {2}, true), static_cast<S>(1.0 / static_cast<double>(x.dim(2))));
}

// Mean over real channels only: [B, C, Np, d_e] -> [B, 1, Np, d_e].
template <typename S>
Tensor<S> pool_real_channels(const Tensor<S>& x, const std::vector<std::uint8_t>& pad_mask) {
  const std::int64_t b = x.dim(0), c = x.dim(1);
  Tensor<S> real01 = Tensor<S>::zeros({b, c, 1, 1});
  Tensor<S> inv_count = Tensor<S>::zeros({b, 1, 1, 1});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::int64_t n = 0;
    for (std::int64_t ci = 0; ci < c; ++ci) {
      if (pad_mask[static_cast<std::size_t>(bi * c + ci)]) {
        real01.data()[bi * c + ci] = S(1);
        ++n;
      }
    }
    if (n == 0) throw ContractError("bottleneck_attention: example has zero real channels");
    inv_count.data()[bi] = static_cast<S>(1.0 / static_cast<double>(n));
  }
  return mul(reduce_sum(mul(x, real01), {1}, true), inv_count);
}

}  // namespace

template <typename S>
Tensor<S> bottleneck_channel_stage(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                   const std::vector<std::uint8_t>& pad_mask,
                                   std::int64_t heads) {
  const std::int64_t b = q.dim(0), c = q.dim(1), np = q.dim(2), de = q.dim(3);
  Tensor<S> qp = reshape(pool_patches(q), {b, c, de});
  Tensor<S> kp = reshape(pool_patches(k), {b, c, de});
  Tensor<S> vp = reshape(pool_patches(v), {b, c, de});
  Tensor<S> bias = key_bias_from_mask<S>(pad_mask, b, c);
  // The channel-attention result is reused at every patch position, hence
  // the Np broadcast factor in the instrumented count.
  Tensor<S> ctx = attention_core(split_heads(qp, heads), split_heads(kp, heads),
                                 split_heads(vp, heads), &bias, np);
  return reshape(merge_heads(ctx), {b, c, 1, de});
}

template <typename S>
Tensor<S> bottleneck_patch_stage(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& a1,
                                 const std::vector<std::uint8_t>& pad_mask, std::int64_t heads) {
  const std::int64_t b = q.dim(0), c = q.dim(1), np = q.dim(2), de = q.dim(3);
  const std::int64_t hd = de / heads;
  Tensor<S> qc = reshape(pool_real_channels(q, pad_mask), {b, np, de});
  Tensor<S> kc = reshape(pool_real_channels(k, pad_mask), {b, np, de});
  Tensor<S> qh = split_heads(qc, heads);  // [B, H, Np, hd]
  Tensor<S> kh = split_heads(kc, heads);
  count_scores(b, np, np, c);
  Tensor<S> scores = mul_scalar(matmul_nt(qh, kh), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  Tensor<S> weights = softmax(scores, -1);
  // Shared patch weights applied per channel to the broadcast channel-stage
  // values: [B,C,H,Np,Np] x [B,C,H,Np,hd].
  Tensor<S> wb = broadcast_to(reshape(weights, {b, 1, heads, np, np}), {b, c, heads, np, np});
  Tensor<S> vals = broadcast_to(a1, {b, c, np, de});
  Tensor<S> vh = permute(reshape(vals, {b, c, np, heads, hd}), {0, 1, 3, 2, 4});
  Tensor<S> ctx = matmul(wb, vh);  // [B, C, H, Np, hd]
  return reshape(permute(ctx, {0, 1, 3, 2, 4}), {b, c, np, de});
}

template <typename S>
Tensor<S> bottleneck_attention(const Tensor<S>& t, const MhaParams<S>& params,
                               const std::vector<std::uint8_t>& pad_mask) {
  check_grid(t, pad_mask, "bottleneck_attention");
  params.validate();
  Tensor<S> q = matmul_nt(t, params.w_q);
  Tensor<S> k = matmul_nt(t, params.w_k);
  Tensor<S> v = matmul_nt(t, params.w_v);
  Tensor<S> a1 = bottleneck_channel_stage(q, k, v, pad_mask, params.heads);
  Tensor<S> ctx = bottleneck_patch_stage(q, k, a1, pad_mask, params.heads);
  return matmul_nt(ctx, params.w_o);
}

CostReport attention_cost(CostMechanism mechanism, std::int64_t channels, std::int64_t np,
                          std::int64_t d_e) {
  if (channels < 1 || np < 1 || d_e < 1) {
    throw ContractError("attention_cost: arguments must be positive");
  }
  const std::uint64_t c = static_cast<std::uint64_t>(channels);
  const std::uint64_t p = static_cast<std::uint64_t>(np);
  CostReport r;
  r.mechanism = mechanism;
  r.channels = channels;
  r.np = np;
  r.d_e = d_e;
  switch (mechanism) {
    case CostMechanism::intra: r.score_elements = c * p * p; break;
    case CostMechanism::inter: r.score_elements = c * c * p; break;
    case CostMechanism::alternating:
      // Per-layer worst case of the two halves.
      r.score_elements = std::max(c * p * p, c * c * p);
      break;
    case CostMechanism::standard: r.score_elements = c * p * c * p; break;
    case CostMechanism::two_axis:
    case CostMechanism::bottleneck: r.score_elements = c * p * (c + p); break;
  }
  r.score_flops = r.score_elements * static_cast<std::uint64_t>(d_e);
  return r;
}

#define WF_INSTANTIATE_ATTENTION(S)                                                              \
  template struct MhaParams<S>;                                                                  \
  template Tensor<S> split_heads(const Tensor<S>&, std::int64_t);                                \
  template Tensor<S> merge_heads(const Tensor<S>&);                                              \
  template Tensor<S> key_bias_from_mask<S>(const std::vector<std::uint8_t>&, std::int64_t,       \
                                           std::int64_t);                                        \
  template Tensor<S> attention_core(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,        \
                                    const Tensor<S>*, std::int64_t);                             \
  template Tensor<S> mha(const Tensor<S>&, const MhaParams<S>&,                                  \
                         const std::vector<std::uint8_t>&);                                      \
  template Tensor<S> intra_channel_attention(const Tensor<S>&, const MhaParams<S>&,              \
                                             const std::vector<std::uint8_t>&);                  \
  template Tensor<S> inter_channel_attention(const Tensor<S>&, const MhaParams<S>&,              \
                                             const std::vector<std::uint8_t>&);                  \
  template Tensor<S> standard_attention(const Tensor<S>&, const MhaParams<S>&,                   \
                                        const std::vector<std::uint8_t>&);                       \
  template Tensor<S> two_axis_attention(const Tensor<S>&, const MhaParams<S>&,                   \
                                        const MhaParams<S>&, const std::vector<std::uint8_t>&);  \
  template Tensor<S> bottleneck_channel_stage(const Tensor<S>&, const Tensor<S>&,                \
                                              const Tensor<S>&, const std::vector<std::uint8_t>&,\
                                              std::int64_t);                                     \
  template Tensor<S> bottleneck_patch_stage(const Tensor<S>&, const Tensor<S>&,                  \
                                            const Tensor<S>&, const std::vector<std::uint8_t>&,  \
                                            std::int64_t);                                       \
  template Tensor<S> bottleneck_attention(const Tensor<S>&, const MhaParams<S>&,                 \
                                          const std::vector<std::uint8_t>&);

WF_INSTANTIATE_ATTENTION(float)
WF_INSTANTIATE_ATTENTION(double)

#undef WF_INSTANTIATE_ATTENTION

}  // namespace wf
