#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wf/rng.hpp"
#include "wf/tensor.hpp"

namespace wf {

// Hard ingestion bound on channel count; recording devices top out well below
// this, and it caps the padded context length.
constexpr std::int64_t kMaxChannels = 64;

// Raw multi-channel waveform, time-major [T, C].
template <typename S>
struct Recording {
  std::int64_t t = 0;
  std::int64_t c = 0;
  std::vector<S> samples;
  double sampling_rate = 0.0;
  std::vector<std::string> channel_ids;

  S at(std::int64_t ti, std::int64_t ci) const { return samples[static_cast<std::size_t>(ti * c + ci)]; }
  void validate() const;
};

// Non-overlapping (or strided) patches of one recording: [Np, C, L].
template <typename S>
struct PatchGrid {
  Tensor<S> patches;
  std::int64_t patch_len = 0;
  std::int64_t stride = 0;

  std::int64_t np() const { return patches.dim(0); }
  std::int64_t channels() const { return patches.dim(1); }
};

// Learnable tokenization parameters.
template <typename S>
struct EmbeddingParams {
  Tensor<S> w_proj;      // [d_e, L]
  Tensor<S> w_pos;       // [Np_max, d_e]
  Tensor<S> w_chan;      // [C_max, d_e]
  Tensor<S> mask_token;  // [d_e]
  Tensor<S> pad_token;   // [d_e]
  std::int64_t d_e = 0;
  std::int64_t patch_len = 0;
  std::int64_t np_max = 0;
  std::int64_t c_max = 0;

  static EmbeddingParams init(std::int64_t d_e, std::int64_t patch_len, std::int64_t np_max,
                              std::int64_t c_max, Rng& rng, bool requires_grad = true);
};

// Everything needed to (re)build a token batch: the per-example patch grids,
// the channel-id mapping, padding width, and the masking knobs. The ops
// embed / pad_channels / mask_tokens transform the recipe and rebuild.
template <typename S>
struct TokenRecipe {
  std::vector<PatchGrid<S>> grids;
  std::vector<std::vector<std::int64_t>> channel_offsets;  // per example, per channel
  std::int64_t c_total = 0;                                // channels incl. pads
  double mask_ratio = 0.0;
  std::uint64_t mask_seed = 0;
  bool masked = false;
};

// Embedded token grid plus pad/mask bookkeeping.
template <typename S>
struct TokenBatch {
  Tensor<S> tokens;  // [B, C_total, Np, d_e]
  std::vector<std::uint8_t> pad_mask;  // [B, C_total], 1 = real channel
  std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> mask_set;  // per example (c, i)
  Tensor<S> raw_patches;  // [B, C_total, Np, L], zeros at pad channels
  std::int64_t batch = 0;
  std::int64_t c_total = 0;
  std::int64_t np = 0;

  TokenRecipe<S> recipe;  // retained so pad/mask transforms can rebuild

  bool is_real(std::int64_t b, std::int64_t c) const {
    return pad_mask[static_cast<std::size_t>(b * c_total + c)] != 0;
  }
  std::int64_t real_channels(std::int64_t b) const;
};

// Slice a recording into patches of length L with stride `stride`;
// Np = floor((T-L)/stride + 1), trailing samples are dropped.
template <typename S>
PatchGrid<S> patch(const Recording<S>& rec, std::int64_t patch_len, std::int64_t stride);

// Build the embedded batch for an arbitrary recipe (the one-shot path used
// by training).
template <typename S>
TokenBatch<S> build_token_batch(TokenRecipe<S> recipe, const EmbeddingParams<S>& params);

// token(c,i) = W_proj * patch(c,i) + W_pos[i] + W_chan[offsets[c]]; no pads,
// no masking.
template <typename S>
TokenBatch<S> embed(const PatchGrid<S>& grid, const EmbeddingParams<S>& params,
                    const std::vector<std::int64_t>& channel_offsets);

// Extend to c_max channels filled with pad_token + W_pos[i].
template <typename S>
TokenBatch<S> pad_channels(const TokenBatch<S>& batch, const EmbeddingParams<S>& params,
                           std::int64_t c_max);

// Replace round(ratio * C_real * Np) uniformly sampled real positions with
// mask_token + W_pos[i] + W_chan[c]; deterministic under (seed, shape).
template <typename S>
TokenBatch<S> mask_tokens(const TokenBatch<S>& batch, const EmbeddingParams<S>& params,
                          double ratio, std::uint64_t seed);

// round-half-to-even mask count for a single example.
std::int64_t mask_count(double ratio, std::int64_t real_channels, std::int64_t np);

}  // namespace wf
