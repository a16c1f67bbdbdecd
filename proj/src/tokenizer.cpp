#include "wf/tokenizer.hpp"

#include <cfenv>
#include <cmath>

namespace wf {

template <typename S>
void Recording<S>::validate() const {
  if (t < 1) throw ContractError("Recording: T must be >= 1");
  if (c < 1 || c > kMaxChannels) {
    throw RangeError("Recording: channel count " + std::to_string(c) + " outside [1," +
                     std::to_string(kMaxChannels) + "]");
  }
  if (static_cast<std::int64_t>(samples.size()) != t * c) {
    throw ContractError("Recording: sample buffer size does not match T*C");
  }
  if (!channel_ids.empty() && static_cast<std::int64_t>(channel_ids.size()) != c) {
    throw ContractError("Recording: channel id table size mismatch");
  }
}

template <typename S>
EmbeddingParams<S> EmbeddingParams<S>::init(std::int64_t d_e, std::int64_t patch_len,
                                            std::int64_t np_max, std::int64_t c_max, Rng& rng,
                                            bool requires_grad) {
  EmbeddingParams p;
  p.d_e = d_e;
  p.patch_len = patch_len;
  p.np_max = np_max;
  p.c_max = c_max;
  p.w_proj = Tensor<S>::zeros({d_e, patch_len}, requires_grad);
  p.w_pos = Tensor<S>::zeros({np_max, d_e}, requires_grad);
  p.w_chan = Tensor<S>::zeros({c_max, d_e}, requires_grad);
  p.mask_token = Tensor<S>::zeros({d_e}, requires_grad);
  p.pad_token = Tensor<S>::zeros({d_e}, requires_grad);
  for (Tensor<S>* t : {&p.w_proj, &p.w_pos, &p.w_chan, &p.mask_token, &p.pad_token}) {
    for (auto& v : t->data()) v = static_cast<S>(rng.trunc_normal(0.02));
  }
  return p;
}

template <typename S>
std::int64_t TokenBatch<S>::real_channels(std::int64_t b) const {
  std::int64_t n = 0;
  for (std::int64_t c = 0; c < c_total; ++c) n += is_real(b, c) ? 1 : 0;
  return n;
}

std::int64_t mask_count(double ratio, std::int64_t real_channels, std::int64_t np) {
  // nearbyint under the default FE_TONEAREST mode rounds half to even.
  return static_cast<std::int64_t>(std::nearbyint(ratio * static_cast<double>(real_channels * np)));
}

template <typename S>
PatchGrid<S> patch(const Recording<S>& rec, std::int64_t patch_len, std::int64_t stride) {
  rec.validate();
  if (patch_len > rec.t) {
    throw ContractError("patch: recording shorter than patch (T=" + std::to_string(rec.t) +
                        ", L=" + std::to_string(patch_len) + ")");
  }
  if (patch_len < 1 || stride < 1) throw ContractError("patch: L and S must be >= 1");
  const std::int64_t np = (rec.t - patch_len) / stride + 1;
  PatchGrid<S> grid;
  grid.patch_len = patch_len;
  grid.stride = stride;
  grid.patches = Tensor<S>::zeros({np, rec.c, patch_len});
  auto out = grid.patches.data();
  for (std::int64_t i = 0; i < np; ++i) {
    for (std::int64_t c = 0; c < rec.c; ++c) {
      for (std::int64_t l = 0; l < patch_len; ++l) {
        out[(i * rec.c + c) * patch_len + l] = rec.at(i * stride + l, c);
      }
    }
  }
  return grid;
}

namespace {

// Per-example mask sets for a recipe; pads never enter the set.
template <typename S>
std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> sample_masks(
    const TokenRecipe<S>& recipe, std::int64_t np) {
  std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> sets(recipe.grids.size());
  if (!recipe.masked) return sets;
  if (recipe.mask_ratio < 0.0 || recipe.mask_ratio >= 1.0) {
    throw ContractError("mask_tokens: ratio " + std::to_string(recipe.mask_ratio) +
                        " outside [0,1)");
  }
  Rng base(recipe.mask_seed);
  for (std::size_t b = 0; b < recipe.grids.size(); ++b) {
    const std::int64_t c_real = recipe.grids[b].channels();
    const std::int64_t count = mask_count(recipe.mask_ratio, c_real, np);
    Rng rng = base.fork(static_cast<std::uint64_t>(b));
    const auto flat = sample_without_replacement(rng, c_real * np, count);
    sets[b].reserve(flat.size());
    for (const std::int64_t f : flat) sets[b].emplace_back(f / np, f % np);
  }
  return sets;
}

}  // namespace

template <typename S>
TokenBatch<S> build_token_batch(TokenRecipe<S> recipe, const EmbeddingParams<S>& params) {
  if (recipe.grids.empty()) throw ContractError("build_token_batch: empty batch");
  const std::int64_t batch = static_cast<std::int64_t>(recipe.grids.size());
  const std::int64_t np = recipe.grids[0].np();
  const std::int64_t patch_len = recipe.grids[0].patch_len;
  if (np > params.np_max) {
    throw RangeError("build_token_batch: Np=" + std::to_string(np) + " exceeds Np_max=" +
                     std::to_string(params.np_max));
  }
  if (recipe.c_total > params.c_max) {
    throw RangeError("build_token_batch: C=" + std::to_string(recipe.c_total) +
                     " exceeds C_max=" + std::to_string(params.c_max));
  }
  if (recipe.channel_offsets.size() != recipe.grids.size()) {
    throw ContractError("build_token_batch: one channel-offset list per example required");
  }
  for (const auto& grid : recipe.grids) {
    if (grid.np() != np || grid.patch_len != patch_len) {
      throw ContractError("build_token_batch: examples disagree on patch geometry");
    }
    if (grid.channels() > recipe.c_total) {
      throw RangeError("build_token_batch: example has more channels than batch C_total");
    }
  }

  const std::int64_t ct = recipe.c_total;
  const std::int64_t de = params.d_e;

  TokenBatch<S> out;
  out.batch = batch;
  out.c_total = ct;
  out.np = np;
  out.mask_set = sample_masks(recipe, np);

  // Raw patches, zero on pad channels; grids are [Np, C, L], the batch is
  // channel-major [B, C, Np, L].
  out.raw_patches = Tensor<S>::zeros({batch, ct, np, patch_len});
  out.pad_mask.assign(static_cast<std::size_t>(batch * ct), 0);
  auto raw = out.raw_patches.data();
  std::vector<std::int64_t> offsets_flat(static_cast<std::size_t>(batch * ct), 0);
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& grid = recipe.grids[static_cast<std::size_t>(b)];
    const auto& offs = recipe.channel_offsets[static_cast<std::size_t>(b)];
    const std::int64_t c_real = grid.channels();
    if (static_cast<std::int64_t>(offs.size()) != c_real) {
      throw ContractError("build_token_batch: channel offset list size mismatch");
    }
    for (std::int64_t c = 0; c < c_real; ++c) {
      if (offs[static_cast<std::size_t>(c)] < 0 || offs[static_cast<std::size_t>(c)] >= params.c_max) {
        throw RangeError("embed: channel index " + std::to_string(offs[static_cast<std::size_t>(c)]) +
                         " outside [0," + std::to_string(params.c_max) + ")");
      }
      out.pad_mask[static_cast<std::size_t>(b * ct + c)] = 1;
      offsets_flat[static_cast<std::size_t>(b * ct + c)] = offs[static_cast<std::size_t>(c)];
      const auto src = grid.patches.data();
      for (std::int64_t i = 0; i < np; ++i) {
        for (std::int64_t l = 0; l < patch_len; ++l) {
          raw[((b * ct + c) * np + i) * patch_len + l] = src[(i * c_real + c) * patch_len + l];
        }
      }
    }
  }

  // 0/1 indicators (constants outside the graph).
  Tensor<S> real01 = Tensor<S>::zeros({batch, ct, 1, 1});
  Tensor<S> real_inv = Tensor<S>::zeros({batch, ct, 1, 1});
  for (std::int64_t i = 0; i < batch * ct; ++i) {
    real01.data()[i] = out.pad_mask[static_cast<std::size_t>(i)] ? S(1) : S(0);
    real_inv.data()[i] = out.pad_mask[static_cast<std::size_t>(i)] ? S(0) : S(1);
  }
  Tensor<S> msk = Tensor<S>::zeros({batch, ct, np, 1});
  Tensor<S> msk_inv = Tensor<S>::full({batch, ct, np, 1}, S(1));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (const auto& [c, i] : out.mask_set[static_cast<std::size_t>(b)]) {
      msk.data()[(b * ct + c) * np + i] = S(1);
      msk_inv.data()[(b * ct + c) * np + i] = S(0);
    }
  }

  // token = (proj(1-m) + mask_token m + chan) * real + pad_token (1-real) + pos
  Tensor<S> proj = reshape(
      matmul(reshape(out.raw_patches, {batch * ct * np, patch_len}), transpose_last2(params.w_proj)),
      {batch, ct, np, de});
  Tensor<S> chan = reshape(gather_rows(params.w_chan, offsets_flat), {batch, ct, 1, de});
  Tensor<S> pos = reshape(narrow(params.w_pos, 0, 0, np), {1, 1, np, de});
  Tensor<S> mask_tok = reshape(params.mask_token, {1, 1, 1, de});
  Tensor<S> pad_tok = reshape(params.pad_token, {1, 1, 1, de});

  Tensor<S> core = add(add(mul(proj, msk_inv), mul(msk, mask_tok)), chan);
  out.tokens = add(add(mul(core, real01), mul(real_inv, pad_tok)), pos);

  out.recipe = std::move(recipe);
  return out;
}

template <typename S>
TokenBatch<S> embed(const PatchGrid<S>& grid, const EmbeddingParams<S>& params,
                    const std::vector<std::int64_t>& channel_offsets) {
  TokenRecipe<S> recipe;
  recipe.grids = {grid};
  recipe.channel_offsets = {channel_offsets};
  recipe.c_total = grid.channels();
  return build_token_batch(std::move(recipe), params);
}

template <typename S>
TokenBatch<S> pad_channels(const TokenBatch<S>& batch, const EmbeddingParams<S>& params,
                           std::int64_t c_max) {
  for (const auto& grid : batch.recipe.grids) {
    if (grid.channels() > c_max) {
      throw RangeError("pad_channels: example channel count " + std::to_string(grid.channels()) +
                       " exceeds C_max=" + std::to_string(c_max));
    }
  }
  TokenRecipe<S> recipe = batch.recipe;
  recipe.c_total = c_max;
  return build_token_batch(std::move(recipe), params);
}

template <typename S>
TokenBatch<S> mask_tokens(const TokenBatch<S>& batch, const EmbeddingParams<S>& params,
                          double ratio, std::uint64_t seed) {
  if (ratio < 0.0 || ratio >= 1.0) {
    throw ContractError("mask_tokens: ratio " + std::to_string(ratio) + " outside [0,1)");
  }
  TokenRecipe<S> recipe = batch.recipe;
  recipe.mask_ratio = ratio;
  recipe.mask_seed = seed;
  recipe.masked = ratio > 0.0;
  return build_token_batch(std::move(recipe), params);
}

#define WF_INSTANTIATE_TOKENIZER(S)                                                            \
  template struct Recording<S>;                                                                \
  template struct EmbeddingParams<S>;                                                          \
  template struct TokenBatch<S>;                                                               \
  template PatchGrid<S> patch(const Recording<S>&, std::int64_t, std::int64_t);                \
  template TokenBatch<S> build_token_batch(TokenRecipe<S>, const EmbeddingParams<S>&);         \
  template TokenBatch<S> embed(const PatchGrid<S>&, const EmbeddingParams<S>&,                 \
                               const std::vector<std::int64_t>&);                              \
  template TokenBatch<S> pad_channels(const TokenBatch<S>&, const EmbeddingParams<S>&,         \
                                      std::int64_t);                                           \
  template TokenBatch<S> mask_tokens(const TokenBatch<S>&, const EmbeddingParams<S>&, double,  \
                                     std::uint64_t);

WF_INSTANTIATE_TOKENIZER(float)
WF_INSTANTIATE_TOKENIZER(double)

#undef WF_INSTANTIATE_TOKENIZER

}  // namespace wf
