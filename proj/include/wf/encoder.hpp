#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wf/attention.hpp"
#include "wf/tokenizer.hpp"

namespace wf {

struct EncoderConfig {
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 2;
  std::int64_t d_e = 8;
  std::int64_t mlp_dim = 16;
  std::int64_t patch_len = 64;
  AttentionMechanism mechanism = AttentionMechanism::alternating;
  std::int64_t c_max = kMaxChannels;
  std::int64_t np_max = 64;
  double drop_path_rate = 0.0;

  void validate() const;

  // "small" (8 x 192/768), "base" (10 x 576/2304), "large" (12 x 768/3072),
  // all 12 heads, patch 64; "tiny" is the desk-scale config used by the toy
  // pipeline.
  static EncoderConfig preset(const std::string& name,
                              AttentionMechanism mechanism = AttentionMechanism::alternating);
};

template <typename S>
struct EncoderLayer {
  MhaParams<S> attn;    // channel-axis params for two_axis
  MhaParams<S> attn_p;  // patch-axis params (two_axis only; w_o shared with attn)
  Tensor<S> ln1_gain, ln1_bias;
  Tensor<S> ln2_gain, ln2_bias;
  Tensor<S> mlp_w1, mlp_b1;  // [mlp, d_e], [mlp]
  Tensor<S> mlp_w2, mlp_b2;  // [d_e, mlp], [d_e]
};

template <typename S>
struct EncoderModel {
  EncoderConfig config;
  EmbeddingParams<S> embed;
  std::vector<EncoderLayer<S>> layers;
  Tensor<S> final_ln_gain, final_ln_bias;
  Tensor<S> recon_w, recon_b;  // [L, d_e], [L]

  // Unique parameters with stable checkpoint names (the two-axis shared
  // output projection appears once).
  std::vector<std::pair<std::string, Tensor<S>*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor<S>*>> named_parameters() const;
};

template <typename S>
EncoderModel<S> build_encoder(const EncoderConfig& config, std::uint64_t seed);

struct ForwardOptions {
  int layer_limit = -1;       // run only the first k layers (testing hook)
  bool final_norm = true;
  Rng* drop_path_rng = nullptr;  // enables stochastic depth when set
  double drop_path_rate = 0.0;
};

// Pre-norm residual blocks: x += Attn(LN(x)); x += MLP(LN(x)); final LN.
// Odd layers (1-indexed) of the alternating mechanism run inter-channel
// attention, even layers intra-channel.
template <typename S>
Tensor<S> encoder_forward(const EncoderModel<S>& model, const TokenBatch<S>& batch,
                          const ForwardOptions& opts = {});

// Patch reconstruction head: [B, C, Np, d_e] -> [B, C, Np, L].
template <typename S>
Tensor<S> reconstruct_patches(const EncoderModel<S>& model, const Tensor<S>& embeddings);

// Exact scalar-parameter count of the pre-training model for a config.
std::int64_t param_count(const EncoderConfig& config);

// ---- checkpoint format -------------------------------------------------
// magic "CRBO" | version u32 | config: n_layers, n_heads, d_e, mlp_dim,
// patch_len, mechanism, c_max, np_max as u32 + drop_path_rate f32 | blobs:
// name_len u16, name, rank u8, dims u32 x rank, f32 data. Little-endian
// throughout.

struct NamedBlob {
  std::string name;
  Shape dims;
  std::vector<float> data;
};

template <typename S>
void save_checkpoint(const std::string& path, const EncoderModel<S>& model,
                     const std::vector<NamedBlob>& extra = {});

template <typename S>
struct LoadedCheckpoint {
  EncoderModel<S> model;
  std::map<std::string, NamedBlob> extra;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path);

}  // namespace wf
