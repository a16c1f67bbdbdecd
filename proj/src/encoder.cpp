#include "wf/encoder.hpp"

#include <cstring>
#include <fstream>

namespace wf {

void EncoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("EncoderConfig: n_layers must be >= 1");
  if (mechanism == AttentionMechanism::alternating && n_layers % 2 != 0) {
    throw ConfigError("EncoderConfig: alternating attention needs an even number of layers, got " +
                      std::to_string(n_layers));
  }
  if (d_e < 1 || n_heads < 1 || d_e % n_heads != 0) {
    throw ConfigError("EncoderConfig: d_e=" + std::to_string(d_e) + " not divisible by n_heads=" +
                      std::to_string(n_heads));
  }
  if (mlp_dim < 1 || patch_len < 1 || c_max < 1 || np_max < 1) {
    throw ConfigError("EncoderConfig: sizes must be positive");
  }
  if (c_max > kMaxChannels) {
    throw ConfigError("EncoderConfig: c_max exceeds the supported maximum of " +
                      std::to_string(kMaxChannels));
  }
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) {
    throw ConfigError("EncoderConfig: drop_path_rate outside [0,1)");
  }
}

EncoderConfig EncoderConfig::preset(const std::string& name, AttentionMechanism mechanism) {
  EncoderConfig c;
  c.mechanism = mechanism;
  c.n_heads = 12;
  c.patch_len = 64;
  c.c_max = 64;
  c.np_max = 64;
  if (name == "small") {
    c.n_layers = 8;
    c.d_e = 192;
    c.mlp_dim = 768;
    c.drop_path_rate = 0.1;
  } else if (name == "base") {
    c.n_layers = 10;
    c.d_e = 576;
    c.mlp_dim = 2304;
    c.drop_path_rate = 0.2;
  } else if (name == "large") {
    c.n_layers = 12;
    c.d_e = 768;
    c.mlp_dim = 3072;
    c.drop_path_rate = 0.2;
  } else if (name == "tiny") {
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_e = 32;
    c.mlp_dim = 128;
    c.c_max = 8;
    c.np_max = 32;
    c.drop_path_rate = 0.1;
  } else {
    throw ConfigError("unknown preset '" + name + "' (small|base|large|tiny)");
  }
  c.validate();
  return c;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>*>> EncoderModel<S>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<S>*>> out;
  out.emplace_back("embed.w_proj", &embed.w_proj);
  out.emplace_back("embed.w_pos", &embed.w_pos);
  out.emplace_back("embed.w_chan", &embed.w_chan);
  out.emplace_back("embed.mask_token", &embed.mask_token);
  out.emplace_back("embed.pad_token", &embed.pad_token);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    EncoderLayer<S>& l = layers[i];
    out.emplace_back(p + "attn.w_q", &l.attn.w_q);
    out.emplace_back(p + "attn.w_k", &l.attn.w_k);
    out.emplace_back(p + "attn.w_v", &l.attn.w_v);
    out.emplace_back(p + "attn.w_o", &l.attn.w_o);
    if (config.mechanism == AttentionMechanism::two_axis) {
      out.emplace_back(p + "attn_p.w_q", &l.attn_p.w_q);
      out.emplace_back(p + "attn_p.w_k", &l.attn_p.w_k);
      out.emplace_back(p + "attn_p.w_v", &l.attn_p.w_v);
      // attn_p.w_o aliases attn.w_o and is not listed separately.
    }
    out.emplace_back(p + "ln1.gain", &l.ln1_gain);
    out.emplace_back(p + "ln1.bias", &l.ln1_bias);
    out.emplace_back(p + "ln2.gain", &l.ln2_gain);
    out.emplace_back(p + "ln2.bias", &l.ln2_bias);
    out.emplace_back(p + "mlp.w1", &l.mlp_w1);
    out.emplace_back(p + "mlp.b1", &l.mlp_b1);
    out.emplace_back(p + "mlp.w2", &l.mlp_w2);
    out.emplace_back(p + "mlp.b2", &l.mlp_b2);
  }
  out.emplace_back("final_ln.gain", &final_ln_gain);
  out.emplace_back("final_ln.bias", &final_ln_bias);
  out.emplace_back("recon.weight", &recon_w);
  out.emplace_back("recon.bias", &recon_b);
  return out;
}

template <typename S>
std::vector<std::pair<std::string, const Tensor<S>*>> EncoderModel<S>::named_parameters() const {
  auto mut = const_cast<EncoderModel<S>*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor<S>*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

template <typename S>
EncoderModel<S> build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  EncoderModel<S> m;
  m.config = config;
  m.embed = EmbeddingParams<S>::init(config.d_e, config.patch_len, config.np_max, config.c_max, rng);
  m.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : m.layers) {
    layer.attn = MhaParams<S>::init(config.d_e, config.n_heads, rng);
    if (config.mechanism == AttentionMechanism::two_axis) {
      layer.attn_p = MhaParams<S>::init(config.d_e, config.n_heads, rng);
      layer.attn_p.w_o = layer.attn.w_o;  // shared output projection
    }
    layer.ln1_gain = Tensor<S>::full({config.d_e}, S(1), true);
    layer.ln1_bias = Tensor<S>::zeros({config.d_e}, true);
    layer.ln2_gain = Tensor<S>::full({config.d_e}, S(1), true);
    layer.ln2_bias = Tensor<S>::zeros({config.d_e}, true);
    layer.mlp_w1 = Tensor<S>::zeros({config.mlp_dim, config.d_e}, true);
    layer.mlp_b1 = Tensor<S>::zeros({config.mlp_dim}, true);
    layer.mlp_w2 = Tensor<S>::zeros({config.d_e, config.mlp_dim}, true);
    layer.mlp_b2 = Tensor<S>::zeros({config.d_e}, true);
    for (auto& v : layer.mlp_w1.data()) v = static_cast<S>(rng.trunc_normal(0.02));
    for (auto& v : layer.mlp_w2.data()) v = static_cast<S>(rng.trunc_normal(0.02));
  }
  m.final_ln_gain = Tensor<S>::full({config.d_e}, S(1), true);
  m.final_ln_bias = Tensor<S>::zeros({config.d_e}, true);
  m.recon_w = Tensor<S>::zeros({config.patch_len, config.d_e}, true);
  m.recon_b = Tensor<S>::zeros({config.patch_len}, true);
  for (auto& v : m.recon_w.data()) v = static_cast<S>(rng.trunc_normal(0.02));
  return m;
}

namespace {

// Per-example stochastic-depth scale: keep/(1-p) or 0.
template <typename S>
Tensor<S> drop_path_scale(std::int64_t batch, double rate, Rng* rng) {
  Tensor<S> scale = Tensor<S>::full({batch, 1, 1, 1}, S(1));
  if (rng == nullptr || rate <= 0.0) return scale;
  for (std::int64_t b = 0; b < batch; ++b) {
    const bool keep = rng->uniform() >= rate;
    scale.data()[b] = keep ? static_cast<S>(1.0 / (1.0 - rate)) : S(0);
  }
  return scale;
}

}  // namespace

template <typename S>
Tensor<S> encoder_forward(const EncoderModel<S>& model, const TokenBatch<S>& batch,
                          const ForwardOptions& opts) {
  const EncoderConfig& cfg = model.config;
  if (batch.np > cfg.np_max) {
    throw RangeError("encoder_forward: Np=" + std::to_string(batch.np) + " exceeds Np_max=" +
                     std::to_string(cfg.np_max));
  }
  if (batch.c_total > cfg.c_max) {
    throw RangeError("encoder_forward: C=" + std::to_string(batch.c_total) + " exceeds C_max=" +
                     std::to_string(cfg.c_max));
  }
  const int n_layers = opts.layer_limit >= 0
                           ? std::min<int>(opts.layer_limit, static_cast<int>(cfg.n_layers))
                           : static_cast<int>(cfg.n_layers);
  Tensor<S> x = batch.tokens;
  for (int li = 0; li < n_layers; ++li) {
    const EncoderLayer<S>& layer = model.layers[static_cast<std::size_t>(li)];
    Tensor<S> attn_in = layer_norm(x, layer.ln1_gain, layer.ln1_bias, static_cast<S>(1e-5));
    Tensor<S> a;
    switch (cfg.mechanism) {
      case AttentionMechanism::alternating:
        // 1-indexed: odd layers inter-channel, even layers intra-channel.
        a = (li % 2 == 0) ? inter_channel_attention(attn_in, layer.attn, batch.pad_mask)
                          : intra_channel_attention(attn_in, layer.attn, batch.pad_mask);
        break;
      case AttentionMechanism::standard:
        a = standard_attention(attn_in, layer.attn, batch.pad_mask);
        break;
      case AttentionMechanism::two_axis:
        a = two_axis_attention(attn_in, layer.attn, layer.attn_p, batch.pad_mask);
        break;
      case AttentionMechanism::bottleneck:
        a = bottleneck_attention(attn_in, layer.attn, batch.pad_mask);
        break;
    }
    if (opts.drop_path_rng && opts.drop_path_rate > 0.0) {
      a = mul(a, drop_path_scale<S>(batch.batch, opts.drop_path_rate, opts.drop_path_rng));
    }
    x = add(x, a);

    Tensor<S> mlp_in = layer_norm(x, layer.ln2_gain, layer.ln2_bias, static_cast<S>(1e-5));
    Tensor<S> h = gelu(add(matmul_nt(mlp_in, layer.mlp_w1), layer.mlp_b1));
    Tensor<S> mo = add(matmul_nt(h, layer.mlp_w2), layer.mlp_b2);
    if (opts.drop_path_rng && opts.drop_path_rate > 0.0) {
      mo = mul(mo, drop_path_scale<S>(batch.batch, opts.drop_path_rate, opts.drop_path_rng));
    }
    x = add(x, mo);
  }
  if (opts.final_norm) {
    x = layer_norm(x, model.final_ln_gain, model.final_ln_bias, static_cast<S>(1e-5));
  }
  return x;
}

template <typename S>
Tensor<S> reconstruct_patches(const EncoderModel<S>& model, const Tensor<S>& embeddings) {
  return add(matmul_nt(embeddings, model.recon_w), model.recon_b);
}

std::int64_t param_count(const EncoderConfig& config) {
  config.validate();
  const std::int64_t de = config.d_e;
  const std::int64_t embed = de * config.patch_len + config.np_max * de + config.c_max * de + 2 * de;
  std::int64_t per_layer = 4 * de * de;  // q,k,v,o
  if (config.mechanism == AttentionMechanism::two_axis) per_layer += 3 * de * de;  // second q,k,v
  per_layer += 4 * de;                                           // two layer norms
  per_layer += config.mlp_dim * de + config.mlp_dim + de * config.mlp_dim + de;  // mlp
  const std::int64_t final_ln = 2 * de;
  const std::int64_t recon = config.patch_len * de + config.patch_len;
  return embed + config.n_layers * per_layer + final_ln + recon;
}

// ---- checkpoint io -----------------------------------------------------------

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;
  const std::string& path;

  void need(std::size_t n, const char* what) {
    if (at + n > buf.size()) {
      throw FormatError(path + ": truncated " + what + " at byte " + std::to_string(at) +
                        " (need " + std::to_string(n) + ", have " + std::to_string(buf.size() - at) + ")");
    }
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + at);
    at += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + at);
    at += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  bool done() const { return at >= buf.size(); }
};

constexpr char kMagic[4] = {'C', 'R', 'B', 'O'};
constexpr std::uint32_t kVersion = 1;

void append_blob(std::string& out, const std::string& name, const Shape& dims,
                 const float* data, std::size_t n) {
  if (name.size() > 0xFFFF) throw ContractError("checkpoint: blob name too long");
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.append(name);
  if (dims.size() > 0xFF) throw ContractError("checkpoint: blob rank too large");
  out.push_back(static_cast<char>(dims.size()));
  for (const std::int64_t d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < n; ++i) put_f32(out, data[i]);
}

}  // namespace

template <typename S>
void save_checkpoint(const std::string& path, const EncoderModel<S>& model,
                     const std::vector<NamedBlob>& extra) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const EncoderConfig& c = model.config;
  put_u32(out, static_cast<std::uint32_t>(c.n_layers));
  put_u32(out, static_cast<std::uint32_t>(c.n_heads));
  put_u32(out, static_cast<std::uint32_t>(c.d_e));
  put_u32(out, static_cast<std::uint32_t>(c.mlp_dim));
  put_u32(out, static_cast<std::uint32_t>(c.patch_len));
  put_u32(out, static_cast<std::uint32_t>(c.mechanism));
  put_u32(out, static_cast<std::uint32_t>(c.c_max));
  put_u32(out, static_cast<std::uint32_t>(c.np_max));
  put_f32(out, static_cast<float>(c.drop_path_rate));

  for (const auto& [name, tensor] : model.named_parameters()) {
    std::vector<float> vals(tensor->data().begin(), tensor->data().end());
    append_blob(out, name, tensor->shape(), vals.data(), vals.size());
  }
  for (const NamedBlob& blob : extra) {
    append_blob(out, blob.name, blob.dims, blob.data.data(), blob.data.size());
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError("save_checkpoint: cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError("save_checkpoint: short write to '" + path + "'");
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("load_checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic at byte 0 (not a checkpoint file)");
  }
  r.at = 4;
  const std::uint32_t version = r.u32("version");
  if (version > kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  EncoderConfig c;
  c.n_layers = r.u32("config.n_layers");
  c.n_heads = r.u32("config.n_heads");
  c.d_e = r.u32("config.d_e");
  c.mlp_dim = r.u32("config.mlp_dim");
  c.patch_len = r.u32("config.patch_len");
  const std::uint32_t mech = r.u32("config.mechanism");
  if (mech > static_cast<std::uint32_t>(AttentionMechanism::bottleneck)) {
    throw FormatError(path + ": unknown mechanism code " + std::to_string(mech));
  }
  c.mechanism = static_cast<AttentionMechanism>(mech);
  c.c_max = r.u32("config.c_max");
  c.np_max = r.u32("config.np_max");
  c.drop_path_rate = r.f32("config.drop_path_rate");

  LoadedCheckpoint<S> loaded{build_encoder<S>(c, 0), {}};
  auto params = loaded.model.named_parameters();
  std::map<std::string, Tensor<S>*> by_name;
  for (auto& [name, tensor] : params) by_name[name] = tensor;

  while (!r.done()) {
    const std::uint16_t name_len = r.u16("blob name length");
    r.need(name_len, "blob name");
    std::string name(buf.data() + r.at, name_len);
    r.at += name_len;
    r.need(1, "blob rank");
    const int rank = static_cast<unsigned char>(buf[r.at]);
    r.at += 1;
    Shape dims;
    std::int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      dims.push_back(r.u32("blob dims"));
      numel *= dims.back();
    }
    std::vector<float> data(static_cast<std::size_t>(numel));
    for (std::int64_t i = 0; i < numel; ++i) data[static_cast<std::size_t>(i)] = r.f32("blob data");

    auto it = by_name.find(name);
    if (it != by_name.end()) {
      Tensor<S>* t = it->second;
      if (t->shape() != dims) {
        throw FormatError(path + ": blob '" + name + "' has shape " + shape_str(dims) +
                          ", model expects " + shape_str(t->shape()));
      }
      for (std::int64_t i = 0; i < numel; ++i) {
        t->data()[i] = static_cast<S>(data[static_cast<std::size_t>(i)]);
      }
    } else {
      loaded.extra[name] = NamedBlob{name, std::move(dims), std::move(data)};
    }
  }
  return loaded;
}

#define WF_INSTANTIATE_ENCODER(S)                                                         \
  template struct EncoderLayer<S>;                                                        \
  template struct EncoderModel<S>;                                                        \
  template EncoderModel<S> build_encoder(const EncoderConfig&, std::uint64_t);            \
  template Tensor<S> encoder_forward(const EncoderModel<S>&, const TokenBatch<S>&,        \
                                     const ForwardOptions&);                              \
  template Tensor<S> reconstruct_patches(const EncoderModel<S>&, const Tensor<S>&);       \
  template void save_checkpoint(const std::string&, const EncoderModel<S>&,               \
                                const std::vector<NamedBlob>&);                           \
  template LoadedCheckpoint<S> load_checkpoint(const std::string&);

WF_INSTANTIATE_ENCODER(float)
WF_INSTANTIATE_ENCODER(double)

#undef WF_INSTANTIATE_ENCODER

}  // namespace wf
