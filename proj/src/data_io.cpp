#include "wf/data_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace wf {

namespace {

constexpr char kMagic[4] = {'E', 'E', 'G', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
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

  void need(std::size_t n, const char* what) const {
    if (at + n > buf.size()) {
      throw FormatError(path + ": truncated " + what + " at byte " + std::to_string(at) +
                        " (need " + std::to_string(n) + " more bytes, have " +
                        std::to_string(buf.size() - at) + ")");
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
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + at);
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    at += 8;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

template <typename S>
void save_recording(const std::string& path, const Recording<S>& rec) {
  rec.validate();
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u16(out, static_cast<std::uint16_t>(rec.c));
  put_u64(out, static_cast<std::uint64_t>(rec.t));
  put_f32(out, static_cast<float>(rec.sampling_rate));
  for (std::int64_t ci = 0; ci < rec.c; ++ci) {
    const std::string id = ci < static_cast<std::int64_t>(rec.channel_ids.size())
                               ? rec.channel_ids[static_cast<std::size_t>(ci)]
                               : "ch" + std::to_string(ci);
    put_u16(out, static_cast<std::uint16_t>(id.size()));
    out.append(id);
  }
  for (const S v : rec.samples) put_f32(out, static_cast<float>(v));

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError("save_recording: cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError("save_recording: short write to '" + path + "'");
}

template <typename S>
Recording<S> load_recording(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("load_recording: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic at byte 0 (not a recording file)");
  }
  r.at = 4;
  const std::uint32_t version = r.u32("version");
  if (version > kVersion) {
    throw FormatError(path + ": unsupported recording version " + std::to_string(version));
  }
  Recording<S> rec;
  rec.c = r.u16("channel count");
  rec.t = static_cast<std::int64_t>(r.u64("sample count"));
  rec.sampling_rate = r.f32("sampling rate");
  rec.channel_ids.resize(static_cast<std::size_t>(rec.c));
  for (std::int64_t ci = 0; ci < rec.c; ++ci) {
    const std::uint16_t len = r.u16("channel id length");
    r.need(len, "channel id");
    rec.channel_ids[static_cast<std::size_t>(ci)] = buf.substr(r.at, len);
    r.at += len;
  }
  const std::int64_t total = rec.t * rec.c;
  const std::size_t want_bytes = static_cast<std::size_t>(total) * 4;
  if (buf.size() - r.at != want_bytes) {
    throw FormatError(path + ": payload holds " + std::to_string(buf.size() - r.at) +
                      " bytes at offset " + std::to_string(r.at) + ", header declares " +
                      std::to_string(want_bytes) + " (T*C=" + std::to_string(total) + " f32)");
  }
  rec.samples.resize(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) {
    rec.samples[static_cast<std::size_t>(i)] = static_cast<S>(r.f32("samples"));
  }
  rec.validate();
  return rec;
}

template <typename S>
void zscore_channels(Recording<S>& rec) {
  rec.validate();
  for (std::int64_t ci = 0; ci < rec.c; ++ci) {
    double mean = 0.0;
    for (std::int64_t ti = 0; ti < rec.t; ++ti) mean += static_cast<double>(rec.at(ti, ci));
    mean /= static_cast<double>(rec.t);
    double var = 0.0;
    for (std::int64_t ti = 0; ti < rec.t; ++ti) {
      const double d = static_cast<double>(rec.at(ti, ci)) - mean;
      var += d * d;
    }
    var /= static_cast<double>(rec.t);
    const double sd = std::sqrt(var);
    for (std::int64_t ti = 0; ti < rec.t; ++ti) {
      S& v = rec.samples[static_cast<std::size_t>(ti * rec.c + ci)];
      v = sd > 0.0 ? static_cast<S>((static_cast<double>(v) - mean) / sd) : S(0);
    }
  }
  for (const S v : rec.samples) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw ContractError("zscore_channels: non-finite sample after normalization");
    }
  }
}

void SynthSpec::validate() const {
  if (n_examples < 1 || channels < 1 || t < 1) {
    throw ConfigError("SynthSpec: n_examples, channels and t must be positive");
  }
  if (channels > kMaxChannels) {
    throw RangeError("SynthSpec: channels exceed the ingestion bound of " +
                     std::to_string(kMaxChannels));
  }
  if (class_freqs.empty()) throw ConfigError("SynthSpec: need at least one class frequency");
  for (const double f : class_freqs) {
    if (f <= 0.0 || f >= sampling_rate / 2.0) {
      throw ConfigError("SynthSpec: class frequency " + std::to_string(f) +
                        " Hz violates Nyquist for fs=" + std::to_string(sampling_rate));
    }
  }
}

template <typename S>
LabeledCorpus<S> generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  LabeledCorpus<S> corpus;
  corpus.recordings.reserve(static_cast<std::size_t>(spec.n_examples));
  corpus.labels.reserve(static_cast<std::size_t>(spec.n_examples));
  Rng base(spec.seed);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::int64_t n = 0; n < spec.n_examples; ++n) {
    const int label = static_cast<int>(n % spec.n_classes());
    const double freq = spec.class_freqs[static_cast<std::size_t>(label)];
    Rng rng = base.fork(static_cast<std::uint64_t>(n));
    Recording<S> rec;
    rec.t = spec.t;
    rec.c = spec.channels;
    rec.sampling_rate = spec.sampling_rate;
    rec.samples.resize(static_cast<std::size_t>(spec.t * spec.channels));
    for (std::int64_t ci = 0; ci < spec.channels; ++ci) {
      const double phase = two_pi * rng.uniform();
      for (std::int64_t ti = 0; ti < spec.t; ++ti) {
        double v = std::sin(two_pi * freq * static_cast<double>(ti) / spec.sampling_rate + phase);
        if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
        rec.samples[static_cast<std::size_t>(ti * spec.channels + ci)] = static_cast<S>(v);
      }
    }
    corpus.recordings.push_back(std::move(rec));
    corpus.labels.push_back(label);
  }
  return corpus;
}

template <typename S>
TokenRecipe<S> collate(const std::vector<const Recording<S>*>& recordings, std::int64_t patch_len,
                       std::int64_t stride, std::int64_t c_max) {
  if (recordings.empty()) throw ContractError("collate: empty batch");
  std::int64_t t_min = recordings[0]->t;
  for (const auto* rec : recordings) {
    rec->validate();
    if (rec->c > c_max) {
      throw RangeError("collate: recording has " + std::to_string(rec->c) +
                       " channels, C_max=" + std::to_string(c_max));
    }
    t_min = std::min(t_min, rec->t);
  }
  TokenRecipe<S> recipe;
  recipe.c_total = c_max;
  recipe.grids.reserve(recordings.size());
  recipe.channel_offsets.reserve(recordings.size());
  for (const auto* rec : recordings) {
    // Batch-level crop to the minimum T; time is never padded.
    Recording<S> view;
    view.t = t_min;
    view.c = rec->c;
    view.sampling_rate = rec->sampling_rate;
    view.samples.assign(rec->samples.begin(), rec->samples.begin() + t_min * rec->c);
    recipe.grids.push_back(patch(view, patch_len, stride));
    std::vector<std::int64_t> offs(static_cast<std::size_t>(rec->c));
    for (std::int64_t ci = 0; ci < rec->c; ++ci) offs[static_cast<std::size_t>(ci)] = ci;
    recipe.channel_offsets.push_back(std::move(offs));
  }
  return recipe;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw FormatError("write_manifest: cannot open '" + path + "'");
  file << "path,label\n";
  for (const auto& e : entries) file << e.path << "," << e.label << "\n";
  if (!file) throw FormatError("write_manifest: short write to '" + path + "'");
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw FormatError("read_manifest: cannot open '" + path + "'");
  std::vector<ManifestEntry> entries;
  std::string line;
  if (!std::getline(file, line) || line != "path,label") {
    throw FormatError(path + ": manifest must start with 'path,label' header");
  }
  int lineno = 1;
  while (std::getline(file, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'path,label'");
    }
    ManifestEntry e;
    e.path = line.substr(0, comma);
    try {
      e.label = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad label '" +
                        line.substr(comma + 1) + "'");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

#define WF_INSTANTIATE_DATA_IO(S)                                                             \
  template void save_recording(const std::string&, const Recording<S>&);                      \
  template Recording<S> load_recording(const std::string&);                                   \
  template void zscore_channels(Recording<S>&);                                               \
  template LabeledCorpus<S> generate_synthetic(const SynthSpec&);                             \
  template TokenRecipe<S> collate(const std::vector<const Recording<S>*>&, std::int64_t,      \
                                  std::int64_t, std::int64_t);

WF_INSTANTIATE_DATA_IO(float)
WF_INSTANTIATE_DATA_IO(double)

#undef WF_INSTANTIATE_DATA_IO

}  // namespace wf
