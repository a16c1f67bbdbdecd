#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wf/tokenizer.hpp"

namespace wf {

// ---- recording files ------------------------------------------------------
// Binary format: magic "EEGW" | version u32 | C u16 | T u64 |
// sampling_rate f32 | channel-id table (u16 len + UTF-8 each) |
// T x C f32 samples, little-endian, time-major.

template <typename S>
void save_recording(const std::string& path, const Recording<S>& rec);

template <typename S>
Recording<S> load_recording(const std::string& path);

// Explicit ingestion normalization: per-channel z-score. Channels with zero
// variance become all-zero. Guarantees finite samples afterwards.
template <typename S>
void zscore_channels(Recording<S>& rec);

// ---- synthetic corpus ------------------------------------------------------

struct SynthSpec {
  std::int64_t n_examples = 0;
  std::int64_t channels = 0;
  std::int64_t t = 0;
  double sampling_rate = 256.0;
  std::vector<double> class_freqs;  // dominant frequency per class, Hz
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  std::int64_t n_classes() const { return static_cast<std::int64_t>(class_freqs.size()); }
  void validate() const;
};

template <typename S>
struct LabeledCorpus {
  std::vector<Recording<S>> recordings;
  std::vector<int> labels;
};

// Per-channel class-dominant sinusoid with random phase plus white noise;
// labels round-robin so classes stay balanced. Deterministic under seed.
template <typename S>
LabeledCorpus<S> generate_synthetic(const SynthSpec& spec);

// ---- batching ---------------------------------------------------------------

// Crop every recording to the batch-minimum T, slice into patches, and build
// an unmasked recipe padded to c_max channels. Channel-embedding rows default
// to 0..C-1 per example.
template <typename S>
TokenRecipe<S> collate(const std::vector<const Recording<S>*>& recordings, std::int64_t patch_len,
                       std::int64_t stride, std::int64_t c_max);

// ---- corpus manifest ---------------------------------------------------------
// CSV `path,label`, one row per example.

struct ManifestEntry {
  std::string path;
  int label = 0;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace wf
