#pragma once

#include <cstdint>
#include <string>

#include "wf/data_io.hpp"
#include "wf/encoder.hpp"
#include "wf/finetune.hpp"
#include "wf/pretrain.hpp"

namespace wf {

// Declarative run file: one `key = value` per line, `#` comments, unknown
// keys rejected with the offending key and line. Defaults follow the
// published pre-training/fine-tuning hyperparameter tables where one exists.
struct RunConfig {
  // model
  std::string preset = "tiny";
  std::string mechanism = "alternating";
  std::int64_t n_layers = -1;  // -1 keeps the preset value
  std::int64_t n_heads = -1;
  std::int64_t d_e = -1;
  std::int64_t mlp_dim = -1;
  std::int64_t patch_len = -1;
  std::int64_t c_max = -1;
  std::int64_t np_max = -1;
  double drop_path = -1.0;

  // data / synthetic corpus
  std::string data_dir;
  std::int64_t n_examples = 10000;
  std::int64_t channels = 4;
  std::int64_t t = 1280;
  double sampling_rate = 256.0;
  std::string class_freqs = "6,24";
  double noise_std = 0.5;

  // pre-training
  PretrainConfig pretrain;

  // fine-tuning
  FinetuneConfig finetune;
  std::int64_t n_classes = 2;

  // common
  std::uint64_t seed = 0;
  std::string precision = "f32";

  EncoderConfig encoder_config() const;
  SynthSpec synth_spec() const;
  std::vector<double> parsed_class_freqs() const;

  // Canonical serialization (sorted keys); hashing it gives the config hash.
  std::string canonical() const;
  std::uint64_t config_hash() const;

  // Reproducibility stanza written at the top of every metrics file.
  std::string stanza() const;
};

RunConfig parse_run_file(const std::string& path);
RunConfig parse_run_text(const std::string& text, const std::string& origin);

// Library version string embedded in reproducibility stanzas.
const char* build_version();

}  // namespace wf
