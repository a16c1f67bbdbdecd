#include "wf/run_config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace wf {

const char* build_version() { return "waveformer 0.1.0"; }

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig c = EncoderConfig::preset(preset, parse_mechanism(mechanism));
  if (n_layers > 0) c.n_layers = n_layers;
  if (n_heads > 0) c.n_heads = n_heads;
  if (d_e > 0) c.d_e = d_e;
  if (mlp_dim > 0) c.mlp_dim = mlp_dim;
  if (patch_len > 0) c.patch_len = patch_len;
  if (c_max > 0) c.c_max = c_max;
  if (np_max > 0) c.np_max = np_max;
  if (drop_path >= 0.0) c.drop_path_rate = drop_path;
  c.validate();
  return c;
}

std::vector<double> RunConfig::parsed_class_freqs() const {
  std::vector<double> freqs;
  std::stringstream ss(class_freqs);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    freqs.push_back(std::stod(item));
  }
  if (freqs.empty()) throw ConfigError("class_freqs: no frequencies given");
  return freqs;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s;
  s.n_examples = n_examples;
  s.channels = channels;
  s.t = t;
  s.sampling_rate = sampling_rate;
  s.class_freqs = parsed_class_freqs();
  s.noise_std = noise_std;
  s.seed = seed;
  s.validate();
  return s;
}

namespace {

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::int64_t to_i64(const std::string& v) { return std::stoll(v); }
double to_f64(const std::string& v) { return std::stod(v); }
std::uint64_t to_u64(const std::string& v) { return std::stoull(v); }

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> kFields = {
      {"preset", {[](RunConfig& c, const std::string& v) { c.preset = v; },
                  [](const RunConfig& c) { return c.preset; }}},
      {"mechanism", {[](RunConfig& c, const std::string& v) { c.mechanism = v; },
                     [](const RunConfig& c) { return c.mechanism; }}},
      {"n_layers", {[](RunConfig& c, const std::string& v) { c.n_layers = to_i64(v); },
                    [](const RunConfig& c) { return std::to_string(c.n_layers); }}},
      {"n_heads", {[](RunConfig& c, const std::string& v) { c.n_heads = to_i64(v); },
                   [](const RunConfig& c) { return std::to_string(c.n_heads); }}},
      {"d_e", {[](RunConfig& c, const std::string& v) { c.d_e = to_i64(v); },
               [](const RunConfig& c) { return std::to_string(c.d_e); }}},
      {"mlp_dim", {[](RunConfig& c, const std::string& v) { c.mlp_dim = to_i64(v); },
                   [](const RunConfig& c) { return std::to_string(c.mlp_dim); }}},
      {"patch_len", {[](RunConfig& c, const std::string& v) { c.patch_len = to_i64(v); },
                     [](const RunConfig& c) { return std::to_string(c.patch_len); }}},
      {"c_max", {[](RunConfig& c, const std::string& v) { c.c_max = to_i64(v); },
                 [](const RunConfig& c) { return std::to_string(c.c_max); }}},
      {"np_max", {[](RunConfig& c, const std::string& v) { c.np_max = to_i64(v); },
                  [](const RunConfig& c) { return std::to_string(c.np_max); }}},
      {"drop_path", {[](RunConfig& c, const std::string& v) { c.drop_path = to_f64(v); },
                     [](const RunConfig& c) { return fmt(c.drop_path); }}},
      {"data_dir", {[](RunConfig& c, const std::string& v) { c.data_dir = v; },
                    [](const RunConfig& c) { return c.data_dir; }}},
      {"n_examples", {[](RunConfig& c, const std::string& v) { c.n_examples = to_i64(v); },
                      [](const RunConfig& c) { return std::to_string(c.n_examples); }}},
      {"channels", {[](RunConfig& c, const std::string& v) { c.channels = to_i64(v); },
                    [](const RunConfig& c) { return std::to_string(c.channels); }}},
      {"t", {[](RunConfig& c, const std::string& v) { c.t = to_i64(v); },
             [](const RunConfig& c) { return std::to_string(c.t); }}},
      {"sampling_rate", {[](RunConfig& c, const std::string& v) { c.sampling_rate = to_f64(v); },
                         [](const RunConfig& c) { return fmt(c.sampling_rate); }}},
      {"class_freqs", {[](RunConfig& c, const std::string& v) { c.class_freqs = v; },
                       [](const RunConfig& c) { return c.class_freqs; }}},
      {"noise_std", {[](RunConfig& c, const std::string& v) { c.noise_std = to_f64(v); },
                     [](const RunConfig& c) { return fmt(c.noise_std); }}},
      {"mask_ratio", {[](RunConfig& c, const std::string& v) { c.pretrain.mask_ratio = to_f64(v); },
                      [](const RunConfig& c) { return fmt(c.pretrain.mask_ratio); }}},
      {"alpha", {[](RunConfig& c, const std::string& v) { c.pretrain.alpha = to_f64(v); },
                 [](const RunConfig& c) { return fmt(c.pretrain.alpha); }}},
      {"batch_size", {[](RunConfig& c, const std::string& v) { c.pretrain.batch_size = to_i64(v); },
                      [](const RunConfig& c) { return std::to_string(c.pretrain.batch_size); }}},
      {"peak_lr", {[](RunConfig& c, const std::string& v) { c.pretrain.peak_lr = to_f64(v); },
                   [](const RunConfig& c) { return fmt(c.pretrain.peak_lr); }}},
      {"min_lr", {[](RunConfig& c, const std::string& v) { c.pretrain.min_lr = to_f64(v); },
                  [](const RunConfig& c) { return fmt(c.pretrain.min_lr); }}},
      {"warmup_epochs", {[](RunConfig& c, const std::string& v) { c.pretrain.warmup_epochs = to_i64(v); },
                         [](const RunConfig& c) { return std::to_string(c.pretrain.warmup_epochs); }}},
      {"max_epochs", {[](RunConfig& c, const std::string& v) { c.pretrain.max_epochs = to_i64(v); },
                      [](const RunConfig& c) { return std::to_string(c.pretrain.max_epochs); }}},
      {"stop_epoch", {[](RunConfig& c, const std::string& v) { c.pretrain.stop_epoch = to_i64(v); },
                      [](const RunConfig& c) { return std::to_string(c.pretrain.stop_epoch); }}},
      {"weight_decay", {[](RunConfig& c, const std::string& v) { c.pretrain.weight_decay = to_f64(v); },
                        [](const RunConfig& c) { return fmt(c.pretrain.weight_decay); }}},
      {"beta1", {[](RunConfig& c, const std::string& v) { c.pretrain.beta1 = to_f64(v); },
                 [](const RunConfig& c) { return fmt(c.pretrain.beta1); }}},
      {"beta2", {[](RunConfig& c, const std::string& v) { c.pretrain.beta2 = to_f64(v); },
                 [](const RunConfig& c) { return fmt(c.pretrain.beta2); }}},
      {"grad_clip", {[](RunConfig& c, const std::string& v) { c.pretrain.grad_clip = to_f64(v); },
                     [](const RunConfig& c) { return fmt(c.pretrain.grad_clip); }}},
      {"log_interval", {[](RunConfig& c, const std::string& v) { c.pretrain.log_interval = to_i64(v); },
                        [](const RunConfig& c) { return std::to_string(c.pretrain.log_interval); }}},
      {"ft_mode", {[](RunConfig& c, const std::string& v) {
                     if (v == "linear_probe") {
                       c.finetune.mode = FinetuneMode::linear_probe;
                     } else if (v == "full") {
                       c.finetune.mode = FinetuneMode::full;
                     } else {
                       throw ConfigError("ft_mode must be linear_probe or full, got '" + v + "'");
                     }
                   },
                   [](const RunConfig& c) {
                     return c.finetune.mode == FinetuneMode::full ? "full" : "linear_probe";
                   }}},
      {"layer_decay", {[](RunConfig& c, const std::string& v) { c.finetune.layer_decay = to_f64(v); },
                       [](const RunConfig& c) { return fmt(c.finetune.layer_decay); }}},
      {"label_smoothing", {[](RunConfig& c, const std::string& v) { c.finetune.label_smoothing = to_f64(v); },
                           [](const RunConfig& c) { return fmt(c.finetune.label_smoothing); }}},
      {"noise_amplitude_ratio",
       {[](RunConfig& c, const std::string& v) { c.finetune.noise_amplitude_ratio = to_f64(v); },
        [](const RunConfig& c) { return fmt(c.finetune.noise_amplitude_ratio); }}},
      {"noise_probability",
       {[](RunConfig& c, const std::string& v) { c.finetune.noise_probability = to_f64(v); },
        [](const RunConfig& c) { return fmt(c.finetune.noise_probability); }}},
      {"ft_drop_path", {[](RunConfig& c, const std::string& v) { c.finetune.drop_path = to_f64(v); },
                        [](const RunConfig& c) { return fmt(c.finetune.drop_path); }}},
      {"ft_epochs", {[](RunConfig& c, const std::string& v) { c.finetune.epochs = to_i64(v); },
                     [](const RunConfig& c) { return std::to_string(c.finetune.epochs); }}},
      {"ft_warmup_epochs",
       {[](RunConfig& c, const std::string& v) { c.finetune.warmup_epochs = to_i64(v); },
        [](const RunConfig& c) { return std::to_string(c.finetune.warmup_epochs); }}},
      {"ft_peak_lr", {[](RunConfig& c, const std::string& v) { c.finetune.peak_lr = to_f64(v); },
                      [](const RunConfig& c) { return fmt(c.finetune.peak_lr); }}},
      {"ft_min_lr", {[](RunConfig& c, const std::string& v) { c.finetune.min_lr = to_f64(v); },
                     [](const RunConfig& c) { return fmt(c.finetune.min_lr); }}},
      {"ft_weight_decay",
       {[](RunConfig& c, const std::string& v) { c.finetune.weight_decay = to_f64(v); },
        [](const RunConfig& c) { return fmt(c.finetune.weight_decay); }}},
      {"ft_beta1", {[](RunConfig& c, const std::string& v) { c.finetune.beta1 = to_f64(v); },
                    [](const RunConfig& c) { return fmt(c.finetune.beta1); }}},
      {"ft_beta2", {[](RunConfig& c, const std::string& v) { c.finetune.beta2 = to_f64(v); },
                    [](const RunConfig& c) { return fmt(c.finetune.beta2); }}},
      {"ft_batch_size", {[](RunConfig& c, const std::string& v) { c.finetune.batch_size = to_i64(v); },
                         [](const RunConfig& c) { return std::to_string(c.finetune.batch_size); }}},
      {"n_classes", {[](RunConfig& c, const std::string& v) { c.n_classes = to_i64(v); },
                     [](const RunConfig& c) { return std::to_string(c.n_classes); }}},
      {"seed", {[](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"precision", {[](RunConfig& c, const std::string& v) {
                       if (v != "f32" && v != "f64") {
                         throw ConfigError("precision must be f32 or f64, got '" + v + "'");
                       }
                       c.precision = v;
                     },
                     [](const RunConfig& c) { return c.precision; }}},
  };
  return kFields;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, field] : fields()) {
    out += key;
    out += " = ";
    out += field.get(*this);
    out += "\n";
  }
  return out;
}

std::uint64_t RunConfig::config_hash() const {
  // FNV-1a 64 over the canonical serialization.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : canonical()) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string RunConfig::stanza() const {
  std::ostringstream os;
  os << "# config_hash = " << std::hex << config_hash() << std::dec << "\n";
  os << "# seed = " << seed << "\n";
  os << "# build = " << build_version() << "\n";
  return os.str();
}

RunConfig parse_run_text(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = fields().find(key);
    if (it == fields().end()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    try {
      it->second.set(config, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad value '" + value +
                        "' for key '" + key + "' (" + e.what() + ")");
    }
  }
  return config;
}

RunConfig parse_run_file(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw ConfigError("cannot open run file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return parse_run_text(text, path);
}

}  // namespace wf
