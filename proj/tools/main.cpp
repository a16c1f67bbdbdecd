// waveformer: per-channel patch tokenization, alternating-attention encoding,
// masked-autoencoding pre-training, fine-tuning, and an attention complexity
// benchmark, behind one binary.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "wf/bench.hpp"
#include "wf/data_io.hpp"
#include "wf/finetune.hpp"
#include "wf/pretrain.hpp"
#include "wf/run_config.hpp"
#include "wf/verify.hpp"

namespace {

namespace fs = std::filesystem;

wf::RunConfig load_config(const std::string& path, std::uint64_t seed_override, bool has_seed,
                          const std::string& precision_override) {
  wf::RunConfig config = path.empty() ? wf::RunConfig{} : wf::parse_run_file(path);
  if (has_seed) config.seed = seed_override;
  if (!precision_override.empty()) config.precision = precision_override;
  return config;
}

template <typename S>
wf::LabeledCorpus<S> load_corpus(const std::string& data_dir) {
  const std::string manifest_path = data_dir + "/manifest.csv";
  wf::LabeledCorpus<S> corpus;
  for (const auto& entry : wf::read_manifest(manifest_path)) {
    const std::string rec_path =
        fs::path(entry.path).is_absolute() ? entry.path : data_dir + "/" + entry.path;
    auto rec = wf::load_recording<S>(rec_path);
    wf::zscore_channels(rec);
    corpus.recordings.push_back(std::move(rec));
    corpus.labels.push_back(entry.label);
  }
  if (corpus.recordings.empty()) {
    throw wf::ContractError("corpus at '" + data_dir + "' is empty");
  }
  return corpus;
}

int cmd_generate(const wf::RunConfig& config, const std::string& out_dir) {
  const wf::SynthSpec spec = config.synth_spec();
  auto corpus = wf::generate_synthetic<float>(spec);
  fs::create_directories(out_dir);
  std::vector<wf::ManifestEntry> entries;
  for (std::size_t i = 0; i < corpus.recordings.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "rec_%06zu.eegw", i);
    wf::save_recording(out_dir + "/" + name, corpus.recordings[i]);
    entries.push_back({name, corpus.labels[i]});
  }
  wf::write_manifest(out_dir + "/manifest.csv", entries);
  std::cout << "wrote " << entries.size() << " recordings + manifest to " << out_dir << "\n";
  return 0;
}

template <typename S>
int cmd_pretrain(const wf::RunConfig& config, const std::string& out_dir,
                 const std::string& resume, std::int64_t epochs_override) {
  if (config.data_dir.empty()) {
    throw wf::ConfigError("pretrain: config must set data_dir (run `generate` first)");
  }
  wf::RunConfig effective = config;
  if (epochs_override > 0) {
    effective.pretrain.stop_epoch = epochs_override;
    effective.pretrain.max_epochs = std::max(effective.pretrain.max_epochs, epochs_override);
    if (effective.pretrain.warmup_epochs >= effective.pretrain.max_epochs) {
      effective.pretrain.warmup_epochs = std::max<std::int64_t>(effective.pretrain.max_epochs - 1, 0);
    }
  }
  effective.pretrain.seed = effective.seed;
  auto corpus = load_corpus<S>(effective.data_dir);
  auto model = wf::build_encoder<S>(effective.encoder_config(), effective.seed);
  const auto result = wf::pretrain_run(model, corpus.recordings, effective.pretrain, out_dir,
                                       resume, effective.stanza());
  std::cout << "pre-training done: " << result.epoch_mean_total.size() << " epochs, final mean loss "
            << result.epoch_mean_total.back() << "\n"
            << "metrics: " << result.metrics_path << "\n"
            << "checkpoints: " << result.best_checkpoint << " (best, epoch " << result.best_epoch
            << "), " << result.final_checkpoint << " (final)\n";
  return 0;
}

template <typename S>
int cmd_finetune(const wf::RunConfig& config, const std::string& checkpoint,
                 const std::string& out_dir, double val_fraction) {
  if (config.data_dir.empty()) throw wf::ConfigError("finetune: config must set data_dir");
  auto loaded = wf::load_checkpoint<S>(checkpoint);
  auto corpus = load_corpus<S>(config.data_dir);

  wf::LabeledCorpus<S> train, val;
  const std::int64_t n = static_cast<std::int64_t>(corpus.recordings.size());
  const std::int64_t n_train = static_cast<std::int64_t>(static_cast<double>(n) * (1.0 - val_fraction));
  for (std::int64_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? train : val;
    dst.recordings.push_back(std::move(corpus.recordings[static_cast<std::size_t>(i)]));
    dst.labels.push_back(corpus.labels[static_cast<std::size_t>(i)]);
  }

  wf::RunConfig effective = config;
  effective.finetune.seed = effective.seed;
  wf::Rng head_rng(effective.seed ^ 0x4EADull);
  auto head = wf::Head<S>::init(wf::HeadKind::classification, loaded.model.config.d_e,
                                effective.n_classes, head_rng);
  const auto result = wf::finetune_run(loaded.model, head, train, val, effective.finetune, out_dir,
                                       effective.stanza());
  const auto& final_val = result.val_history.back();
  std::cout << "fine-tuning done: held-out balanced acc " << 100.0 * final_val.balanced_accuracy
            << "%, auroc " << final_val.auroc << ", aupr " << final_val.aupr << "\n"
            << "metrics: " << result.metrics_path << "\n";
  return 0;
}

template <typename S>
int cmd_reconstruct(const std::string& checkpoint, const std::string& input,
                    const std::string& out_path, double ratio, std::uint64_t seed) {
  auto loaded = wf::load_checkpoint<S>(checkpoint);
  auto& model = loaded.model;
  auto rec = wf::load_recording<S>(input);
  wf::zscore_channels(rec);

  std::vector<std::int64_t> offsets(static_cast<std::size_t>(rec.c));
  for (std::int64_t i = 0; i < rec.c; ++i) offsets[static_cast<std::size_t>(i)] = i;
  auto grid = wf::patch(rec, model.config.patch_len, model.config.patch_len);
  auto batch0 = wf::embed(grid, model.embed, offsets);
  auto batch = ratio > 0.0 ? wf::mask_tokens(batch0, model.embed, ratio, seed) : batch0;

  wf::NoGradGuard guard;
  auto pred = wf::reconstruct_patches(model, wf::encoder_forward(model, batch));

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw wf::FormatError("reconstruct: cannot open '" + out_path + "'");
  out << "channel,patch,offset,original,reconstructed,masked\n";
  std::set<std::pair<std::int64_t, std::int64_t>> masked(batch.mask_set[0].begin(),
                                                         batch.mask_set[0].end());
  const std::int64_t np = batch.np, len = model.config.patch_len;
  for (std::int64_t c = 0; c < rec.c; ++c) {
    for (std::int64_t i = 0; i < np; ++i) {
      for (std::int64_t l = 0; l < len; ++l) {
        out << c << "," << i << "," << l << ","
            << batch.raw_patches.data()[((c * np) + i) * len + l] << ","
            << pred.data()[((c * np) + i) * len + l] << "," << (masked.count({c, i}) ? 1 : 0)
            << "\n";
      }
    }
  }
  std::cout << "wrote original/masked/reconstructed patches to " << out_path << "\n";
  return 0;
}

int cmd_bench(const std::string& mechanisms, const std::string& config_name, std::int64_t np,
              std::int64_t c_min, std::int64_t c_max, int reps, int warmup,
              const std::string& out_csv, const std::string& dat_dir, std::uint64_t seed,
              bool no_load_check) {
  wf::SweepSpec spec;
  std::stringstream ss(mechanisms);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) spec.mechanisms.push_back(wf::parse_cost_mechanism(item));
  }
  spec.config_names = {config_name};
  spec.np = np;
  for (std::int64_t c = c_min; c <= c_max; ++c) spec.c_values.push_back(c);
  spec.repetitions = reps;
  spec.warmup = warmup;
  spec.seed = seed;
  spec.check_load = !no_load_check;

  const auto reports = wf::run_sweep(spec);
  for (const auto& r : reports) {
    if (r.status == "load_warning") {
      std::cerr << "warning: background CPU load above 25%, measurements skipped\n";
      break;
    }
  }
  if (out_csv.empty()) {
    wf::write_cost_csv(std::cout, reports);
  } else {
    std::ofstream out(out_csv, std::ios::trunc);
    if (!out) throw wf::FormatError("bench: cannot open '" + out_csv + "'");
    wf::write_cost_csv(out, reports);
    std::cout << "wrote " << reports.size() << " sweep rows to " << out_csv << "\n";
  }
  if (!dat_dir.empty()) {
    wf::write_gnuplot_dat(dat_dir, reports);
    std::cout << "wrote gnuplot series to " << dat_dir << "\n";
  }
  return 0;
}

int cmd_verify(const std::string& scratch) {
  const auto results = wf::run_acceptance(std::cout, scratch);
  const bool ok = wf::all_passed(results);
  std::cout << (ok ? "all criteria passed" : "FAILURES present") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-channel waveform encoder: tokenize, pre-train, fine-tune, benchmark"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", precision, resume, checkpoint, input;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::int64_t epochs_override = -1;
  double val_fraction = 0.2;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run file (key = value lines)");
    cmd->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      has_seed = true;
    });
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--precision", precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
  };

  auto* generate = app.add_subcommand("generate", "write a synthetic labeled corpus");
  add_common(generate);

  auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoding pre-training");
  add_common(pretrain);
  pretrain->add_option("--epochs", epochs_override, "override stop epoch");
  pretrain->add_option("--resume", resume, "resume from a checkpoint");

  auto* finetune = app.add_subcommand("finetune", "linear probe or full fine-tune");
  add_common(finetune);
  finetune->add_option("--checkpoint", checkpoint, "pre-trained checkpoint")->required();
  finetune->add_option("--val-fraction", val_fraction, "held-out fraction (default 0.2)");

  auto* reconstruct = app.add_subcommand("reconstruct",
                                         "mask one recording and dump reconstructions as CSV");
  add_common(reconstruct);
  reconstruct->add_option("--checkpoint", checkpoint, "pre-trained checkpoint")->required();
  reconstruct->add_option("--input", input, "recording file")->required();
  double ratio = 0.5;
  reconstruct->add_option("--ratio", ratio, "masking ratio (default 0.5)");

  auto* bench = app.add_subcommand("bench", "attention complexity sweep");
  std::string mechanisms = "standard,alternating,two_axis,bottleneck";
  std::string bench_config = "large";
  std::int64_t np = 20, c_min = 1, c_max_v = 64;
  int reps = 10, warmup = 3;
  std::string out_csv, dat_dir;
  bool no_load_check = false;
  bench->add_option("--mechanisms", mechanisms, "comma list: intra,inter,alternating,standard,two_axis,bottleneck");
  bench->add_option("--config", bench_config, "encoder preset (small|base|large|tiny)");
  bench->add_option("--np", np, "patches per channel (default 20)");
  bench->add_option("--c-min", c_min, "first channel count (default 1)");
  bench->add_option("--c-max", c_max_v, "last channel count (default 64)");
  bench->add_option("--reps", reps, "timing repetitions (default 10)");
  bench->add_option("--warmup", warmup, "warmup iterations (default 3)");
  bench->add_option("--csv", out_csv, "CSV output path (default stdout)");
  bench->add_option("--dat", dat_dir, "also emit gnuplot .dat series here");
  bench->add_option("--seed", seed, "sweep input seed");
  bench->add_flag("--no-load-check", no_load_check, "skip the background-load refusal");

  auto* verify = app.add_subcommand("verify", "run the oracle/invariant acceptance suite");
  std::string scratch = "";
  verify->add_option("--out", scratch, "scratch directory for suite artifacts");

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      return cmd_generate(load_config(config_path, seed, has_seed, precision), out_dir);
    }
    if (pretrain->parsed()) {
      const auto config = load_config(config_path, seed, has_seed, precision);
      return config.precision == "f64"
                 ? cmd_pretrain<double>(config, out_dir, resume, epochs_override)
                 : cmd_pretrain<float>(config, out_dir, resume, epochs_override);
    }
    if (finetune->parsed()) {
      const auto config = load_config(config_path, seed, has_seed, precision);
      return config.precision == "f64"
                 ? cmd_finetune<double>(config, checkpoint, out_dir, val_fraction)
                 : cmd_finetune<float>(config, checkpoint, out_dir, val_fraction);
    }
    if (reconstruct->parsed()) {
      const auto config = load_config(config_path, seed, has_seed, precision);
      const std::string out_path = out_dir + "/reconstruction.csv";
      std::filesystem::create_directories(out_dir);
      return config.precision == "f64"
                 ? cmd_reconstruct<double>(checkpoint, input, out_path, ratio, config.seed)
                 : cmd_reconstruct<float>(checkpoint, input, out_path, ratio, config.seed);
    }
    if (bench->parsed()) {
      return cmd_bench(mechanisms, bench_config, np, c_min, c_max_v, reps, warmup, out_csv,
                       dat_dir, seed, no_load_check);
    }
    if (verify->parsed()) {
      if (scratch.empty()) {
        scratch = (std::filesystem::temp_directory_path() / "waveformer_verify").string();
      }
      return cmd_verify(scratch);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
