#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wf/pretrain.hpp"

namespace wf {

enum class FinetuneMode { linear_probe, full };

struct FinetuneConfig {
  FinetuneMode mode = FinetuneMode::linear_probe;
  double layer_decay = 0.75;
  double label_smoothing = 0.1;
  double noise_amplitude_ratio = 0.2;
  double noise_probability = 0.5;
  double drop_path = 0.0;  // defaults to the model preset's rate when < 0
  std::int64_t epochs = 50;
  std::int64_t warmup_epochs = 5;
  double peak_lr = 5e-4;
  double min_lr = 2.5e-7;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t batch_size = 4096;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class HeadKind { classification, regression };

template <typename S>
struct Head {
  HeadKind kind = HeadKind::classification;
  Tensor<S> weight;  // [out, d_e]
  Tensor<S> bias;    // [out]

  std::int64_t out_dim() const { return weight.dim(0); }
  static Head init(HeadKind kind, std::int64_t d_e, std::int64_t out, Rng& rng);
};

// Mean over real-channel tokens only: [B, C, Np, d_e] -> [B, d_e]. An
// example with no real channel is a contract error.
template <typename S>
Tensor<S> mean_pool(const Tensor<S>& embeddings, const std::vector<std::uint8_t>& pad_mask,
                    std::int64_t c_total);

// Label-smoothed cross entropy over logits [B, K]; smoothing eps spreads
// eps/K mass over all classes.
template <typename S>
Tensor<S> label_smoothed_ce(const Tensor<S>& logits, const std::vector<int>& labels, double eps);

// Mean squared error over [B, M] predictions against flat targets.
template <typename S>
Tensor<S> mse_loss(const Tensor<S>& predictions, const std::vector<double>& targets);

// ---- metrics -----------------------------------------------------------------

struct ClassificationMetrics {
  double loss = 0.0;
  double balanced_accuracy = 0.0;
  double auroc = 0.0;  // macro one-vs-rest
  double aupr = 0.0;   // macro one-vs-rest average precision
};

struct RegressionMetrics {
  double loss = 0.0;
  double r2 = 0.0;  // per-target R^2, averaged
  double rmse = 0.0;
};

double balanced_accuracy(const std::vector<int>& labels, const std::vector<int>& predictions,
                         int n_classes);
double macro_auroc(const std::vector<int>& labels, const std::vector<std::vector<double>>& scores,
                   int n_classes);
double macro_aupr(const std::vector<int>& labels, const std::vector<std::vector<double>>& scores,
                  int n_classes);
RegressionMetrics regression_metrics(const std::vector<std::vector<double>>& predictions,
                                     const std::vector<std::vector<double>>& targets);

// Layer-wise learning-rate multiplier for a named parameter: the head is
// group 0, encoder blocks count inward from the output, the embedding is the
// deepest group; multiplier = decay^group.
double layer_lr_multiplier(const std::string& param_name, std::int64_t n_layers, double decay);

struct FinetuneResult {
  std::vector<ClassificationMetrics> train_history;
  std::vector<ClassificationMetrics> val_history;
  std::string metrics_path;
};

// Supervised fine-tuning of a pooled-representation classifier head.
// linear_probe freezes every encoder parameter; full mode trains everything
// with layer-wise lr decay, waveform-space Gaussian noise augmentation, and
// stochastic depth. Expects z-scored recordings.
template <typename S>
FinetuneResult finetune_run(EncoderModel<S>& model, Head<S>& head,
                            const LabeledCorpus<S>& train, const LabeledCorpus<S>& val,
                            const FinetuneConfig& config, const std::string& out_dir,
                            const std::string& config_stanza = "");

// Regression variant: m targets per example, MSE objective, R^2/RMSE
// metrics (`epoch,split,loss,r2,rmse`).
template <typename S>
struct RegressionCorpus {
  std::vector<Recording<S>> recordings;
  std::vector<std::vector<double>> targets;
};

struct RegressionResult {
  std::vector<RegressionMetrics> train_history;
  std::vector<RegressionMetrics> val_history;
  std::string metrics_path;
};

template <typename S>
RegressionResult finetune_regression_run(EncoderModel<S>& model, Head<S>& head,
                                         const RegressionCorpus<S>& train,
                                         const RegressionCorpus<S>& val,
                                         const FinetuneConfig& config,
                                         const std::string& out_dir,
                                         const std::string& config_stanza = "");

}  // namespace wf
