#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wf/data_io.hpp"
#include "wf/encoder.hpp"

namespace wf {

struct PretrainConfig {
  double mask_ratio = 0.5;
  double alpha = 0.1;
  std::int64_t batch_size = 4096;
  double peak_lr = 1.25e-3;
  double min_lr = 2.5e-7;
  std::int64_t warmup_epochs = 3;
  std::int64_t max_epochs = 100;  // schedule horizon
  std::int64_t stop_epoch = 30;   // early stop, not a convergence criterion
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::int64_t log_interval = 1;  // steps per metrics row

  void validate() const;
};

struct LossBreakdown {
  double l_masked = 0.0;
  double l_visible = 0.0;
  double total = 0.0;
};

// Reconstruction objective: per-position term is the squared L2
// norm of the length-L patch difference, averaged over the masked set and its
// real-channel complement; total = l_masked + alpha * l_visible. Pad channels
// contribute nothing. Returns the scalar graph tensor plus the numbers.
template <typename S>
struct LossResult {
  Tensor<S> total;
  LossBreakdown values;
};

template <typename S>
LossResult<S> reconstruction_loss(const Tensor<S>& patches, const Tensor<S>& predictions,
                                  const TokenBatch<S>& batch, double alpha);

// Cosine schedule with linear warmup, parameterized in steps. lr(0) = 0,
// lr(warmup_steps) = peak, lr(total_steps) = min.
double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                        double peak, double min_lr);

// Decoupled-weight-decay adaptive-moment optimizer over an explicit
// parameter list; per-parameter learning-rate multipliers support layer-wise
// decay during fine-tuning.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>*> params, double beta1, double beta2, double weight_decay,
        double eps = 1e-8);

  void set_lr_multipliers(std::vector<double> multipliers);
  void step(double lr);
  void zero_grad();

  std::int64_t step_count() const { return step_count_; }
  // Moment state round-trips through checkpoints.
  std::vector<NamedBlob> state_blobs(const std::vector<std::string>& names) const;
  void load_state_blobs(const std::vector<std::string>& names,
                        const std::map<std::string, NamedBlob>& blobs);

 private:
  std::vector<Tensor<S>*> params_;
  std::vector<std::vector<S>> m_, v_;
  std::vector<double> lr_mult_;
  double beta1_, beta2_, weight_decay_, eps_;
  std::int64_t step_count_ = 0;
};

// Global-norm gradient clipping; returns the pre-clip norm.
template <typename S>
double clip_grad_norm(const std::vector<Tensor<S>*>& params, double max_norm);

// One optimization step on an already-masked batch. Throws with the batch
// index if the loss is non-finite.
template <typename S>
LossBreakdown pretrain_step(EncoderModel<S>& model, AdamW<S>& opt, const TokenBatch<S>& batch,
                            double lr, const PretrainConfig& config, std::int64_t batch_index);

struct PretrainResult {
  std::vector<double> epoch_mean_total;
  std::vector<LossBreakdown> epoch_means;
  std::string metrics_path;
  std::string best_checkpoint;
  std::string final_checkpoint;
  std::int64_t best_epoch = 0;
};

// Masked-autoencoding loop over an in-memory corpus (already normalized).
// Writes a metrics CSV (`epoch,step,l_masked,l_visible,total,lr`) topped by a
// reproducibility stanza, checkpoints the best and final epochs, and resumes
// deterministically when `resume_from` names a checkpoint.
template <typename S>
PretrainResult pretrain_run(EncoderModel<S>& model, const std::vector<Recording<S>>& corpus,
                            const PretrainConfig& config, const std::string& out_dir,
                            const std::string& resume_from = "",
                            const std::string& config_stanza = "");

}  // namespace wf
