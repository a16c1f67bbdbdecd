#include "wf/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

namespace wf {

void PretrainConfig::validate() const {
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) {
    throw ConfigError("PretrainConfig: mask_ratio must lie in (0,1) for pre-training");
  }
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("PretrainConfig: alpha outside [0,1]");
  if (batch_size < 1) throw ConfigError("PretrainConfig: batch_size must be positive");
  if (warmup_epochs >= max_epochs) {
    throw ConfigError("PretrainConfig: warmup_epochs must be smaller than max_epochs");
  }
  if (stop_epoch < 1 || stop_epoch > max_epochs) {
    throw ConfigError("PretrainConfig: stop_epoch outside [1, max_epochs]");
  }
  if (peak_lr <= 0.0 || min_lr < 0.0 || min_lr > peak_lr) {
    throw ConfigError("PretrainConfig: need 0 < min_lr <= peak_lr");
  }
}

template <typename S>
LossResult<S> reconstruction_loss(const Tensor<S>& patches, const Tensor<S>& predictions,
                                  const TokenBatch<S>& batch, double alpha) {
  if (patches.shape() != predictions.shape()) {
    throw ShapeError("reconstruction_loss: shapes " + shape_str(patches.shape()) + " and " +
                     shape_str(predictions.shape()) + " differ");
  }
  const std::int64_t b = batch.batch, ct = batch.c_total, np = batch.np;
  if (patches.rank() != 4 || patches.dim(0) != b || patches.dim(1) != ct || patches.dim(2) != np) {
    throw ShapeError("reconstruction_loss: patch tensor does not match the batch geometry");
  }

  // Per-position weights 1/(B*|M_b|) resp. 1/(B*|Mbar_b|); pads get zero.
  Tensor<S> w_masked = Tensor<S>::zeros({b, ct, np});
  Tensor<S> w_visible = Tensor<S>::zeros({b, ct, np});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const std::int64_t n_masked =
        static_cast<std::int64_t>(batch.mask_set[static_cast<std::size_t>(bi)].size());
    if (n_masked == 0) {
      throw ContractError("reconstruction_loss: empty mask set for example " + std::to_string(bi));
    }
    const std::int64_t n_real = batch.real_channels(bi) * np;
    const std::int64_t n_visible = n_real - n_masked;
    const S wm = static_cast<S>(1.0 / (static_cast<double>(b) * static_cast<double>(n_masked)));
    const S wv = n_visible > 0
                     ? static_cast<S>(1.0 / (static_cast<double>(b) * static_cast<double>(n_visible)))
                     : S(0);
    for (std::int64_t ci = 0; ci < ct; ++ci) {
      if (!batch.is_real(bi, ci)) continue;
      for (std::int64_t i = 0; i < np; ++i) {
        w_visible.data()[(bi * ct + ci) * np + i] = wv;
      }
    }
    for (const auto& [ci, i] : batch.mask_set[static_cast<std::size_t>(bi)]) {
      w_masked.data()[(bi * ct + ci) * np + i] = wm;
      w_visible.data()[(bi * ct + ci) * np + i] = S(0);
    }
  }

  Tensor<S> diff = sub(predictions, patches);
  Tensor<S> per_position = reduce_sum(mul(diff, diff), {3}, false);  // [B, C, Np]
  Tensor<S> l_masked = sum_all(mul(per_position, w_masked));
  Tensor<S> l_visible = sum_all(mul(per_position, w_visible));
  Tensor<S> total = add(l_masked, mul_scalar(l_visible, static_cast<S>(alpha)));

  LossResult<S> result;
  result.total = total;
  result.values.l_masked = static_cast<double>(l_masked.item());
  result.values.l_visible = static_cast<double>(l_visible.item());
  result.values.total = static_cast<double>(total.item());
  return result;
}

double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                        double peak, double min_lr) {
  if (total_steps <= 0) throw ContractError("cosine_warmup_lr: total_steps must be positive");
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return min_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename S>
AdamW<S>::AdamW(std::vector<Tensor<S>*> params, double beta1, double beta2, double weight_decay,
                double eps)
    : params_(std::move(params)),
      lr_mult_(params_.size(), 1.0),
      beta1_(beta1),
      beta2_(beta2),
      weight_decay_(weight_decay),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<std::size_t>(params_[i]->numel()), S(0));
    v_[i].assign(static_cast<std::size_t>(params_[i]->numel()), S(0));
  }
}

template <typename S>
void AdamW<S>::set_lr_multipliers(std::vector<double> multipliers) {
  if (multipliers.size() != params_.size()) {
    throw ContractError("AdamW: one lr multiplier per parameter required");
  }
  lr_mult_ = std::move(multipliers);
}

template <typename S>
void AdamW<S>::step(double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor<S>& p = *params_[pi];
    if (!p.has_grad()) continue;
    auto grads = p.grad();
    auto vals = p.data();
    const double plr = lr * lr_mult_[pi];
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      const double m = beta1_ * static_cast<double>(m_[pi][i]) + (1.0 - beta1_) * g;
      const double v = beta2_ * static_cast<double>(v_[pi][i]) + (1.0 - beta2_) * g * g;
      m_[pi][i] = static_cast<S>(m);
      v_[pi][i] = static_cast<S>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                            weight_decay_ * static_cast<double>(vals[i]);
      vals[i] = static_cast<S>(static_cast<double>(vals[i]) - plr * update);
    }
  }
}

template <typename S>
void AdamW<S>::zero_grad() {
  for (Tensor<S>* p : params_) p->zero_grad();
}

template <typename S>
std::vector<NamedBlob> AdamW<S>::state_blobs(const std::vector<std::string>& names) const {
  if (names.size() != params_.size()) {
    throw ContractError("AdamW::state_blobs: one name per parameter required");
  }
  std::vector<NamedBlob> blobs;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    blobs.push_back({"opt.m." + names[i], params_[i]->shape(), {m_[i].begin(), m_[i].end()}});
    blobs.push_back({"opt.v." + names[i], params_[i]->shape(), {v_[i].begin(), v_[i].end()}});
  }
  blobs.push_back({"opt.step", {1}, {static_cast<float>(step_count_)}});
  return blobs;
}

template <typename S>
void AdamW<S>::load_state_blobs(const std::vector<std::string>& names,
                                const std::map<std::string, NamedBlob>& blobs) {
  if (names.size() != params_.size()) {
    throw ContractError("AdamW::load_state_blobs: one name per parameter required");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto mi = blobs.find("opt.m." + names[i]);
    const auto vi = blobs.find("opt.v." + names[i]);
    if (mi == blobs.end() || vi == blobs.end()) {
      throw FormatError("checkpoint is missing optimizer state for '" + names[i] + "'");
    }
    m_[i].assign(mi->second.data.begin(), mi->second.data.end());
    v_[i].assign(vi->second.data.begin(), vi->second.data.end());
  }
  const auto st = blobs.find("opt.step");
  if (st == blobs.end() || st->second.data.empty()) {
    throw FormatError("checkpoint is missing opt.step");
  }
  step_count_ = static_cast<std::int64_t>(st->second.data[0]);
}

template <typename S>
double clip_grad_norm(const std::vector<Tensor<S>*>& params, double max_norm) {
  double sq = 0.0;
  for (Tensor<S>* p : params) {
    if (!p->has_grad()) continue;
    for (const S g : p->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (Tensor<S>* p : params) {
      if (!p->has_grad()) continue;
      for (S& g : p->grad()) g *= scale;
    }
  }
  return norm;
}

template <typename S>
LossBreakdown pretrain_step(EncoderModel<S>& model, AdamW<S>& opt, const TokenBatch<S>& batch,
                            double lr, const PretrainConfig& config, std::int64_t batch_index) {
  Tensor<S> embeddings = encoder_forward(model, batch);
  Tensor<S> predictions = reconstruct_patches(model, embeddings);
  LossResult<S> loss = reconstruction_loss(batch.raw_patches, predictions, batch, config.alpha);
  if (!std::isfinite(loss.values.total)) {
    throw ContractError("pretrain_step: non-finite loss at batch " + std::to_string(batch_index));
  }
  backward(loss.total);
  std::vector<Tensor<S>*> params;
  auto named = model.named_parameters();
  params.reserve(named.size());
  for (auto& [name, t] : named) params.push_back(t);
  clip_grad_norm(params, config.grad_clip);
  opt.step(lr);
  opt.zero_grad();
  return loss.values;
}

namespace {

// Deterministic shuffle of example order for one epoch.
std::vector<std::int64_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::int64_t n) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).fork(0xE90C000ull + static_cast<std::uint64_t>(epoch));
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

}  // namespace

template <typename S>
PretrainResult pretrain_run(EncoderModel<S>& model, const std::vector<Recording<S>>& corpus,
                            const PretrainConfig& config, const std::string& out_dir,
                            const std::string& resume_from, const std::string& config_stanza) {
  config.validate();
  if (corpus.empty()) throw ContractError("pretrain_run: empty corpus");
  std::filesystem::create_directories(out_dir);

  const std::int64_t n = static_cast<std::int64_t>(corpus.size());
  const std::int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total_steps = steps_per_epoch * config.max_epochs;
  const std::int64_t warmup_steps = steps_per_epoch * config.warmup_epochs;

  std::vector<Tensor<S>*> params;
  std::vector<std::string> param_names;
  for (auto& [name, t] : model.named_parameters()) {
    params.push_back(t);
    param_names.push_back(name);
  }
  AdamW<S> opt(params, config.beta1, config.beta2, config.weight_decay);

  std::int64_t start_epoch = 0;
  if (!resume_from.empty()) {
    auto loaded = load_checkpoint<S>(resume_from);
    if (!(loaded.model.config.n_layers == model.config.n_layers &&
          loaded.model.config.d_e == model.config.d_e)) {
      throw ConfigError("pretrain_run: resume checkpoint config does not match the model");
    }
    // Adopt the stored parameters and optimizer state.
    auto src = loaded.model.named_parameters();
    auto dst = model.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].second->data().begin(), src[i].second->data().end(),
                dst[i].second->data().begin());
    }
    opt.load_state_blobs(param_names, loaded.extra);
    const auto ep = loaded.extra.find("train.next_epoch");
    if (ep == loaded.extra.end() || ep->second.data.empty()) {
      throw FormatError("resume checkpoint is missing train.next_epoch");
    }
    start_epoch = static_cast<std::int64_t>(ep->second.data[0]);
  }

  PretrainResult result;
  result.metrics_path = out_dir + "/pretrain_metrics.csv";
  result.best_checkpoint = out_dir + "/best.ckpt";
  result.final_checkpoint = out_dir + "/final.ckpt";

  std::ofstream metrics(result.metrics_path,
                        start_epoch == 0 ? std::ios::trunc : std::ios::app);
  if (!metrics) throw FormatError("pretrain_run: cannot open '" + result.metrics_path + "'");
  if (metrics.tellp() == std::ofstream::pos_type(0)) {
    if (!config_stanza.empty()) metrics << config_stanza;
    metrics << "epoch,step,l_masked,l_visible,total,lr\n";
  }

  double best_total = std::numeric_limits<double>::infinity();
  auto save_with_state = [&](const std::string& path, std::int64_t next_epoch) {
    std::vector<NamedBlob> extra = opt.state_blobs(param_names);
    extra.push_back({"train.next_epoch", {1}, {static_cast<float>(next_epoch)}});
    save_checkpoint(path, model, extra);
  };

  for (std::int64_t epoch = start_epoch; epoch < config.stop_epoch; ++epoch) {
    const auto order = epoch_order(config.seed, epoch, n);
    LossBreakdown epoch_sum;
    std::int64_t epoch_steps = 0;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const std::int64_t lo = step * config.batch_size;
      const std::int64_t hi = std::min(lo + config.batch_size, n);
      std::vector<const Recording<S>*> recs;
      recs.reserve(static_cast<std::size_t>(hi - lo));
      for (std::int64_t i = lo; i < hi; ++i) {
        recs.push_back(&corpus[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      }
      TokenRecipe<S> recipe = collate(recs, model.config.patch_len, model.config.patch_len,
                                      model.config.c_max);
      recipe.masked = true;
      recipe.mask_ratio = config.mask_ratio;
      recipe.mask_seed = Rng(config.seed)
                             .fork(0x3A5Cull)
                             .fork(static_cast<std::uint64_t>(epoch * steps_per_epoch + step))
                             .next_u64();
      TokenBatch<S> batch = build_token_batch(std::move(recipe), model.embed);

      const std::int64_t global_step = epoch * steps_per_epoch + step;
      const double lr = cosine_warmup_lr(global_step, total_steps, warmup_steps, config.peak_lr,
                                         config.min_lr);
      const LossBreakdown loss = pretrain_step(model, opt, batch, lr, config, global_step);
      epoch_sum.l_masked += loss.l_masked;
      epoch_sum.l_visible += loss.l_visible;
      epoch_sum.total += loss.total;
      ++epoch_steps;
      if (global_step % config.log_interval == 0) {
        metrics << epoch << "," << global_step << "," << loss.l_masked << "," << loss.l_visible
                << "," << loss.total << "," << lr << "\n";
      }
    }
    LossBreakdown mean{epoch_sum.l_masked / static_cast<double>(epoch_steps),
                       epoch_sum.l_visible / static_cast<double>(epoch_steps),
                       epoch_sum.total / static_cast<double>(epoch_steps)};
    result.epoch_means.push_back(mean);
    result.epoch_mean_total.push_back(mean.total);
    metrics.flush();
    if (mean.total < best_total) {
      best_total = mean.total;
      result.best_epoch = epoch;
      save_with_state(result.best_checkpoint, epoch + 1);
    }
    save_with_state(result.final_checkpoint, epoch + 1);
  }
  return result;
}

#define WF_INSTANTIATE_PRETRAIN(S)                                                              \
  template struct LossResult<S>;                                                                \
  template LossResult<S> reconstruction_loss(const Tensor<S>&, const Tensor<S>&,                \
                                             const TokenBatch<S>&, double);                     \
  template class AdamW<S>;                                                                      \
  template double clip_grad_norm(const std::vector<Tensor<S>*>&, double);                       \
  template LossBreakdown pretrain_step(EncoderModel<S>&, AdamW<S>&, const TokenBatch<S>&,       \
                                       double, const PretrainConfig&, std::int64_t);            \
  template PretrainResult pretrain_run(EncoderModel<S>&, const std::vector<Recording<S>>&,     \
                                       const PretrainConfig&, const std::string&,               \
                                       const std::string&, const std::string&);

WF_INSTANTIATE_PRETRAIN(float)
WF_INSTANTIATE_PRETRAIN(double)

#undef WF_INSTANTIATE_PRETRAIN

}  // namespace wf
