#include "wf/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace wf {

void FinetuneConfig::validate() const {
  if (layer_decay <= 0.0 || layer_decay > 1.0) {
    throw ConfigError("FinetuneConfig: layer_decay outside (0,1]");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("FinetuneConfig: label_smoothing outside [0,1)");
  }
  if (noise_probability < 0.0 || noise_probability > 1.0) {
    throw ConfigError("FinetuneConfig: noise_probability outside [0,1]");
  }
  if (epochs < 1 || batch_size < 1) throw ConfigError("FinetuneConfig: epochs/batch_size must be positive");
  if (warmup_epochs >= epochs + 1) {
    throw ConfigError("FinetuneConfig: warmup_epochs must not exceed epochs");
  }
}

template <typename S>
Head<S> Head<S>::init(HeadKind kind, std::int64_t d_e, std::int64_t out, Rng& rng) {
  Head h;
  h.kind = kind;
  h.weight = Tensor<S>::zeros({out, d_e}, true);
  h.bias = Tensor<S>::zeros({out}, true);
  for (auto& v : h.weight.data()) v = static_cast<S>(rng.trunc_normal(0.02));
  return h;
}

template <typename S>
Tensor<S> mean_pool(const Tensor<S>& embeddings, const std::vector<std::uint8_t>& pad_mask,
                    std::int64_t c_total) {
  if (embeddings.rank() != 4 || embeddings.dim(1) != c_total) {
    throw ShapeError("mean_pool: expected [B,C,Np,d_e] with C=" + std::to_string(c_total));
  }
  const std::int64_t b = embeddings.dim(0), np = embeddings.dim(2), de = embeddings.dim(3);
  Tensor<S> real01 = Tensor<S>::zeros({b, c_total, 1, 1});
  Tensor<S> inv_count = Tensor<S>::zeros({b, 1});
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::int64_t n_real = 0;
    for (std::int64_t ci = 0; ci < c_total; ++ci) {
      if (pad_mask[static_cast<std::size_t>(bi * c_total + ci)]) {
        real01.data()[bi * c_total + ci] = S(1);
        ++n_real;
      }
    }
    if (n_real == 0) throw ContractError("mean_pool: example " + std::to_string(bi) + " is all-pad");
    inv_count.data()[bi] = static_cast<S>(1.0 / static_cast<double>(n_real * np));
  }
  Tensor<S> summed = reduce_sum(mul(embeddings, real01), {1, 2}, false);  // [B, d_e]
  (void)de;
  return mul(summed, inv_count);
}

template <typename S>
Tensor<S> label_smoothed_ce(const Tensor<S>& logits, const std::vector<int>& labels, double eps) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ShapeError("label_smoothed_ce: logits [B,K] must match the label count");
  }
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  Tensor<S> q = Tensor<S>::zeros({b, k});
  const S off = static_cast<S>(eps / static_cast<double>(k) / static_cast<double>(b));
  const S on = static_cast<S>((1.0 - eps) / static_cast<double>(b));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const int label = labels[static_cast<std::size_t>(bi)];
    if (label < 0 || label >= k) {
      throw ConfigError("label_smoothed_ce: label " + std::to_string(label) +
                        " outside the " + std::to_string(k) + "-way head");
    }
    for (std::int64_t ki = 0; ki < k; ++ki) q.data()[bi * k + ki] = off;
    q.data()[bi * k + label] += on;
  }
  return mul_scalar(sum_all(mul(log_softmax(logits, 1), q)), S(-1));
}

template <typename S>
Tensor<S> mse_loss(const Tensor<S>& predictions, const std::vector<double>& targets) {
  if (predictions.numel() != static_cast<std::int64_t>(targets.size())) {
    throw ShapeError("mse_loss: prediction/target size mismatch");
  }
  Tensor<S> t = Tensor<S>::zeros(predictions.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(targets[static_cast<std::size_t>(i)]);
  Tensor<S> diff = sub(predictions, t);
  return mul_scalar(sum_all(mul(diff, diff)), static_cast<S>(1.0 / static_cast<double>(targets.size())));
}

// ---- metrics -------------------------------------------------------------------

double balanced_accuracy(const std::vector<int>& labels, const std::vector<int>& predictions,
                         int n_classes) {
  if (labels.size() != predictions.size()) {
    throw ContractError("balanced_accuracy: size mismatch");
  }
  double sum_recall = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    std::int64_t tp = 0, total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != c) continue;
      ++total;
      if (predictions[i] == c) ++tp;
    }
    if (total == 0) continue;
    sum_recall += static_cast<double>(tp) / static_cast<double>(total);
    ++present;
  }
  return present > 0 ? sum_recall / present : 0.0;
}

namespace {

// Mann-Whitney AUROC with midranks for ties.
double binary_auroc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> ranks(scores.size(), 0.0);
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = midrank;
    i = j + 1;
  }
  double rank_sum = 0.0;
  std::int64_t n_pos = 0;
  for (std::size_t t = 0; t < scores.size(); ++t) {
    if (positive[t]) {
      rank_sum += ranks[t];
      ++n_pos;
    }
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(scores.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  return (rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Average precision over the descending-score sweep.
double binary_aupr(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::int64_t n_pos = 0;
  for (const bool p : positive) n_pos += p ? 1 : 0;
  if (n_pos == 0) return 0.0;
  double ap = 0.0;
  std::int64_t tp = 0;
  for (std::size_t rank = 0; rank < idx.size(); ++rank) {
    if (positive[idx[rank]]) {
      ++tp;
      const double precision = static_cast<double>(tp) / static_cast<double>(rank + 1);
      ap += precision / static_cast<double>(n_pos);
    }
  }
  return ap;
}

}  // namespace

double macro_auroc(const std::vector<int>& labels, const std::vector<std::vector<double>>& scores,
                   int n_classes) {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> s(labels.size());
    std::vector<bool> pos(labels.size());
    bool any_pos = false, any_neg = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = scores[i][static_cast<std::size_t>(c)];
      pos[i] = labels[i] == c;
      any_pos = any_pos || pos[i];
      any_neg = any_neg || !pos[i];
    }
    if (!any_pos || !any_neg) continue;
    sum += binary_auroc(s, pos);
    ++present;
  }
  return present > 0 ? sum / present : 0.5;
}

double macro_aupr(const std::vector<int>& labels, const std::vector<std::vector<double>>& scores,
                  int n_classes) {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> s(labels.size());
    std::vector<bool> pos(labels.size());
    bool any_pos = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = scores[i][static_cast<std::size_t>(c)];
      pos[i] = labels[i] == c;
      any_pos = any_pos || pos[i];
    }
    if (!any_pos) continue;
    sum += binary_aupr(s, pos);
    ++present;
  }
  return present > 0 ? sum / present : 0.0;
}

RegressionMetrics regression_metrics(const std::vector<std::vector<double>>& predictions,
                                     const std::vector<std::vector<double>>& targets) {
  if (predictions.size() != targets.size() || predictions.empty()) {
    throw ContractError("regression_metrics: size mismatch or empty input");
  }
  const std::size_t m = targets[0].size();
  RegressionMetrics out;
  double sq_sum = 0.0;
  double r2_sum = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) mean += targets[i][j];
    mean /= static_cast<double>(targets.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double d = targets[i][j] - predictions[i][j];
      ss_res += d * d;
      ss_tot += (targets[i][j] - mean) * (targets[i][j] - mean);
      sq_sum += d * d;
    }
    r2_sum += ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
  }
  out.r2 = r2_sum / static_cast<double>(m);
  out.rmse = std::sqrt(sq_sum / static_cast<double>(targets.size() * m));
  return out;
}

double layer_lr_multiplier(const std::string& param_name, std::int64_t n_layers, double decay) {
  std::int64_t group = 0;
  if (param_name.rfind("head.", 0) == 0) {
    group = 0;
  } else if (param_name.rfind("layers.", 0) == 0) {
    const std::size_t dot = param_name.find('.', 7);
    const std::int64_t layer = std::stoll(param_name.substr(7, dot - 7));
    group = n_layers - layer;  // last block is group 1
  } else {
    group = n_layers + 1;  // embeddings and everything else at the input end
  }
  return std::pow(decay, static_cast<double>(group));
}

// ---- fine-tuning loop ------------------------------------------------------------

namespace {

// Waveform-space Gaussian noise: with probability p, add
// N(0, (ratio*sigma_c)^2) per channel.
template <typename S>
Recording<S> maybe_add_noise(const Recording<S>& rec, double probability, double ratio, Rng& rng) {
  if (rng.uniform() >= probability) return rec;
  Recording<S> noisy = rec;
  for (std::int64_t ci = 0; ci < rec.c; ++ci) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t ti = 0; ti < rec.t; ++ti) mean += static_cast<double>(rec.at(ti, ci));
    mean /= static_cast<double>(rec.t);
    for (std::int64_t ti = 0; ti < rec.t; ++ti) {
      const double d = static_cast<double>(rec.at(ti, ci)) - mean;
      var += d * d;
    }
    const double sigma = std::sqrt(var / static_cast<double>(rec.t));
    const double noise_std = ratio * sigma;
    if (noise_std <= 0.0) continue;
    for (std::int64_t ti = 0; ti < rec.t; ++ti) {
      noisy.samples[static_cast<std::size_t>(ti * rec.c + ci)] +=
          static_cast<S>(noise_std * rng.normal());
    }
  }
  return noisy;
}

}  // namespace

template <typename S>
FinetuneResult finetune_run(EncoderModel<S>& model, Head<S>& head,
                            const LabeledCorpus<S>& train, const LabeledCorpus<S>& val,
                            const FinetuneConfig& config, const std::string& out_dir,
                            const std::string& config_stanza) {
  config.validate();
  if (head.kind != HeadKind::classification) {
    throw ConfigError("finetune_run: this entry point trains classification heads");
  }
  if (train.recordings.empty()) throw ContractError("finetune_run: empty training set");
  for (const int label : train.labels) {
    if (label < 0 || label >= head.out_dim()) {
      throw ConfigError("finetune_run: label " + std::to_string(label) + " does not fit a " +
                        std::to_string(head.out_dim()) + "-way head");
    }
  }
  std::filesystem::create_directories(out_dir);

  const bool full = config.mode == FinetuneMode::full;
  const double drop_rate = config.drop_path < 0.0 ? model.config.drop_path_rate : config.drop_path;

  // Parameter set: head always; encoder only in full mode (linear probing
  // freezes it).
  std::vector<Tensor<S>*> params = {&head.weight, &head.bias};
  std::vector<double> mults = {1.0, 1.0};
  if (full) {
    for (auto& [name, t] : model.named_parameters()) {
      params.push_back(t);
      mults.push_back(layer_lr_multiplier(name, model.config.n_layers, config.layer_decay));
    }
  }
  AdamW<S> opt(params, config.beta1, config.beta2, config.weight_decay);
  opt.set_lr_multipliers(mults);

  const std::int64_t n = static_cast<std::int64_t>(train.recordings.size());
  const std::int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * config.warmup_epochs;
  const int n_classes = static_cast<int>(head.out_dim());

  FinetuneResult result;
  result.metrics_path = out_dir + "/finetune_metrics.csv";
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw FormatError("finetune_run: cannot open '" + result.metrics_path + "'");
  if (!config_stanza.empty()) metrics << config_stanza;
  metrics << "epoch,split,loss,balanced_acc,auroc,aupr\n";

  Rng noise_rng = Rng(config.seed).fork(0x401CEull);
  Rng drop_rng = Rng(config.seed).fork(0xD209ull);

  auto forward_batch = [&](const std::vector<const Recording<S>*>& recs, bool training)
      -> Tensor<S> {
    TokenRecipe<S> recipe = collate(recs, model.config.patch_len, model.config.patch_len,
                                    model.config.c_max);
    TokenBatch<S> batch = build_token_batch(std::move(recipe), model.embed);
    ForwardOptions opts;
    if (training && full && drop_rate > 0.0) {
      opts.drop_path_rng = &drop_rng;
      opts.drop_path_rate = drop_rate;
    }
    Tensor<S> emb = encoder_forward(model, batch, opts);
    Tensor<S> pooled = mean_pool(emb, batch.pad_mask, batch.c_total);
    return add(matmul_nt(pooled, head.weight), head.bias);  // [B, K]
  };

  // The probe freezes the encoder and runs no augmentation, so pooled
  // features are constant: compute them once and train the head on the
  // cache.
  auto compute_features = [&](const LabeledCorpus<S>& data) -> Tensor<S> {
    NoGradGuard guard;
    const std::int64_t nd = static_cast<std::int64_t>(data.recordings.size());
    Tensor<S> features = Tensor<S>::zeros({std::max<std::int64_t>(nd, 1), model.config.d_e});
    for (std::int64_t lo = 0; lo < nd; lo += config.batch_size) {
      const std::int64_t hi = std::min(lo + config.batch_size, nd);
      std::vector<const Recording<S>*> recs;
      for (std::int64_t i = lo; i < hi; ++i) recs.push_back(&data.recordings[static_cast<std::size_t>(i)]);
      TokenRecipe<S> recipe = collate(recs, model.config.patch_len, model.config.patch_len,
                                      model.config.c_max);
      TokenBatch<S> batch = build_token_batch(std::move(recipe), model.embed);
      Tensor<S> pooled = mean_pool(encoder_forward(model, batch), batch.pad_mask, batch.c_total);
      std::copy(pooled.data().begin(), pooled.data().end(),
                features.data().begin() + lo * model.config.d_e);
    }
    return features;
  };
  Tensor<S> train_features, val_features;
  if (!full) {
    train_features = compute_features(train);
    val_features = compute_features(val);
  }

  auto head_logits = [&](const Tensor<S>& features, const std::vector<std::int64_t>& rows) {
    return add(matmul_nt(gather_rows(features, rows), head.weight), head.bias);
  };

  auto evaluate = [&](const LabeledCorpus<S>& data, const Tensor<S>& features)
      -> ClassificationMetrics {
    NoGradGuard guard;
    ClassificationMetrics m;
    if (data.recordings.empty()) return m;
    std::vector<int> preds;
    std::vector<std::vector<double>> probs;
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    const std::int64_t nv = static_cast<std::int64_t>(data.recordings.size());
    for (std::int64_t lo = 0; lo < nv; lo += config.batch_size) {
      const std::int64_t hi = std::min(lo + config.batch_size, nv);
      std::vector<int> labels;
      for (std::int64_t i = lo; i < hi; ++i) labels.push_back(data.labels[static_cast<std::size_t>(i)]);
      Tensor<S> logits;
      if (full) {
        std::vector<const Recording<S>*> recs;
        for (std::int64_t i = lo; i < hi; ++i) {
          recs.push_back(&data.recordings[static_cast<std::size_t>(i)]);
        }
        logits = forward_batch(recs, false);
      } else {
        std::vector<std::int64_t> rows;
        for (std::int64_t i = lo; i < hi; ++i) rows.push_back(i);
        logits = head_logits(features, rows);
      }
      loss_sum += static_cast<double>(label_smoothed_ce(logits, labels, config.label_smoothing).item());
      ++batches;
      Tensor<S> p = softmax(logits, 1);
      for (std::int64_t bi = 0; bi < hi - lo; ++bi) {
        std::vector<double> row(static_cast<std::size_t>(n_classes));
        int best = 0;
        for (int ki = 0; ki < n_classes; ++ki) {
          row[static_cast<std::size_t>(ki)] = static_cast<double>(p.data()[bi * n_classes + ki]);
          if (row[static_cast<std::size_t>(ki)] > row[static_cast<std::size_t>(best)]) best = ki;
        }
        probs.push_back(std::move(row));
        preds.push_back(best);
      }
    }
    m.loss = loss_sum / static_cast<double>(std::max<std::int64_t>(batches, 1));
    m.balanced_accuracy = balanced_accuracy(data.labels, preds, n_classes);
    m.auroc = macro_auroc(data.labels, probs, n_classes);
    m.aupr = macro_aupr(data.labels, probs, n_classes);
    return m;
  };

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Deterministic shuffle, same scheme as pre-training.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng(config.seed).fork(0xF17Eull + static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const std::int64_t lo = step * config.batch_size;
      const std::int64_t hi = std::min(lo + config.batch_size, n);
      std::vector<int> labels;
      for (std::int64_t i = lo; i < hi; ++i) {
        labels.push_back(train.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      }
      const std::int64_t global_step = epoch * steps_per_epoch + step;
      const double lr = cosine_warmup_lr(global_step, total_steps, warmup_steps, config.peak_lr,
                                         config.min_lr);
      Tensor<S> logits;
      if (full) {
        std::vector<Recording<S>> storage;
        storage.reserve(static_cast<std::size_t>(hi - lo));
        for (std::int64_t i = lo; i < hi; ++i) {
          const auto src = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
          if (config.noise_probability > 0.0) {
            storage.push_back(maybe_add_noise(train.recordings[src], config.noise_probability,
                                              config.noise_amplitude_ratio, noise_rng));
          } else {
            storage.push_back(train.recordings[src]);
          }
        }
        std::vector<const Recording<S>*> recs;
        for (const auto& rec : storage) recs.push_back(&rec);
        logits = forward_batch(recs, true);
      } else {
        std::vector<std::int64_t> rows;
        for (std::int64_t i = lo; i < hi; ++i) rows.push_back(order[static_cast<std::size_t>(i)]);
        logits = head_logits(train_features, rows);
      }
      Tensor<S> loss = label_smoothed_ce(logits, labels, config.label_smoothing);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw ContractError("finetune_run: non-finite loss at step " + std::to_string(global_step));
      }
      backward(loss);
      clip_grad_norm(params, 1.0);
      opt.step(lr);
      opt.zero_grad();
    }
    const auto train_metrics = evaluate(train, train_features);
    const auto val_metrics = evaluate(val, val_features);
    result.train_history.push_back(train_metrics);
    result.val_history.push_back(val_metrics);
    metrics << epoch << ",train," << train_metrics.loss << "," << train_metrics.balanced_accuracy
            << "," << train_metrics.auroc << "," << train_metrics.aupr << "\n";
    metrics << epoch << ",val," << val_metrics.loss << "," << val_metrics.balanced_accuracy << ","
            << val_metrics.auroc << "," << val_metrics.aupr << "\n";
    metrics.flush();
  }
  return result;
}

template <typename S>
RegressionResult finetune_regression_run(EncoderModel<S>& model, Head<S>& head,
                                         const RegressionCorpus<S>& train,
                                         const RegressionCorpus<S>& val,
                                         const FinetuneConfig& config,
                                         const std::string& out_dir,
                                         const std::string& config_stanza) {
  config.validate();
  if (head.kind != HeadKind::regression) {
    throw ConfigError("finetune_regression_run: head must be a regression head");
  }
  if (train.recordings.empty()) throw ContractError("finetune_regression_run: empty training set");
  const std::int64_t m = head.out_dim();
  for (const auto& t : train.targets) {
    if (static_cast<std::int64_t>(t.size()) != m) {
      throw ConfigError("finetune_regression_run: target width " + std::to_string(t.size()) +
                        " does not fit an m=" + std::to_string(m) + " head");
    }
  }
  std::filesystem::create_directories(out_dir);

  const bool full = config.mode == FinetuneMode::full;
  const double drop_rate = config.drop_path < 0.0 ? model.config.drop_path_rate : config.drop_path;
  std::vector<Tensor<S>*> params = {&head.weight, &head.bias};
  std::vector<double> mults = {1.0, 1.0};
  if (full) {
    for (auto& [name, t] : model.named_parameters()) {
      params.push_back(t);
      mults.push_back(layer_lr_multiplier(name, model.config.n_layers, config.layer_decay));
    }
  }
  AdamW<S> opt(params, config.beta1, config.beta2, config.weight_decay);
  opt.set_lr_multipliers(mults);

  const std::int64_t n = static_cast<std::int64_t>(train.recordings.size());
  const std::int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * config.warmup_epochs;

  RegressionResult result;
  result.metrics_path = out_dir + "/finetune_metrics.csv";
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw FormatError("finetune_regression_run: cannot open '" + result.metrics_path + "'");
  if (!config_stanza.empty()) metrics << config_stanza;
  metrics << "epoch,split,loss,r2,rmse\n";

  Rng noise_rng = Rng(config.seed).fork(0x401CEull);
  Rng drop_rng = Rng(config.seed).fork(0xD209ull);

  auto predict = [&](const std::vector<const Recording<S>*>& recs, bool training) -> Tensor<S> {
    TokenRecipe<S> recipe = collate(recs, model.config.patch_len, model.config.patch_len,
                                    model.config.c_max);
    TokenBatch<S> batch = build_token_batch(std::move(recipe), model.embed);
    ForwardOptions opts;
    if (training && full && drop_rate > 0.0) {
      opts.drop_path_rng = &drop_rng;
      opts.drop_path_rate = drop_rate;
    }
    Tensor<S> pooled = mean_pool(encoder_forward(model, batch, opts), batch.pad_mask, batch.c_total);
    return add(matmul_nt(pooled, head.weight), head.bias);
  };

  auto evaluate = [&](const RegressionCorpus<S>& data) -> RegressionMetrics {
    NoGradGuard guard;
    std::vector<std::vector<double>> preds;
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    const std::int64_t nv = static_cast<std::int64_t>(data.recordings.size());
    for (std::int64_t lo = 0; lo < nv; lo += config.batch_size) {
      const std::int64_t hi = std::min(lo + config.batch_size, nv);
      std::vector<const Recording<S>*> recs;
      std::vector<double> flat;
      for (std::int64_t i = lo; i < hi; ++i) {
        recs.push_back(&data.recordings[static_cast<std::size_t>(i)]);
        for (const double t : data.targets[static_cast<std::size_t>(i)]) flat.push_back(t);
      }
      Tensor<S> out = predict(recs, false);
      loss_sum += static_cast<double>(mse_loss(out, flat).item());
      ++batches;
      for (std::int64_t bi = 0; bi < hi - lo; ++bi) {
        std::vector<double> row(static_cast<std::size_t>(m));
        for (std::int64_t j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = out.data()[bi * m + j];
        preds.push_back(std::move(row));
      }
    }
    RegressionMetrics metrics_out = regression_metrics(preds, data.targets);
    metrics_out.loss = loss_sum / static_cast<double>(std::max<std::int64_t>(batches, 1));
    return metrics_out;
  };

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng(config.seed).fork(0xF17Eull + static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n - 1; i > 0; --i) {
      const std::int64_t j = static_cast<std::int64_t>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const std::int64_t lo = step * config.batch_size;
      const std::int64_t hi = std::min(lo + config.batch_size, n);
      std::vector<Recording<S>> storage;
      std::vector<double> flat;
      storage.reserve(static_cast<std::size_t>(hi - lo));
      for (std::int64_t i = lo; i < hi; ++i) {
        const auto src = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
        if (full && config.noise_probability > 0.0) {
          storage.push_back(maybe_add_noise(train.recordings[src], config.noise_probability,
                                            config.noise_amplitude_ratio, noise_rng));
        } else {
          storage.push_back(train.recordings[src]);
        }
        for (const double t : train.targets[src]) flat.push_back(t);
      }
      std::vector<const Recording<S>*> recs;
      for (const auto& rec : storage) recs.push_back(&rec);
      const std::int64_t global_step = epoch * steps_per_epoch + step;
      const double lr = cosine_warmup_lr(global_step, total_steps, warmup_steps, config.peak_lr,
                                         config.min_lr);
      Tensor<S> loss = mse_loss(predict(recs, true), flat);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw ContractError("finetune_regression_run: non-finite loss at step " +
                            std::to_string(global_step));
      }
      backward(loss);
      clip_grad_norm(params, 1.0);
      opt.step(lr);
      opt.zero_grad();
    }
    const auto train_metrics = evaluate(train);
    const auto val_metrics = evaluate(val);
    result.train_history.push_back(train_metrics);
    result.val_history.push_back(val_metrics);
    metrics << epoch << ",train," << train_metrics.loss << "," << train_metrics.r2 << ","
            << train_metrics.rmse << "\n";
    metrics << epoch << ",val," << val_metrics.loss << "," << val_metrics.r2 << ","
            << val_metrics.rmse << "\n";
    metrics.flush();
  }
  return result;
}

#define WF_INSTANTIATE_FINETUNE(S)                                                           \
  template struct Head<S>;                                                                   \
  template Tensor<S> mean_pool(const Tensor<S>&, const std::vector<std::uint8_t>&,           \
                               std::int64_t);                                                \
  template Tensor<S> label_smoothed_ce(const Tensor<S>&, const std::vector<int>&, double);   \
  template Tensor<S> mse_loss(const Tensor<S>&, const std::vector<double>&);                 \
  template FinetuneResult finetune_run(EncoderModel<S>&, Head<S>&, const LabeledCorpus<S>&,  \
                                       const LabeledCorpus<S>&, const FinetuneConfig&,       \
                                       const std::string&, const std::string&);              \
  template struct RegressionCorpus<S>;                                                       \
  template RegressionResult finetune_regression_run(EncoderModel<S>&, Head<S>&,              \
                                                    const RegressionCorpus<S>&,              \
                                                    const RegressionCorpus<S>&,              \
                                                    const FinetuneConfig&, const std::string&,\
                                                    const std::string&);

WF_INSTANTIATE_FINETUNE(float)
WF_INSTANTIATE_FINETUNE(double)

#undef WF_INSTANTIATE_FINETUNE

}  // namespace wf
