#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "wf/data_io.hpp"
#include "wf/finetune.hpp"

using wf::TensorD;
using wf::TensorF;

TEST_CASE("mean_pool basics and loop oracle") {
  // All tokens equal v -> pool == v.
  const std::int64_t b = 1, c = 3, np = 2, de = 4;
  auto emb = TensorD::zeros({b, c, np, de});
  for (std::int64_t i = 0; i < emb.numel(); ++i) emb.data()[i] = static_cast<double>(i % de) + 1.0;
  std::vector<std::uint8_t> pad(static_cast<std::size_t>(c), 1);
  auto pool = wf::mean_pool(emb, pad, c);
  for (std::int64_t d = 0; d < de; ++d) CHECK(pool.data()[d] == doctest::Approx(d + 1.0));

  // Pads excluded; matches an explicit loop.
  wf::Rng rng(3);
  auto emb2 = TensorD::zeros({1, 4, 3, 2});
  oracle::fill_uniform(emb2, rng);
  std::vector<std::uint8_t> pad2 = {1, 1, 0, 0};
  auto pooled = wf::mean_pool(emb2, pad2, 4);
  for (std::int64_t d = 0; d < 2; ++d) {
    double want = 0.0;
    for (std::int64_t ci = 0; ci < 2; ++ci) {
      for (std::int64_t i = 0; i < 3; ++i) want += emb2.data()[(ci * 3 + i) * 2 + d];
    }
    want /= 6.0;
    CHECK(pooled.data()[d] == doctest::Approx(want).epsilon(1e-12));
  }

  // Pool is invariant to the pad channels' content.
  auto emb3 = emb2.detach();
  for (std::int64_t i = 2 * 3 * 2; i < 4 * 3 * 2; ++i) emb3.data()[i] = 99.0;
  auto pooled3 = wf::mean_pool(emb3, pad2, 4);
  for (std::int64_t d = 0; d < 2; ++d) {
    CHECK(std::abs(pooled3.data()[d] - pooled.data()[d]) < 1e-6);
  }

  // Permuting real channels leaves the mean unchanged.
  auto emb4 = emb2.detach();
  for (std::int64_t i = 0; i < 3 * 2; ++i) {
    std::swap(emb4.data()[i], emb4.data()[3 * 2 + i]);
  }
  auto pooled4 = wf::mean_pool(emb4, pad2, 4);
  for (std::int64_t d = 0; d < 2; ++d) {
    CHECK(pooled4.data()[d] == doctest::Approx(pooled.data()[d]).epsilon(1e-12));
  }

  std::vector<std::uint8_t> all_pad = {0, 0, 0, 0};
  CHECK_THROWS_AS(wf::mean_pool(emb2, all_pad, 4), wf::ContractError);
}

TEST_CASE("label smoothing floor is positive, not zero") {
  const double eps = 0.1;
  const int k = 2;
  // Minimum loss equals the entropy of the smoothed target, achieved at
  // p = q; it does not tend to zero with confidence.
  const double q_on = 1.0 - eps + eps / k;
  const double q_off = eps / k;
  const double floor = -(q_on * std::log(q_on) + q_off * std::log(q_off));
  CHECK(floor > 0.0);

  // Logits matching q exactly attain the floor.
  auto at_q = TensorD::from({1, 2}, {std::log(q_on), std::log(q_off)});
  auto loss_q = wf::label_smoothed_ce(at_q, {0}, eps);
  CHECK(loss_q.item() == doctest::Approx(floor).epsilon(1e-10));

  // Very confident correct predictions cost more than the floor.
  auto confident = TensorD::from({1, 2}, {30.0, -30.0});
  auto loss_conf = wf::label_smoothed_ce(confident, {0}, eps);
  CHECK(loss_conf.item() > floor);
  CHECK(loss_conf.item() > 1.0);  // far from zero

  // eps = 0 reduces to plain cross entropy.
  auto plain = wf::label_smoothed_ce(confident, {0}, 0.0);
  CHECK(plain.item() == doctest::Approx(-std::log(1.0 / (1.0 + std::exp(-60.0)))).epsilon(1e-6));
}

TEST_CASE("balanced accuracy equals accuracy on balanced data") {
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  const std::vector<int> preds = {0, 1, 1, 1, 2, 0};
  double plain = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) plain += labels[i] == preds[i] ? 1.0 : 0.0;
  plain /= static_cast<double>(labels.size());
  CHECK(wf::balanced_accuracy(labels, preds, 3) == doctest::Approx(plain));

  // Imbalanced case differs from plain accuracy.
  const std::vector<int> labels2 = {0, 0, 0, 0, 1};
  const std::vector<int> preds2 = {0, 0, 0, 0, 0};
  CHECK(wf::balanced_accuracy(labels2, preds2, 2) == doctest::Approx(0.5));
}

TEST_CASE("auroc and aupr behave on separable and random scores") {
  std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  std::vector<std::vector<double>> perfect = {{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3},
                                              {0.1, 0.9}, {0.2, 0.8}, {0.3, 0.7}};
  CHECK(wf::macro_auroc(labels, perfect, 2) == doctest::Approx(1.0));
  CHECK(wf::macro_aupr(labels, perfect, 2) == doctest::Approx(1.0));

  std::vector<std::vector<double>> constant(6, {0.5, 0.5});
  CHECK(wf::macro_auroc(labels, constant, 2) == doctest::Approx(0.5));
}

TEST_CASE("regression metrics closed forms") {
  std::vector<std::vector<double>> targets = {{1, 10}, {2, 20}, {3, 30}};
  auto perfect = wf::regression_metrics(targets, targets);
  CHECK(perfect.r2 == doctest::Approx(1.0));
  CHECK(perfect.rmse == doctest::Approx(0.0));

  std::vector<std::vector<double>> off = {{2, 10}, {3, 20}, {4, 30}};
  auto biased = wf::regression_metrics(off, targets);
  CHECK(biased.rmse == doctest::Approx(std::sqrt(3.0 / 6.0)));
  // Predicting the mean scores R^2 = 0 on that target.
  std::vector<std::vector<double>> mean_pred = {{2, 10}, {2, 20}, {2, 30}};
  auto mean_metrics = wf::regression_metrics(mean_pred, targets);
  CHECK(mean_metrics.r2 == doctest::Approx(0.5));  // target 0 at R^2=0, target 1 perfect
}

TEST_CASE("mse loss and gradient") {
  auto pred = TensorD::from({1, 2}, {1.0, 2.0}, true);
  auto loss = wf::mse_loss(pred, {0.0, 0.0});
  CHECK(loss.item() == doctest::Approx(2.5));
  wf::backward(loss);
  CHECK(pred.grad()[0] == doctest::Approx(1.0));
  CHECK(pred.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("layer-wise lr multipliers decay from the head inward") {
  // Two encoder blocks -> four groups: head, layers.1, layers.0, embed.
  CHECK(wf::layer_lr_multiplier("head.weight", 2, 0.75) == doctest::Approx(1.0));
  CHECK(wf::layer_lr_multiplier("layers.1.attn.w_q", 2, 0.75) == doctest::Approx(0.75));
  CHECK(wf::layer_lr_multiplier("layers.0.mlp.w1", 2, 0.75) == doctest::Approx(0.5625));
  CHECK(wf::layer_lr_multiplier("embed.w_proj", 2, 0.75) == doctest::Approx(0.421875));
}

namespace {

wf::LabeledCorpus<float> spectral_corpus(std::int64_t n, std::uint64_t seed) {
  wf::SynthSpec spec;
  spec.n_examples = n;
  spec.channels = 2;
  spec.t = 128;
  spec.sampling_rate = 64.0;
  spec.class_freqs = {4.0, 14.0};
  spec.noise_std = 0.2;
  spec.seed = seed;
  auto corpus = wf::generate_synthetic<float>(spec);
  for (auto& rec : corpus.recordings) wf::zscore_channels(rec);
  return corpus;
}

wf::EncoderConfig probe_config() {
  wf::EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_e = 16;
  cfg.mlp_dim = 32;
  cfg.patch_len = 16;
  cfg.c_max = 2;
  cfg.np_max = 8;
  return cfg;
}

}  // namespace

TEST_CASE("linear probe reaches 100% train accuracy on separable features and freezes the encoder") {
  // 16 points in 16-d general position are always linearly separable.
  auto corpus = spectral_corpus(16, 5);
  auto model = wf::build_encoder<float>(probe_config(), 7);

  std::vector<std::vector<float>> before;
  for (auto& [name, t] : model.named_parameters()) {
    before.emplace_back(t->data().begin(), t->data().end());
  }

  wf::Rng head_rng(1);
  auto head = wf::Head<float>::init(wf::HeadKind::classification, 16, 2, head_rng);
  wf::FinetuneConfig cfg;
  cfg.mode = wf::FinetuneMode::linear_probe;
  cfg.epochs = 200;
  cfg.warmup_epochs = 5;
  cfg.peak_lr = 1e-1;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.label_smoothing = 0.0;  // pure perceptron-learnable regime
  cfg.weight_decay = 0.0;
  const std::string dir = "test_probe_out";
  auto result = wf::finetune_run(model, head, corpus, corpus, cfg, dir);
  CHECK(result.train_history.back().balanced_accuracy == doctest::Approx(1.0));

  std::size_t i = 0;
  for (auto& [name, t] : model.named_parameters()) {
    CHECK(std::memcmp(before[i].data(), t->data().data(), sizeof(float) * before[i].size()) == 0);
    ++i;
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("full fine-tune updates the encoder and writes metrics") {
  auto corpus = spectral_corpus(16, 9);
  auto model = wf::build_encoder<float>(probe_config(), 8);
  auto first_before = model.layers[0].attn.w_q.data()[0];

  wf::Rng head_rng(2);
  auto head = wf::Head<float>::init(wf::HeadKind::classification, 16, 2, head_rng);
  wf::FinetuneConfig cfg;
  cfg.mode = wf::FinetuneMode::full;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 4;
  cfg.drop_path = 0.1;
  const std::string dir = "test_full_ft_out";
  auto result = wf::finetune_run(model, head, corpus, corpus, cfg, dir, "# stanza\n");
  CHECK(model.layers[0].attn.w_q.data()[0] != first_before);
  CHECK(result.val_history.size() == 2);

  std::ifstream metrics(dir + "/finetune_metrics.csv");
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "# stanza");
  std::getline(metrics, line);
  CHECK(line == "epoch,split,loss,balanced_acc,auroc,aupr");
  std::filesystem::remove_all(dir);
}

TEST_CASE("regression fine-tune fits per-example bandpower targets") {
  // Target = per-channel energy summary; learnable from pooled features.
  auto corpus = spectral_corpus(32, 21);
  wf::RegressionCorpus<float> data;
  for (std::size_t i = 0; i < corpus.recordings.size(); ++i) {
    data.recordings.push_back(corpus.recordings[i]);
    data.targets.push_back({corpus.labels[i] == 0 ? -1.0 : 1.0,
                            0.5 * (corpus.labels[i] == 0 ? -1.0 : 1.0)});
  }
  auto model = wf::build_encoder<float>(probe_config(), 12);
  wf::Rng head_rng(4);
  auto head = wf::Head<float>::init(wf::HeadKind::regression, 16, 2, head_rng);
  wf::FinetuneConfig cfg;
  cfg.mode = wf::FinetuneMode::full;
  cfg.epochs = 12;
  cfg.warmup_epochs = 2;
  cfg.peak_lr = 2e-3;
  cfg.batch_size = 16;
  cfg.seed = 6;
  cfg.noise_probability = 0.0;
  cfg.drop_path = 0.0;
  const std::string dir = "test_reg_ft_out";
  auto result = wf::finetune_regression_run(model, head, data, data, cfg, dir);
  CHECK(result.val_history.back().r2 > result.val_history.front().r2);
  CHECK(result.val_history.back().rmse < result.val_history.front().rmse);

  std::ifstream metrics(dir + "/finetune_metrics.csv");
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "epoch,split,loss,r2,rmse");
  std::filesystem::remove_all(dir);

  // Kind mismatch is rejected.
  wf::Rng rng2(5);
  auto cls_head = wf::Head<float>::init(wf::HeadKind::classification, 16, 2, rng2);
  CHECK_THROWS_AS(wf::finetune_regression_run(model, cls_head, data, data, cfg, dir),
                  wf::ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("label/head mismatch is a config error") {
  auto corpus = spectral_corpus(8, 11);
  corpus.labels[0] = 7;  // outside a 2-way head
  auto model = wf::build_encoder<float>(probe_config(), 1);
  wf::Rng head_rng(1);
  auto head = wf::Head<float>::init(wf::HeadKind::classification, 16, 2, head_rng);
  wf::FinetuneConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(wf::finetune_run(model, head, corpus, corpus, cfg, "test_mismatch_out"),
                  wf::ConfigError);
  std::filesystem::remove_all("test_mismatch_out");
}
