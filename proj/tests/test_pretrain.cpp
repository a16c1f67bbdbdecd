#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "wf/data_io.hpp"
#include "wf/pretrain.hpp"

using wf::EncoderConfig;
using wf::PretrainConfig;
using wf::TensorD;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_e = 8;
  cfg.mlp_dim = 16;
  cfg.patch_len = 8;
  cfg.c_max = 3;
  cfg.np_max = 4;
  return cfg;
}

template <typename S>
wf::TokenBatch<S> masked_batch(const wf::EncoderModel<S>& model, std::uint64_t seed,
                               double ratio = 0.5) {
  wf::SynthSpec spec;
  spec.n_examples = 2;
  spec.channels = 2;
  spec.t = 3 * model.config.patch_len;
  spec.sampling_rate = 64.0;
  spec.class_freqs = {4.0, 11.0};
  spec.noise_std = 0.2;
  spec.seed = seed;
  auto corpus = wf::generate_synthetic<S>(spec);
  for (auto& rec : corpus.recordings) wf::zscore_channels(rec);
  std::vector<const wf::Recording<S>*> recs;
  for (const auto& rec : corpus.recordings) recs.push_back(&rec);
  auto recipe = wf::collate(recs, model.config.patch_len, model.config.patch_len,
                            model.config.c_max);
  recipe.masked = ratio > 0;
  recipe.mask_ratio = ratio;
  recipe.mask_seed = seed * 31 + 7;
  return wf::build_token_batch(std::move(recipe), model.embed);
}

}  // namespace

TEST_CASE("reconstruction loss closed forms") {
  auto model = wf::build_encoder<double>(tiny_config(), 2);
  auto batch = masked_batch(model, 5);
  const double alpha = 0.1;
  const std::int64_t len = model.config.patch_len;

  auto perfect = wf::reconstruction_loss(batch.raw_patches, batch.raw_patches, batch, alpha);
  CHECK(perfect.values.total == 0.0);
  CHECK(perfect.values.l_masked == 0.0);
  CHECK(perfect.values.l_visible == 0.0);

  const double delta = 0.5;
  TensorD shifted = batch.raw_patches.detach();
  for (auto& v : shifted.data()) v += delta;
  auto offset = wf::reconstruction_loss(batch.raw_patches, shifted, batch, alpha);
  const double want = static_cast<double>(len) * delta * delta;
  CHECK(std::abs(offset.values.l_masked - want) < 1e-10);
  CHECK(std::abs(offset.values.l_visible - want) < 1e-10);
  CHECK(std::abs(offset.values.total - want * (1.0 + alpha)) < 1e-10);
  // total is structurally l_masked + alpha * l_visible.
  CHECK(offset.values.total == offset.values.l_masked + alpha * offset.values.l_visible);
}

TEST_CASE("single masked patch hand case") {
  // C=1, Np=2, ratio 0.5 -> exactly one masked patch.
  EncoderConfig cfg = tiny_config();
  cfg.c_max = 1;
  auto model = wf::build_encoder<double>(cfg, 3);
  wf::Recording<double> rec;
  rec.t = 2 * cfg.patch_len;
  rec.c = 1;
  rec.sampling_rate = 16.0;
  rec.samples.assign(static_cast<std::size_t>(rec.t), 0.0);
  auto base = wf::embed(wf::patch(rec, cfg.patch_len, cfg.patch_len), model.embed, {0});
  auto batch = wf::mask_tokens(base, model.embed, 0.5, 1);
  REQUIRE(batch.mask_set[0].size() == 1);
  const auto [mc, mi] = batch.mask_set[0][0];
  const std::int64_t vi = 1 - mi;  // the other patch is visible

  TensorD pred = TensorD::zeros(batch.raw_patches.shape());
  pred.data()[mi * cfg.patch_len + 0] = 3.0;  // one entry of the masked patch
  pred.data()[vi * cfg.patch_len + 2] = 2.0;  // one entry of the visible patch
  auto loss = wf::reconstruction_loss(batch.raw_patches, pred, batch, 0.1);
  CHECK(loss.values.l_masked == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(loss.values.l_visible == doctest::Approx(4.0).epsilon(1e-12));
  (void)mc;
}

TEST_CASE("loss is a set function of the mask") {
  auto model = wf::build_encoder<double>(tiny_config(), 8);
  auto batch = masked_batch(model, 21);
  TensorD pred = batch.raw_patches.detach();
  for (auto& v : pred.data()) v += 0.1;
  auto a = wf::reconstruction_loss(batch.raw_patches, pred, batch, 0.1);
  auto shuffled = batch;
  std::reverse(shuffled.mask_set[0].begin(), shuffled.mask_set[0].end());
  std::reverse(shuffled.mask_set[1].begin(), shuffled.mask_set[1].end());
  auto b = wf::reconstruction_loss(batch.raw_patches, pred, shuffled, 0.1);
  CHECK(a.values.total == b.values.total);
}

TEST_CASE("visible-position gradient is alpha times the masked-position form") {
  auto model = wf::build_encoder<double>(tiny_config(), 4);
  auto batch = masked_batch(model, 6);
  const double alpha = 0.1;
  const std::int64_t b = batch.batch, ct = batch.c_total, np = batch.np;
  const std::int64_t len = model.config.patch_len;

  TensorD pred = TensorD::zeros(batch.raw_patches.shape(), /*requires_grad=*/true);
  wf::Rng rng(9);
  oracle::fill_uniform(pred, rng);
  auto loss = wf::reconstruction_loss(batch.raw_patches, pred, batch, alpha);
  wf::backward(loss.total);

  std::vector<std::set<std::int64_t>> masked_flat(static_cast<std::size_t>(b));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (const auto& [c, i] : batch.mask_set[static_cast<std::size_t>(bi)]) {
      masked_flat[static_cast<std::size_t>(bi)].insert(c * np + i);
    }
  }
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const std::int64_t n_masked =
        static_cast<std::int64_t>(batch.mask_set[static_cast<std::size_t>(bi)].size());
    const std::int64_t n_visible = batch.real_channels(bi) * np - n_masked;
    REQUIRE(n_masked == n_visible);  // ratio 0.5 over an even position count
    for (std::int64_t ci = 0; ci < ct; ++ci) {
      for (std::int64_t i = 0; i < np; ++i) {
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t at = ((bi * ct + ci) * np + i) * len + l;
          const double diff = pred.data()[at] - batch.raw_patches.data()[at];
          const double if_masked = 2.0 * diff / static_cast<double>(b * n_masked);
          const double got = pred.grad()[at];
          if (!batch.is_real(bi, ci)) {
            CHECK(got == 0.0);  // pads contribute exactly zero
          } else if (masked_flat[static_cast<std::size_t>(bi)].count(ci * np + i)) {
            CHECK(got == doctest::Approx(if_masked).epsilon(1e-10));
          } else {
            CHECK(got == doctest::Approx(alpha * if_masked).epsilon(1e-10));
          }
        }
      }
    }
  }
}

TEST_CASE("empty mask set is a contract error") {
  auto model = wf::build_encoder<double>(tiny_config(), 2);
  auto batch = masked_batch(model, 5, /*ratio=*/0.0);
  CHECK_THROWS_AS(wf::reconstruction_loss(batch.raw_patches, batch.raw_patches, batch, 0.1),
                  wf::ContractError);
}

TEST_CASE("full-model gradients match finite differences") {
  // The acceptance suite runs all four mechanisms; one here keeps unit tests
  // quick.
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_e = 4;
  cfg.mlp_dim = 8;
  cfg.patch_len = 6;
  cfg.c_max = 3;
  cfg.np_max = 4;
  auto model = wf::build_encoder<double>(cfg, 7);
  const auto probe = masked_batch(model, 13);

  auto loss_value = [&]() {
    wf::NoGradGuard guard;
    auto batch = wf::build_token_batch(probe.recipe, model.embed);
    auto pred = wf::reconstruct_patches(model, wf::encoder_forward(model, batch));
    return wf::reconstruction_loss(batch.raw_patches, pred, batch, 0.1).values.total;
  };
  auto batch = wf::build_token_batch(probe.recipe, model.embed);
  auto pred = wf::reconstruct_patches(model, wf::encoder_forward(model, batch));
  auto loss = wf::reconstruction_loss(batch.raw_patches, pred, batch, 0.1);
  wf::backward(loss.total);

  std::vector<TensorD*> leaves;
  for (auto& [name, t] : model.named_parameters()) {
    t->grad();
    leaves.push_back(t);
  }
  CHECK(oracle::max_grad_error(leaves, loss_value) < 1e-4);
}

TEST_CASE("lr schedule hits the pinned anchor points") {
  const std::int64_t total = 1000, warmup = 30;
  CHECK(wf::cosine_warmup_lr(0, total, warmup, 1.25e-3, 2.5e-7) == 0.0);
  CHECK(wf::cosine_warmup_lr(warmup, total, warmup, 1.25e-3, 2.5e-7) ==
        doctest::Approx(1.25e-3).epsilon(1e-12));
  CHECK(wf::cosine_warmup_lr(total, total, warmup, 1.25e-3, 2.5e-7) ==
        doctest::Approx(2.5e-7).epsilon(1e-12));
  // Monotone decrease after warmup.
  double prev = wf::cosine_warmup_lr(warmup, total, warmup, 1.25e-3, 2.5e-7);
  for (std::int64_t s = warmup + 1; s <= total; s += 97) {
    const double lr = wf::cosine_warmup_lr(s, total, warmup, 1.25e-3, 2.5e-7);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("adamw decays weights and descends on a quadratic") {
  // Zero-gradient parameter still shrinks under decoupled decay.
  auto p = TensorD::from({2}, {1.0, -2.0}, true);
  p.grad();  // zero gradient
  wf::AdamW<double> opt({&p}, 0.9, 0.999, 0.1);
  opt.step(0.5);
  CHECK(p.data()[0] == doctest::Approx(1.0 - 0.5 * 0.1 * 1.0));
  CHECK(p.data()[1] == doctest::Approx(-2.0 + 0.5 * 0.1 * 2.0));

  // Adam on f(x) = x^2 from x=3 reaches near zero.
  auto x = TensorD::from({1}, {3.0}, true);
  wf::AdamW<double> opt2({&x}, 0.9, 0.999, 0.0);
  for (int i = 0; i < 400; ++i) {
    x.zero_grad();
    auto loss = wf::sum_all(wf::mul(x, x));
    wf::backward(loss);
    opt2.step(0.05);
  }
  CHECK(std::abs(x.data()[0]) < 0.05);
}

TEST_CASE("gradient clipping rescales to the max norm") {
  auto p = TensorD::from({2}, {0.0, 0.0}, true);
  auto g = p.grad();
  g[0] = 3.0;
  g[1] = 4.0;
  const double norm = wf::clip_grad_norm<double>({&p}, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(0.6));
  CHECK(p.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("one small step decreases loss on the same batch") {
  auto model = wf::build_encoder<double>(tiny_config(), 31);
  auto batch = masked_batch(model, 17);
  PretrainConfig cfg;
  auto eval_loss = [&]() {
    wf::NoGradGuard guard;
    auto fresh = wf::build_token_batch(batch.recipe, model.embed);
    auto pred = wf::reconstruct_patches(model, wf::encoder_forward(model, fresh));
    return wf::reconstruction_loss(fresh.raw_patches, pred, fresh, cfg.alpha).values.total;
  };
  const double before = eval_loss();
  std::vector<TensorD*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  wf::AdamW<double> opt(params, cfg.beta1, cfg.beta2, cfg.weight_decay);
  auto fresh = wf::build_token_batch(batch.recipe, model.embed);
  wf::pretrain_step(model, opt, fresh, 1e-4, cfg, 0);
  const double after = eval_loss();
  CHECK(after < before);
}

TEST_CASE("same seed gives bit-identical first-step losses") {
  auto run = [&]() {
    auto model = wf::build_encoder<float>(tiny_config(), 55);
    auto batch = masked_batch(model, 23);
    std::vector<wf::TensorF*> params;
    for (auto& [name, t] : model.named_parameters()) params.push_back(t);
    PretrainConfig cfg;
    wf::AdamW<float> opt(params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    return wf::pretrain_step(model, opt, batch, 1e-3, cfg, 0);
  };
  const auto a = run();
  const auto b = run();
  CHECK(std::memcmp(&a, &b, sizeof(a)) == 0);
}

TEST_CASE("non-finite loss aborts with the batch index") {
  auto model = wf::build_encoder<float>(tiny_config(), 3);
  auto batch = masked_batch<float>(model, 29);
  batch.raw_patches.data()[0] = std::numeric_limits<float>::infinity();
  std::vector<wf::TensorF*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  PretrainConfig cfg;
  wf::AdamW<float> opt(params, cfg.beta1, cfg.beta2, cfg.weight_decay);
  CHECK_THROWS_WITH_AS(wf::pretrain_step(model, opt, batch, 1e-3, cfg, 42),
                       doctest::Contains("batch 42"), wf::ContractError);
}

TEST_CASE("pretrain_run writes metrics, checkpoints, and resumes") {
  wf::SynthSpec spec;
  spec.n_examples = 24;
  spec.channels = 2;
  spec.t = 64;
  spec.sampling_rate = 64.0;
  spec.class_freqs = {4.0, 12.0};
  spec.noise_std = 0.3;
  spec.seed = 77;
  auto corpus = wf::generate_synthetic<float>(spec);
  for (auto& rec : corpus.recordings) wf::zscore_channels(rec);

  EncoderConfig cfg = tiny_config();
  cfg.patch_len = 16;
  cfg.np_max = 4;
  PretrainConfig pcfg;
  pcfg.batch_size = 8;
  pcfg.warmup_epochs = 1;
  pcfg.max_epochs = 4;  // schedule horizon; the run stops early at epoch 3
  pcfg.stop_epoch = 3;
  pcfg.seed = 5;

  const std::string dir = "test_pretrain_run_out";
  auto model = wf::build_encoder<float>(cfg, 1);
  auto result = wf::pretrain_run(model, corpus.recordings, pcfg, dir, "", "# seed = 5\n");
  CHECK(result.epoch_mean_total.size() == 3);
  CHECK(std::filesystem::exists(result.best_checkpoint));
  CHECK(std::filesystem::exists(result.final_checkpoint));

  std::ifstream metrics(result.metrics_path);
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "# seed = 5");  // reproducibility stanza on top
  std::getline(metrics, line);
  CHECK(line == "epoch,step,l_masked,l_visible,total,lr");
  int rows = 0;
  while (std::getline(metrics, line)) ++rows;
  CHECK(rows == 9);  // 3 epochs x 3 steps, log_interval 1

  // Resuming from the final checkpoint continues at the stored epoch and
  // reproduces the uninterrupted run.
  PretrainConfig longer = pcfg;
  longer.stop_epoch = 4;
  auto resumed = wf::build_encoder<float>(cfg, 1);
  auto cont = wf::pretrain_run(resumed, corpus.recordings, longer, dir + "_resume",
                               result.final_checkpoint);
  CHECK(cont.epoch_mean_total.size() == 1);  // only epoch 3 remained

  auto straight = wf::build_encoder<float>(cfg, 1);
  auto full = wf::pretrain_run(straight, corpus.recordings, longer, dir + "_full");
  CHECK(std::abs(full.epoch_mean_total.back() - cont.epoch_mean_total.back()) < 1e-6);

  // A resume into a fresh directory still opens with the header.
  std::ifstream rmetrics(cont.metrics_path);
  std::getline(rmetrics, line);
  CHECK(line == "epoch,step,l_masked,l_visible,total,lr");

  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir + "_resume");
  std::filesystem::remove_all(dir + "_full");
}
