#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "wf/tokenizer.hpp"

using wf::EmbeddingParams;
using wf::Recording;
using wf::TensorD;

namespace {

Recording<double> make_recording(wf::Rng& rng, std::int64_t t, std::int64_t c) {
  Recording<double> rec;
  rec.t = t;
  rec.c = c;
  rec.sampling_rate = 256.0;
  rec.samples.resize(static_cast<std::size_t>(t * c));
  for (auto& v : rec.samples) v = 2.0 * rng.uniform() - 1.0;
  return rec;
}

std::vector<std::int64_t> iota_offsets(std::int64_t c) {
  std::vector<std::int64_t> offs(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) offs[static_cast<std::size_t>(i)] = i;
  return offs;
}

}  // namespace

TEST_CASE("patch count formula") {
  wf::Rng rng(1);
  CHECK(wf::patch(make_recording(rng, 1280, 3), 64, 64).np() == 20);
  CHECK(wf::patch(make_recording(rng, 64, 2), 64, 64).np() == 1);
  auto grid = wf::patch(make_recording(rng, 100, 2), 64, 64);
  CHECK(grid.np() == 1);  // samples 64..99 dropped
  CHECK_THROWS_AS(wf::patch(make_recording(rng, 10, 1), 64, 64), wf::ContractError);
}

TEST_CASE("patch formula matches direct slicing count (property)") {
  wf::Rng rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t t = 1 + static_cast<std::int64_t>(rng.below(300));
    const std::int64_t l = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t)));
    const std::int64_t s = 1 + static_cast<std::int64_t>(rng.below(32));
    auto rec = make_recording(rng, t, 2);
    auto grid = wf::patch(rec, l, s);
    std::int64_t direct = 0;
    for (std::int64_t start = 0; start + l <= t; start += s) ++direct;
    CHECK(grid.np() == direct);
    // Patches are contiguous slices of their channel.
    const std::int64_t last = grid.np() - 1;
    for (std::int64_t j = 0; j < l; ++j) {
      CHECK(grid.patches.data()[(last * 2 + 1) * l + j] == rec.at(last * s + j, 1));
    }
  }
}

TEST_CASE("embed zero cases and loop oracle") {
  wf::Rng rng(3);
  const std::int64_t de = 4, l = 3, c = 2, np = 2;
  auto params = EmbeddingParams<double>::init(de, l, 8, 8, rng);

  // Zero patches + zero pos/chan -> zero token.
  auto zero_params = EmbeddingParams<double>::init(de, l, 8, 8, rng);
  for (auto t : {&zero_params.w_pos, &zero_params.w_chan}) {
    for (auto& v : t->data()) v = 0.0;
  }
  auto rec = make_recording(rng, np * l, c);
  for (auto& v : rec.samples) v = 0.0;
  auto grid = wf::patch(rec, l, l);
  auto zb = wf::embed(grid, zero_params, iota_offsets(c));
  for (const double v : zb.tokens.data()) CHECK(v == 0.0);

  // Zero patch, nonzero embeddings -> token = W_pos[i] + W_chan[c].
  auto posonly = wf::embed(grid, params, iota_offsets(c));
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t i = 0; i < np; ++i) {
      for (std::int64_t d = 0; d < de; ++d) {
        const double want = params.w_pos.data()[i * de + d] + params.w_chan.data()[ci * de + d];
        CHECK(posonly.tokens.data()[(ci * np + i) * de + d] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }

  // Random patch: explicit matrix-vector product plus additions.
  auto rec2 = make_recording(rng, np * l, c);
  auto grid2 = wf::patch(rec2, l, l);
  auto batch = wf::embed(grid2, params, iota_offsets(c));
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t i = 0; i < np; ++i) {
      for (std::int64_t d = 0; d < de; ++d) {
        double want = params.w_pos.data()[i * de + d] + params.w_chan.data()[ci * de + d];
        for (std::int64_t j = 0; j < l; ++j) {
          want += params.w_proj.data()[d * l + j] * grid2.patches.data()[(i * c + ci) * l + j];
        }
        CHECK(batch.tokens.data()[(ci * np + i) * de + d] == doctest::Approx(want).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("embed is linear in the patch content") {
  wf::Rng rng(4);
  const std::int64_t de = 5, l = 4, c = 2;
  auto params = EmbeddingParams<double>::init(de, l, 8, 8, rng);
  auto rec = make_recording(rng, 3 * l, c);
  auto zeroed = rec;
  for (auto& v : zeroed.samples) v = 0.0;
  auto scaled = rec;
  const double a = -2.5;
  for (auto& v : scaled.samples) v *= a;

  auto e1 = wf::embed(wf::patch(rec, l, l), params, iota_offsets(c));
  auto e0 = wf::embed(wf::patch(zeroed, l, l), params, iota_offsets(c));
  auto ea = wf::embed(wf::patch(scaled, l, l), params, iota_offsets(c));
  for (std::int64_t i = 0; i < e1.tokens.numel(); ++i) {
    const double lhs = ea.tokens.data()[i] - e0.tokens.data()[i];
    const double rhs = a * (e1.tokens.data()[i] - e0.tokens.data()[i]);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("embed is injective for full-rank tall projections") {
  wf::Rng rng(5);
  const std::int64_t de = 8, l = 4, c = 1;
  auto params = EmbeddingParams<double>::init(de, l, 8, 8, rng);
  auto r1 = make_recording(rng, 2 * l, c);
  auto r2 = make_recording(rng, 2 * l, c);
  auto e1 = wf::embed(wf::patch(r1, l, l), params, iota_offsets(c));
  auto e2 = wf::embed(wf::patch(r2, l, l), params, iota_offsets(c));
  double dist = 0.0;
  for (std::int64_t d = 0; d < de; ++d) dist += std::abs(e1.tokens.data()[d] - e2.tokens.data()[d]);
  CHECK(dist > 1e-8);
}

TEST_CASE("embed rejects out-of-range channel rows") {
  wf::Rng rng(6);
  auto params = EmbeddingParams<double>::init(4, 4, 8, 4, rng);
  auto rec = make_recording(rng, 8, 2);
  CHECK_THROWS_AS(wf::embed(wf::patch(rec, 4, 4), params, {0, 4}), wf::RangeError);
}

TEST_CASE("pad_channels fills with pad token plus positional embeddings") {
  wf::Rng rng(7);
  const std::int64_t de = 4, l = 4, c = 2, c_max = 6;
  auto params = EmbeddingParams<double>::init(de, l, 8, c_max, rng);
  auto rec = make_recording(rng, 3 * l, c);
  auto base = wf::embed(wf::patch(rec, l, l), params, iota_offsets(c));

  auto same = wf::pad_channels(base, params, c);
  CHECK(same.c_total == c);
  for (std::size_t i = 0; i < same.pad_mask.size(); ++i) CHECK(same.pad_mask[i] == 1);

  // Padding 2 -> 64 leaves 62 pad channels flagged.
  auto params64 = EmbeddingParams<double>::init(de, l, 8, 64, rng);
  auto base64 = wf::embed(wf::patch(rec, l, l), params64, iota_offsets(c));
  auto wide = wf::pad_channels(base64, params64, 64);
  CHECK(wide.c_total == 64);
  CHECK(wide.real_channels(0) == 2);
  for (std::int64_t ci = 2; ci < 64; ++ci) CHECK_FALSE(wide.is_real(0, ci));

  auto padded = wf::pad_channels(base, params, c_max);
  CHECK(padded.c_total == c_max);
  CHECK(padded.real_channels(0) == c);
  const std::int64_t np = padded.np;
  // Real channels identical to the unpadded embedding.
  for (std::int64_t i = 0; i < c * np * de; ++i) {
    CHECK(padded.tokens.data()[i] == base.tokens.data()[i]);
  }
  // Pad channels carry pad_token + W_pos[i].
  for (std::int64_t ci = c; ci < c_max; ++ci) {
    CHECK_FALSE(padded.is_real(0, ci));
    for (std::int64_t i = 0; i < np; ++i) {
      for (std::int64_t d = 0; d < de; ++d) {
        const double want = params.pad_token.data()[d] + params.w_pos.data()[i * de + d];
        CHECK(padded.tokens.data()[(ci * np + i) * de + d] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("mask_tokens counts, determinism, and embedding rule") {
  wf::Rng rng(8);
  const std::int64_t de = 4, l = 4;
  auto params = EmbeddingParams<double>::init(de, l, 24, 24, rng);

  // round(0.5 * 23 * 20) = 230.
  auto rec = make_recording(rng, 20 * l, 23);
  auto batch = wf::embed(wf::patch(rec, l, l), params, iota_offsets(23));
  auto masked = wf::mask_tokens(batch, params, 0.5, 99);
  CHECK(masked.mask_set[0].size() == 230);

  // ratio 0: no masking, tokens unchanged.
  auto none = wf::mask_tokens(batch, params, 0.0, 99);
  CHECK(none.mask_set[0].empty());
  for (std::int64_t i = 0; i < batch.tokens.numel(); ++i) {
    CHECK(none.tokens.data()[i] == batch.tokens.data()[i]);
  }

  // Deterministic for (seed, shape); different seeds differ.
  auto again = wf::mask_tokens(batch, params, 0.5, 99);
  CHECK(again.mask_set == masked.mask_set);
  auto other = wf::mask_tokens(batch, params, 0.5, 100);
  CHECK(other.mask_set != masked.mask_set);

  // Masked token = mask_token + W_pos[i] + W_chan[c]; visible unchanged.
  const std::int64_t np = masked.np;
  std::set<std::pair<std::int64_t, std::int64_t>> mset(masked.mask_set[0].begin(),
                                                       masked.mask_set[0].end());
  for (std::int64_t ci = 0; ci < 23; ++ci) {
    for (std::int64_t i = 0; i < np; ++i) {
      for (std::int64_t d = 0; d < de; ++d) {
        const double got = masked.tokens.data()[(ci * np + i) * de + d];
        if (mset.count({ci, i})) {
          const double want = params.mask_token.data()[d] + params.w_pos.data()[i * de + d] +
                              params.w_chan.data()[ci * de + d];
          CHECK(got == doctest::Approx(want).epsilon(1e-12));
        } else {
          CHECK(got == batch.tokens.data()[(ci * np + i) * de + d]);
        }
      }
    }
  }

  CHECK_THROWS_AS(wf::mask_tokens(batch, params, 1.0, 1), wf::ContractError);
  CHECK_THROWS_AS(wf::mask_tokens(batch, params, -0.1, 1), wf::ContractError);
}

TEST_CASE("mask count uses round-half-to-even") {
  CHECK(wf::mask_count(0.5, 1, 5) == 2);  // 2.5 -> 2
  CHECK(wf::mask_count(0.5, 1, 7) == 4);  // 3.5 -> 4
  CHECK(wf::mask_count(0.5, 23, 20) == 230);
  CHECK(wf::mask_count(0.0, 4, 5) == 0);
}

TEST_CASE("pads never enter the mask set") {
  wf::Rng rng(9);
  const std::int64_t de = 4, l = 4, c = 3, c_max = 8;
  auto params = EmbeddingParams<double>::init(de, l, 8, c_max, rng);
  auto rec = make_recording(rng, 4 * l, c);
  auto padded = wf::pad_channels(wf::embed(wf::patch(rec, l, l), params, iota_offsets(c)),
                                 params, c_max);
  auto masked = wf::mask_tokens(padded, params, 0.75, 3);
  CHECK(masked.mask_set[0].size() == wf::mask_count(0.75, c, masked.np));
  for (const auto& [ci, i] : masked.mask_set[0]) {
    CHECK(ci < c);
  }
}

TEST_CASE("mask sampling is uniform across positions") {
  wf::Rng rng(10);
  const std::int64_t de = 2, l = 2, c = 4, np = 5;
  auto params = EmbeddingParams<double>::init(de, l, 8, 8, rng);
  auto rec = make_recording(rng, np * l, c);
  auto batch = wf::embed(wf::patch(rec, l, l), params, iota_offsets(c));

  std::vector<int> hits(static_cast<std::size_t>(c * np), 0);
  const int trials = 10000;
  for (int s = 0; s < trials; ++s) {
    auto masked = wf::mask_tokens(batch, params, 0.5, static_cast<std::uint64_t>(s));
    for (const auto& [ci, i] : masked.mask_set[0]) ++hits[static_cast<std::size_t>(ci * np + i)];
  }
  for (const int h : hits) {
    const double freq = static_cast<double>(h) / trials;
    CHECK(freq > 0.45);
    CHECK(freq < 0.55);
  }
}
