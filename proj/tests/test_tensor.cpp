#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "oracles.hpp"
#include "wf/rng.hpp"
#include "wf/tensor.hpp"

using wf::Shape;
using wf::Tensor;
using wf::TensorD;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("matmul identity and hand cases") {
  auto eye = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto m = TensorD::from({2, 2}, {2, 3, 5, 7});
  auto r = wf::matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  auto a = TensorD::from({1, 2}, {1, 2});
  auto b = TensorD::from({2, 1}, {3, 4});
  CHECK(wf::matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle on shapes up to 8x8x8") {
  wf::Rng rng(42);
  for (std::int64_t m : {1, 3, 5, 8}) {
    for (std::int64_t k : {1, 4, 8}) {
      for (std::int64_t n : {2, 7, 8}) {
        auto a = TensorD::zeros({m, k});
        auto b = TensorD::zeros({k, n});
        oracle::fill_uniform(a, rng);
        oracle::fill_uniform(b, rng);
        const auto got = wf::matmul(a, b);
        const auto want = oracle::matmul3({a.data().begin(), a.data().end()},
                                          {b.data().begin(), b.data().end()}, m, k, n);
        for (std::int64_t i = 0; i < m * n; ++i) {
          CHECK(std::abs(got.data()[i] - want[static_cast<std::size_t>(i)]) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("matmul_nt equals matmul with transposed operand") {
  wf::Rng rng(7);
  auto a = TensorD::zeros({3, 5});
  auto bt = TensorD::zeros({4, 5});
  oracle::fill_uniform(a, rng);
  oracle::fill_uniform(bt, rng);
  const auto via_nt = wf::matmul_nt(a, bt);
  const auto via_t = wf::matmul(a, wf::transpose_last2(bt));
  for (int i = 0; i < 12; ++i) {
    CHECK(via_nt.data()[i] == doctest::Approx(via_t.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("matmul batched with shared rhs") {
  wf::Rng rng(3);
  auto a = TensorD::zeros({2, 3, 4, 5});
  auto b = TensorD::zeros({5, 6});
  oracle::fill_uniform(a, rng);
  oracle::fill_uniform(b, rng);
  const auto c = wf::matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 4, 6});
  // Check one slice against the oracle.
  std::vector<double> slice(a.data().begin() + 1 * 3 * 20 + 2 * 20,
                            a.data().begin() + 1 * 3 * 20 + 3 * 20);
  const auto want = oracle::matmul3(slice, {b.data().begin(), b.data().end()}, 4, 5, 6);
  for (int i = 0; i < 24; ++i) {
    CHECK(c.data()[(1 * 3 + 2) * 24 + i] == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-14));
  }
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = TensorD::zeros({2, 3});
  auto b = TensorD::zeros({4, 2});
  CHECK_THROWS_WITH_AS(wf::matmul(a, b),
                       doctest::Contains("[2,3]"), wf::ShapeError);
  CHECK_THROWS_WITH_AS(wf::matmul(a, b),
                       doctest::Contains("[4,2]"), wf::ShapeError);
}

TEST_CASE("softmax hand cases") {
  auto x = TensorD::from({2}, {0, 0});
  auto y = wf::softmax(x, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  auto masked = wf::softmax(TensorD::from({2}, {-kInf, 0}), 0);
  CHECK(masked.data()[0] == 0.0);  // exact zero
  CHECK(masked.data()[1] == 1.0);

  // Max subtraction keeps huge logits finite.
  auto big = wf::softmax(TensorD::from({2}, {1000, 1001}), 0);
  const double e = std::exp(1.0);
  CHECK(big.data()[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
  CHECK(big.data()[1] == doctest::Approx(e / (1.0 + e)).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and all-masked rows are zero") {
  wf::Rng rng(11);
  auto x = TensorD::zeros({4, 7});
  oracle::fill_uniform(x, rng, -5, 5);
  // Mask one full row and a few entries.
  for (int j = 0; j < 7; ++j) x.data()[2 * 7 + j] = -kInf;
  x.data()[3] = -kInf;
  auto y = wf::softmax(x, 1);
  for (int r = 0; r < 4; ++r) {
    double sum = 0;
    for (int j = 0; j < 7; ++j) sum += y.data()[r * 7 + j];
    if (r == 2) {
      CHECK(sum == 0.0);
    } else {
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  CHECK(y.data()[3] == 0.0);

  // Against the row oracle.
  for (int r = 0; r < 4; ++r) {
    std::vector<double> row(x.data().begin() + r * 7, x.data().begin() + (r + 1) * 7);
    const auto want = oracle::softmax_row(row);
    for (int j = 0; j < 7; ++j) {
      CHECK(y.data()[r * 7 + j] == doctest::Approx(want[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax along a middle axis") {
  wf::Rng rng(13);
  auto x = TensorD::zeros({2, 3, 4});
  oracle::fill_uniform(x, rng);
  auto y = wf::softmax(x, 1);
  for (int b = 0; b < 2; ++b) {
    for (int j = 0; j < 4; ++j) {
      double sum = 0;
      for (int i = 0; i < 3; ++i) sum += y.data()[(b * 3 + i) * 4 + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm hand cases and oracle") {
  auto gain = TensorD::from({3}, {1, 1, 1});
  auto bias = TensorD::from({3}, {0.5, -0.25, 2});
  auto constant = TensorD::from({1, 3}, {4, 4, 4});
  auto y = wf::layer_norm(constant, gain, bias, 1e-5);
  for (int j = 0; j < 3; ++j) {
    CHECK(y.data()[j] == doctest::Approx(bias.data()[j]).epsilon(1e-12));
  }

  auto pm = wf::layer_norm(TensorD::from({1, 2}, {1, -1}), TensorD::from({2}, {1, 1}),
                           TensorD::from({2}, {0, 0}), 1e-12);
  CHECK(pm.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(pm.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));

  wf::Rng rng(5);
  auto x = TensorD::zeros({1, 9});
  auto g9 = TensorD::zeros({9});
  auto b9 = TensorD::zeros({9});
  oracle::fill_uniform(x, rng);
  oracle::fill_uniform(g9, rng);
  oracle::fill_uniform(b9, rng);
  auto got = wf::layer_norm(x, g9, b9, 1e-5);
  const auto want = oracle::layer_norm_row({x.data().begin(), x.data().end()},
                                           {g9.data().begin(), g9.data().end()},
                                           {b9.data().begin(), b9.data().end()}, 1e-5);
  for (int j = 0; j < 9; ++j) {
    CHECK(std::abs(got.data()[j] - want[static_cast<std::size_t>(j)]) < 1e-10);
  }
}

TEST_CASE("backward hand cases") {
  auto x = TensorD::from({3}, {1, 2, 3}, /*requires_grad=*/true);
  auto loss = wf::sum_all(x);
  wf::backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  auto x2 = TensorD::from({2}, {1, 2}, true);
  auto loss2 = wf::sum_all(wf::mul(x2, x2));
  wf::backward(loss2);
  CHECK(x2.grad()[0] == doctest::Approx(2.0));
  CHECK(x2.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward contract errors") {
  auto x = TensorD::from({2}, {1, 2}, true);
  auto vec = wf::mul(x, x);
  CHECK_THROWS_AS(wf::backward(vec), wf::ContractError);  // non-scalar

  auto loss = wf::sum_all(vec);
  wf::backward(loss);
  CHECK_THROWS_AS(wf::backward(loss), wf::ContractError);  // second replay
}

TEST_CASE("no-grad guard suppresses graph recording") {
  auto x = TensorD::from({2}, {1, 2}, true);
  wf::NoGradGuard guard;
  auto y = wf::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences validate every primitive") {
  wf::Rng rng(999);

  auto check = [&](const char* name, std::vector<TensorD*> leaves,
                   const std::function<TensorD()>& fwd) {
    auto loss_fn = [&]() {
      wf::NoGradGuard guard;
      return fwd().item();
    };
    for (auto* leaf : leaves) leaf->zero_grad();
    auto loss = fwd();
    wf::backward(loss);
    const double err = oracle::max_grad_error(leaves, loss_fn);
    INFO(name);
    CHECK(err < 1e-4);
  };

  // Weights to make the scalarized loss sensitive to every output element.
  auto w34 = TensorD::zeros({3, 4});
  auto w24 = TensorD::zeros({2, 4});
  auto w234 = TensorD::zeros({2, 3, 4});
  oracle::fill_uniform(w34, rng);
  oracle::fill_uniform(w24, rng);
  oracle::fill_uniform(w234, rng);

  auto a = TensorD::zeros({3, 4}, true);
  auto b = TensorD::zeros({3, 4}, true);
  auto brow = TensorD::zeros({4}, true);
  oracle::fill_uniform(a, rng);
  oracle::fill_uniform(b, rng);
  oracle::fill_uniform(brow, rng);

  check("add", {&a, &b}, [&] { return wf::sum_all(wf::mul(wf::add(a, b), w34)); });
  check("add broadcast", {&a, &brow}, [&] { return wf::sum_all(wf::mul(wf::add(a, brow), w34)); });
  check("sub", {&a, &b}, [&] { return wf::sum_all(wf::mul(wf::sub(a, b), w34)); });
  check("mul", {&a, &b}, [&] { return wf::sum_all(wf::mul(wf::mul(a, b), w34)); });
  check("mul broadcast", {&a, &brow}, [&] { return wf::sum_all(wf::mul(wf::mul(a, brow), w34)); });
  check("scalar ops", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::add_scalar(wf::mul_scalar(a, 1.7), -0.3), w34));
  });

  auto ma = TensorD::zeros({3, 5}, true);
  auto mb = TensorD::zeros({5, 4}, true);
  auto mbt = TensorD::zeros({4, 5}, true);
  oracle::fill_uniform(ma, rng);
  oracle::fill_uniform(mb, rng);
  oracle::fill_uniform(mbt, rng);
  check("matmul", {&ma, &mb}, [&] { return wf::sum_all(wf::mul(wf::matmul(ma, mb), w34)); });
  check("matmul_nt", {&ma, &mbt}, [&] { return wf::sum_all(wf::mul(wf::matmul_nt(ma, mbt), w34)); });

  auto batched = TensorD::zeros({2, 3, 5}, true);
  auto shared = TensorD::zeros({5, 4}, true);
  oracle::fill_uniform(batched, rng);
  oracle::fill_uniform(shared, rng);
  check("matmul shared rhs", {&batched, &shared},
        [&] { return wf::sum_all(wf::mul(wf::matmul(batched, shared), w234)); });

  check("reshape", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::reshape(a, {2, 6}), wf::reshape(w34, {2, 6})));
  });
  check("permute", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::permute(a, {1, 0}), wf::transpose_last2(w34)));
  });
  check("narrow", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::narrow(a, 0, 1, 2), w24));
  });
  check("gather_rows", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::gather_rows(a, {2, 0}), w24));
  });
  check("concat", {&a, &b}, [&] {
    auto c = wf::concat(std::vector<TensorD>{a, b}, 0);
    return wf::sum_all(wf::mul(wf::narrow(c, 0, 2, 2), w24));
  });
  check("broadcast_to", {&brow}, [&] {
    return wf::sum_all(wf::mul(wf::broadcast_to(wf::reshape(brow, {1, 4}), {3, 4}), w34));
  });
  check("reduce_sum", {&a}, [&] {
    return wf::sum_all(wf::mul(wf::reduce_sum(a, {0}, false), brow.detach()));
  });
  check("softmax", {&a}, [&] { return wf::sum_all(wf::mul(wf::softmax(a, 1), w34)); });
  check("log_softmax", {&a}, [&] { return wf::sum_all(wf::mul(wf::log_softmax(a, 1), w34)); });

  auto g4 = TensorD::zeros({4}, true);
  auto b4 = TensorD::zeros({4}, true);
  oracle::fill_uniform(g4, rng, 0.5, 1.5);
  oracle::fill_uniform(b4, rng);
  check("layer_norm", {&a, &g4, &b4}, [&] {
    return wf::sum_all(wf::mul(wf::layer_norm(a, g4, b4, 1e-5), w34));
  });
  check("gelu", {&a}, [&] { return wf::sum_all(wf::mul(wf::gelu(a), w34)); });
}

TEST_CASE("softmax gradient flows zero through masked entries") {
  auto x = TensorD::from({3}, {0.3, -kInf, 0.9}, true);
  auto w = TensorD::from({3}, {1.0, 2.0, -1.0});
  auto loss = wf::sum_all(wf::mul(wf::softmax(x, 0), w));
  wf::backward(loss);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("forward is bit-identical across repeated runs") {
  wf::Rng rng(2024);
  auto a = TensorD::zeros({6, 6});
  auto b = TensorD::zeros({6, 6});
  oracle::fill_uniform(a, rng);
  oracle::fill_uniform(b, rng);
  auto first = wf::softmax(wf::matmul(a, b), 1);
  auto second = wf::softmax(wf::matmul(a, b), 1);
  CHECK(std::memcmp(first.data().data(), second.data().data(), sizeof(double) * 36) == 0);
}

TEST_CASE("alloc meter tracks tensor buffers") {
  wf::AllocMeter meter;
  {
    wf::AllocMeterScope scope(meter);
    auto t = TensorD::zeros({100});
    CHECK(meter.cur_bytes == 800);
    auto u = TensorD::zeros({10});
    CHECK(meter.peak_bytes == 880);
  }
  CHECK(meter.cur_bytes == 0);
  CHECK(meter.peak_bytes == 880);
}

TEST_CASE("rng determinism and uniformity basics") {
  wf::Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  wf::Rng c(124);
  CHECK(wf::Rng(123).next_u64() != c.next_u64());

  wf::Rng r(55);
  auto picks = wf::sample_without_replacement(r, 10, 4);
  CHECK(picks.size() == 4);
  for (std::size_t i = 1; i < picks.size(); ++i) CHECK(picks[i - 1] < picks[i]);
}
