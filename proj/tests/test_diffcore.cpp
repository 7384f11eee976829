#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "semshift/ops.hpp"
#include "support/gradcheck.hpp"

using namespace semshift;
using semshift::testing::check_gradients;
using semshift::testing::random_tensor;
using Tensord = Tensor<double>;

namespace {

// Direct seven-loop cross-correlation, used as the conv2d oracle.
std::vector<double> conv_loop(const Tensord& in, const Tensord& k, const Tensord& b, std::size_t stride,
                              std::size_t pad) {
  const auto cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const auto cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(cout * ho * wo);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        double acc = b.values()[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += in.values()[(c * h + iy) * w + ix] * k.values()[((o * cin + c) * kh + i) * kw + j];
            }
        out[(o * ho + y) * wo + x] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 gives 9") {
  auto in = Tensord::full({1, 3, 3}, 1.0);
  auto k = Tensord::full({1, 1, 3, 3}, 1.0);
  auto b = Tensord::zeros({1});
  auto out = ops::conv2d(in, k, b, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d: identity 1x1 kernel reproduces input") {
  std::mt19937_64 rng(3);
  auto in = random_tensor({1, 5, 4}, rng, false);
  auto out = ops::conv2d(in, Tensord::full({1, 1, 1, 1}, 1.0), Tensord::zeros({1}));
  CHECK(out.shape() == in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) CHECK(out.values()[i] == in.values()[i]);
}

TEST_CASE("conv2d: matches explicit loop for strides and padding") {
  std::mt19937_64 rng(11);
  for (auto [stride, pad, kh] : {std::tuple{1u, 0u, 3u}, {2u, 1u, 3u}, {2u, 1u, 4u}, {1u, 1u, 1u}}) {
    auto in = random_tensor({3, 7, 6}, rng, false);
    auto k = random_tensor({4, 3, kh, kh}, rng, false);
    auto b = random_tensor({4}, rng, false);
    auto out = ops::conv2d(in, k, b, stride, pad);
    const auto expect = conv_loop(in, k, b, stride, pad);
    REQUIRE(out.numel() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(out.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d: output size arithmetic and shape errors") {
  auto in = Tensord::zeros({2, 9, 8});
  auto out = ops::conv2d(in, Tensord::zeros({3, 2, 3, 3}), Tensord::zeros({3}), 2, 1);
  CHECK(out.shape() == Shape{3, 5, 4});
  CHECK_THROWS_AS(ops::conv2d(in, Tensord::zeros({3, 4, 3, 3}), Tensord::zeros({3})), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(in, Tensord::zeros({3, 2, 3, 3}), Tensord::zeros({2})), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(Tensord::zeros({2, 2, 2}), Tensord::zeros({1, 2, 3, 3}), Tensord::zeros({1})),
                  ShapeError);
}

TEST_CASE("conv2d: kernel gradient of sum(output) matches finite differences") {
  std::mt19937_64 rng(5);
  auto in = random_tensor({2, 4, 4}, rng, false);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  backward(ops::sum(ops::conv2d(in, k, b, 1, 1)));
  const double h = 1e-5;
  auto kv = k.mutable_values();
  for (std::size_t i = 0; i < kv.size(); ++i) {
    const double saved = kv[i];
    kv[i] = saved + h;
    double plus, minus;
    {
      NoGradGuard ng;
      plus = ops::sum(ops::conv2d(in, k, b, 1, 1)).item();
      kv[i] = saved - h;
      minus = ops::sum(ops::conv2d(in, k, b, 1, 1)).item();
    }
    kv[i] = saved;
    const double numeric = (plus - minus) / (2 * h);
    CHECK(std::abs(k.grad()[i] - numeric) / std::max(std::abs(numeric), 1e-3) < 1e-4);
  }
}

TEST_CASE("linear: identity and hand dot product") {
  auto y = ops::linear(Tensord::from({2}, {1, 2}), Tensord::from({2, 2}, {1, 0, 0, 1}), Tensord::zeros({2}));
  CHECK(y.values()[0] == 1.0);
  CHECK(y.values()[1] == 2.0);
  auto z = ops::linear(Tensord::from({2}, {1, 1}), Tensord::from({1, 2}, {2, 3}), Tensord::from({1}, {5}));
  CHECK(z.item() == 10.0);
  CHECK_THROWS_AS(ops::linear(Tensord::zeros({3}), Tensord::zeros({2, 2}), Tensord::zeros({2})), ShapeError);
}

TEST_CASE("leaky_relu: values and subgradient convention") {
  auto x = Tensord::from({3}, {-1, 0, 2}, true);
  auto y = ops::leaky_relu(x, 0.2);
  CHECK(y.values()[0] == doctest::Approx(-0.2));
  CHECK(y.values()[1] == 0.0);
  CHECK(y.values()[2] == 2.0);
  backward(ops::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(0.2));
  CHECK(x.grad()[1] == doctest::Approx(0.2));  // slope at exactly zero
  CHECK(x.grad()[2] == 1.0);

  auto id = ops::leaky_relu(Tensord::from({3}, {0, 1.5, 3}), 0.0);
  CHECK(id.values()[1] == 1.5);
  CHECK(id.values()[2] == 3.0);
  CHECK_THROWS(ops::leaky_relu(x, 1.0));
}

TEST_CASE("softmax_channel: symmetry, closed form, normalization") {
  auto u = ops::softmax_channel(Tensord::full({4, 2, 3}, 0.7));
  for (double v : u.values()) CHECK(v == doctest::Approx(0.25));

  auto p = ops::softmax_channel(Tensord::from({2, 1}, {0.0, std::log(2.0)}));
  CHECK(std::abs(p.values()[0] - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(p.values()[1] - 2.0 / 3.0) < 1e-12);

  std::mt19937_64 rng(9);
  auto big = ops::softmax_channel(random_tensor({5, 6, 7}, rng, false, -30, 30));
  const std::size_t L = 42;
  for (std::size_t l = 0; l < L; ++l) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double v = big.values()[c * L + l];
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("bilinear_upsample: identity and align-corners midpoint") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 3, 4}, rng, false);
  auto same = ops::bilinear_upsample(x, 3, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.values()[i] == x.values()[i]);

  const double a = 0.3, b = -1.1;
  auto y = ops::bilinear_upsample(Tensord::from({1, 1, 2}, {a, b}), 1, 3);
  CHECK(y.values()[0] == doctest::Approx(a));
  CHECK(y.values()[1] == doctest::Approx((a + b) / 2));
  CHECK(y.values()[2] == doctest::Approx(b));

  CHECK_THROWS_AS(ops::bilinear_upsample(x, 0, 4), ShapeError);
  CHECK_THROWS_AS(ops::bilinear_upsample(x, 2, 4), ShapeError);
}

TEST_CASE("finite-difference gradient checks across ops") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    {
      auto in = random_tensor({2, 5, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
      auto r = check_gradients([](const auto& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); }, {in, k, b}, rng);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      auto x = random_tensor({6}, rng), w = random_tensor({4, 6}, rng), b = random_tensor({4}, rng);
      auto r = check_gradients([](const auto& v) { return ops::linear(v[0], v[1], v[2]); }, {x, w, b}, rng);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      auto x = random_tensor({3, 4, 4}, rng);
      auto r = check_gradients([](const auto& v) { return ops::leaky_relu(v[0], 0.2); }, {x}, rng);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      auto x = random_tensor({4, 3, 3}, rng, true, -3, 3);
      auto r = check_gradients([](const auto& v) { return ops::softmax_channel(v[0]); }, {x}, rng);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      auto x = random_tensor({2, 3, 4}, rng);
      auto r = check_gradients([](const auto& v) { return ops::bilinear_upsample(v[0], 7, 9); }, {x}, rng);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("backward: linearity, analytic derivative, accumulation") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 2}, rng);
  backward(ops::sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = random_tensor({5}, rng);
  backward(ops::scale(ops::sum(ops::mul(y, y)), 0.5));
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.grad()[i] == doctest::Approx(y.values()[i]));

  auto z = random_tensor({2, 3}, rng);
  auto loss = ops::sum(ops::scale(z, 3.0));
  backward(loss);
  std::vector<double> once(z.grad().begin(), z.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(z.grad()[i] == doctest::Approx(2 * once[i]));

  CHECK_THROWS(backward(ops::scale(z, 2.0)));
}

TEST_CASE("finite-difference gradient checks for loss-support ops") {
  std::mt19937_64 rng(77);
  const std::vector<std::int32_t> idx{0, -1, 2, 1, 1, -1};
  const std::vector<double> w{0.5, 0.0, 0.25, 1.0, -2.0, 0.1};
  for (int trial = 0; trial < 10; ++trial) {
    auto pos = random_tensor({3, 2, 3}, rng, true, 0.1, 2.0);
    CHECK(check_gradients([](const auto& v) { return ops::log_clamped(v[0], 1e-12); }, {pos}, rng).max_rel_error <
          1e-4);
    CHECK(check_gradients([&](const auto& v) { return ops::gather_channels<double>(v[0], idx); }, {pos}, rng)
              .max_rel_error < 1e-4);
    CHECK(check_gradients([&](const auto& v) { return ops::weighted_spatial_sum<double>(v[0], w); }, {pos}, rng)
              .max_rel_error < 1e-4);
    auto a = random_tensor({4, 2}, rng), b = random_tensor({4, 2}, rng);
    CHECK(check_gradients([](const auto& v) { return ops::mean(ops::add(v[0], v[1])); }, {a, b}, rng).max_rel_error <
          1e-4);
    CHECK(check_gradients([](const auto& v) { return ops::scale(ops::mul(v[0], v[1]), -1.5); }, {a, b}, rng)
              .max_rel_error < 1e-4);
  }
}

TEST_CASE("log_clamped: clamp keeps saturated inputs finite") {
  auto x = Tensord::from({2}, {0.0, 1.0}, true);
  auto y = ops::log_clamped(x, 1e-12);
  CHECK(y.values()[0] == doctest::Approx(std::log(1e-12)));
  CHECK(std::isfinite(y.values()[0]));
  backward(ops::sum(y));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("1x1 conv2d equals per-pixel linear") {
  std::mt19937_64 rng(31);
  auto f = random_tensor({6, 3, 4}, rng, false);
  auto w = random_tensor({5, 6}, rng, false);
  auto b = random_tensor({5}, rng, false);
  auto k = Tensord::from({5, 6, 1, 1}, std::vector<double>(w.values().begin(), w.values().end()));
  auto conv = ops::conv2d(f, k, b);
  for (std::size_t p = 0; p < 12; ++p) {
    std::vector<double> px(6);
    for (std::size_t c = 0; c < 6; ++c) px[c] = f.values()[c * 12 + p];
    auto lin = ops::linear(Tensord::from({6}, px), w, b);
    for (std::size_t o = 0; o < 5; ++o) CHECK(std::abs(conv.values()[o * 12 + p] - lin.values()[o]) < 1e-12);
  }
}

TEST_CASE("tape: each operation once, latest first") {
  auto x = Tensord::from({2}, {1, 2}, true);
  auto a = ops::scale(x, 2.0);
  auto b = ops::add(a, a);
  auto c = ops::add(b, a);
  auto loss = ops::sum(c);
  const auto tape = Tape<double>::record(loss);
  REQUIRE(tape.operations().size() == 4);
  CHECK(tape.operations()[0]->op_name == "sum");
  CHECK(tape.operations()[3]->op_name == "scale");
  for (std::size_t i = 1; i < tape.operations().size(); ++i) {
    CHECK(tape.operations()[i - 1]->sequence > tape.operations()[i]->sequence);
  }
  CHECK(tape.leaves().size() == 1);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("independent subgraphs accumulate in either order") {
  std::mt19937_64 rng(8);
  auto x1 = random_tensor({4}, rng), x2 = x1.detach();
  x2.set_requires_grad(true);
  auto f = [](const Tensord& x) { return ops::sum(ops::leaky_relu(ops::scale(x, 3.0), 0.2)); };
  auto g = [](const Tensord& x) { return ops::sum(ops::log_clamped(ops::softmax_channel(x), 1e-12)); };
  backward(f(x1));
  backward(g(x1));
  backward(g(x2));
  backward(f(x2));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x1.grad()[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("no-grad and freeze guards") {
  auto w = Tensord::from({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    auto y = ops::scale(w, 2.0);
    CHECK(y.is_leaf());
  }
  auto x = Tensord::from({2}, {3, 4}, true);
  {
    FreezeGuard<double> freeze({w});
    backward(ops::sum(ops::mul(w, x)));
  }
  CHECK(w.requires_grad());
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad()[0] == 1.0);

  // Freezing applies to the recorded graph, not to the time of backward.
  Tensord loss;
  {
    FreezeGuard<double> freeze({w});
    loss = ops::sum(ops::mul(w, x));
  }
  backward(loss);
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad()[1] == 4.0);  // accumulated onto the first pass
  backward(ops::sum(ops::mul(w, x)));
  CHECK(w.grad()[1] == 4.0);
}
