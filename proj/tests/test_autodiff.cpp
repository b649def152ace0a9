#include <cmath>
#include <numeric>
#include <stdexcept>

#include "doctest.h"
#include "dmha/autodiff.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dmha;
using testing::random_tensor;

TEST_CASE("matmul hand cases") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(ad::matmul(ad::constant(eye), ad::constant(a)).value() == a);
  const Tensor r = ad::matmul(ad::constant(a), ad::constant(Tensor::matrix({{0}, {1}}))).value();
  CHECK(r == Tensor::matrix({{2}, {4}}));
  CHECK_THROWS_AS(ad::matmul(ad::constant(a), ad::constant(Tensor({3, 1}))), std::invalid_argument);
}

TEST_CASE("matmul gradients against central differences") {
  const Tensor b = random_tensor({4, 2}, 2);
  const double err = ad::grad_check(
      [&](const ad::Var& x) { return ad::sum(ad::matmul(x, ad::constant(b))); }, random_tensor({3, 4}, 1));
  CHECK(err <= 1e-6);
}

TEST_CASE("conv2d_same padding arithmetic") {
  Tensor x({1, 4, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  Tensor ident({1, 1, 3, 3}, 0.0);
  ident[4] = 1.0;
  CHECK(ad::conv2d_same(ad::constant(x), ad::constant(ident)).value() == x);

  const Tensor ones = ad::conv2d_same(ad::constant(Tensor({1, 3, 3}, 1.0)),
                                      ad::constant(Tensor({1, 1, 3, 3}, 1.0)))
                          .value();
  CHECK(ones[4] == 9.0);
  CHECK(ones[0] == 4.0);
  CHECK(ones[1] == 6.0);

  CHECK_THROWS_AS(ad::conv2d_same(ad::constant(Tensor({2, 4, 4})), ad::constant(Tensor({1, 3, 3, 3}))),
                  std::invalid_argument);
}

TEST_CASE("conv2d_same matches the six-loop oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor({3, 7, 5}, seed);
    const Tensor w = random_tensor({4, 3, 3, 3}, seed + 100);
    const Tensor b = random_tensor({4}, seed + 200);
    const Tensor got = ad::conv2d_same(ad::constant(x), ad::constant(w), ad::constant(b)).value();
    CHECK(max_abs_diff(got, oracle::conv3x3(x, w, b)) <= 1e-12);
  }
}

TEST_CASE("maxpool2x2 values, floor and first-index ties") {
  const Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(ad::maxpool2x2(ad::constant(x)).value().values()[0] == 4.0);
  CHECK(ad::maxpool2x2(ad::constant(Tensor({1, 5, 5}))).shape() == Shape{1, 2, 2});
  CHECK_THROWS_AS(ad::maxpool2x2(ad::constant(Tensor({1, 1, 4}))), std::invalid_argument);

  ad::Var tied = ad::parameter(Tensor({1, 2, 2}, 7.0));
  ad::backward(ad::sum(ad::maxpool2x2(tied)));
  CHECK(tied.grad() == Tensor({1, 2, 2}, std::vector<double>{1, 0, 0, 0}));
}

TEST_CASE("maxpool2x2 gradient at untied points") {
  const double err = ad::grad_check(
      [](const ad::Var& x) { return ad::sum(ad::mul(ad::maxpool2x2(x), ad::maxpool2x2(x))); },
      random_tensor({1, 8, 8}, 3));
  CHECK(err <= 1e-6);
}

TEST_CASE("softmax values and shift invariance") {
  const Tensor u = ad::softmax(ad::constant(Tensor::vector({0, 0, 0})), 0).value();
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor s = ad::softmax(ad::constant(Tensor::vector({1, 2, 3})), 0).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - std::exp(i + 1.0) / z) <= 1e-15);

  Tensor logits = random_tensor({4, 6}, 9, 3.0);
  Tensor shifted = logits;
  for (double& v : shifted.values()) v += 123.25;
  for (std::size_t axis : {0u, 1u}) {
    const Tensor a = ad::softmax(ad::constant(logits), axis).value();
    const Tensor b = ad::softmax(ad::constant(shifted), axis).value();
    CHECK(max_abs_diff(a, b) <= 1e-12);
    const std::size_t outer = axis == 0 ? 6 : 4, inner = axis == 0 ? 4 : 6;
    for (std::size_t o = 0; o < outer; ++o) {
      double total = 0;
      for (std::size_t i = 0; i < inner; ++i) total += axis == 0 ? a.at(i, o) : a.at(o, i);
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("relu and elementwise basics") {
  const Tensor r = ad::relu(ad::constant(Tensor::vector({-1, 2}))).value();
  CHECK(r == Tensor::vector({0, 2}));
  const Tensor a = Tensor::vector({1, 2, 3});
  const Tensor b = Tensor::vector({4, 5, 6});
  CHECK(ad::add(ad::constant(a), ad::constant(b)).value() == Tensor::vector({5, 7, 9}));
  CHECK(ad::sub(ad::constant(a), ad::constant(b)).value() == Tensor::vector({-3, -3, -3}));
  CHECK(ad::scale(ad::constant(a), 2.0).value() == Tensor::vector({2, 4, 6}));
}

TEST_CASE("concat and slice are inverse") {
  const Tensor m = random_tensor({3, 5}, 4);
  for (std::size_t axis : {0u, 1u}) {
    const std::size_t n = m.dim(axis);
    const ad::Var x = ad::constant(m);
    std::vector<ad::Var> parts{ad::slice(x, axis, 0, 2), ad::slice(x, axis, 2, n - 2)};
    CHECK(ad::concat(parts, axis).value() == m);
  }
}

TEST_CASE("batchnorm statistics") {
  ad::BatchNormStats stats{Tensor({2}, 0.0), Tensor({2}, 1.0)};
  const ad::Var gamma = ad::parameter(Tensor::vector({2.0, 0.5}));
  const ad::Var beta = ad::parameter(Tensor::vector({0.25, -1.0}));

  SUBCASE("constant features give beta") {
    const Tensor x = Tensor::matrix({{3, -2}, {3, -2}, {3, -2}});
    const Tensor y = ad::batchnorm(ad::constant(x), gamma, beta, stats, ad::BatchNormMode::kTrain).value();
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(y.at(r, 0) == 0.25);
      CHECK(y.at(r, 1) == -1.0);
    }
  }
  SUBCASE("running statistics use momentum 0.1 and the unbiased variance") {
    const Tensor x = Tensor::matrix({{1, 0}, {2, 0}, {6, 3}});
    (void)ad::batchnorm(ad::constant(x), gamma, beta, stats, ad::BatchNormMode::kTrain);
    const double mean0 = 3.0, var0 = (4.0 + 1.0 + 9.0) / 2.0;
    CHECK(stats.running_mean[0] == doctest::Approx(0.1 * mean0).epsilon(1e-14));
    CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * var0).epsilon(1e-14));
    CHECK(stats.running_var[1] == doctest::Approx(0.9 + 0.1 * 3.0).epsilon(1e-14));

    // Eval mode reads the running statistics and leaves them alone.
    const Tensor before = stats.running_mean;
    const Tensor y = ad::batchnorm(ad::constant(Tensor::matrix({{1, 1}})), gamma, beta, stats,
                                   ad::BatchNormMode::kEval)
                         .value();
    CHECK(stats.running_mean == before);
    const double expect = 2.0 * (1.0 - stats.running_mean[0]) / std::sqrt(stats.running_var[0] + 1e-5) + 0.25;
    CHECK(std::abs(y.at(0, 0) - expect) <= 1e-14);
  }
  SUBCASE("training mode rejects a single row") {
    CHECK_THROWS_AS(ad::batchnorm(ad::constant(Tensor({1, 2})), gamma, beta, stats, ad::BatchNormMode::kTrain),
                    std::invalid_argument);
  }
  SUBCASE("gradients") {
    ad::Var x = ad::parameter(random_tensor({5, 2}, 11));
    ad::Var g = ad::parameter(random_tensor({2}, 12));
    ad::Var b = ad::parameter(random_tensor({2}, 13));
    const Tensor proj = random_tensor({5, 2}, 14);
    std::vector<ad::Var> leaves{x, g, b};
    const double err = ad::grad_check_leaves(
        [&] {
          ad::BatchNormStats scratch{Tensor({2}, 0.0), Tensor({2}, 1.0)};
          return ad::sum(ad::mul(ad::batchnorm(x, g, b, scratch, ad::BatchNormMode::kTrain), ad::constant(proj)));
        },
        leaves);
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("backward seeds") {
  ad::Var x = ad::parameter(random_tensor({2, 3}, 5));
  ad::backward(ad::sum(x));
  CHECK(x.grad() == Tensor({2, 3}, 1.0));

  ad::Var y = ad::parameter(random_tensor({4}, 6));
  ad::backward(ad::sum(ad::mul(y, y)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.grad()[i] == 2.0 * y.value()[i]);

  CHECK_THROWS_AS(ad::backward(ad::mul(y, y)), std::invalid_argument);
}

TEST_CASE("grad_check on a linear function is exact to rounding") {
  const Tensor w = random_tensor({6}, 21);
  const double err = ad::grad_check([&](const ad::Var& x) { return ad::sum(ad::mul(x, ad::constant(w))); },
                                    random_tensor({6}, 22));
  CHECK(err <= 1e-10);
}

TEST_CASE("l2 normalization") {
  const Tensor m = Tensor::matrix({{3, 4}, {0, 0}});
  const Tensor r = ad::l2_normalize_rows(ad::constant(m)).value();
  CHECK(r.at(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(r.at(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(r.at(1, 0) == 0.0);
  const Tensor c = ad::l2_normalize_cols(ad::constant(ad::transpose(ad::constant(m)).value())).value();
  CHECK(c.at(0, 0) == r.at(0, 0));
  CHECK(c.at(1, 0) == r.at(0, 1));
}

TEST_CASE("flatten_channels is channel-major") {
  Tensor x({2, 3, 2});
  std::iota(x.data(), x.data() + x.size(), 0.0);
  const Tensor f = ad::flatten_channels(ad::constant(x)).value();
  REQUIRE(f.shape() == Shape{3, 4});
  // Row t holds [x[0,t,:], x[1,t,:]].
  CHECK(f.at(1, 0) == x[0 * 6 + 1 * 2 + 0]);
  CHECK(f.at(1, 1) == x[0 * 6 + 1 * 2 + 1]);
  CHECK(f.at(1, 2) == x[1 * 6 + 1 * 2 + 0]);
  CHECK(f.at(2, 3) == x[1 * 6 + 2 * 2 + 1]);
}

TEST_CASE("graph values stay finite") {
  ad::Var x = ad::parameter(random_tensor({1, 6, 6}, 30, 50.0));
  const ad::Var w = ad::constant(random_tensor({2, 1, 3, 3}, 31));
  const ad::Var y = ad::softmax(ad::flatten_channels(ad::maxpool2x2(ad::relu(ad::conv2d_same(x, w)))), 1);
  ad::backward(ad::sum(ad::mul(y, y)));
  CHECK(y.value().all_finite());
  CHECK(x.grad().all_finite());
}
