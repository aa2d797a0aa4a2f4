#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pgrd/graph.hpp"
#include "pgrd/rng.hpp"
#include "pgrd/tensor.hpp"

#include <cmath>
#include <limits>

using namespace pgrd;

TEST_CASE("tensor basics") {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t[4] == 5.0);
  CHECK(numel(t.shape()) == 6);

  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({0, 3}), std::invalid_argument);

  auto f = t.cast<float>();
  CHECK(f[4] == 5.0f);
}

TEST_CASE("relu on [-1, 0, 2]") {
  Graph<double> g;
  const int x = g.input(Tensor<double>::from({3}, {-1, 0, 2}));
  const int y = g.apply(Op::kRelu, {x});
  CHECK(g.value(y)[0] == 0.0);
  CHECK(g.value(y)[1] == 0.0);
  CHECK(g.value(y)[2] == 2.0);
}

TEST_CASE("conv2d identity kernel reproduces the image") {
  Rng rng(7, "conv-identity");
  Graph<double> g;
  auto img = rng.normal_tensor<double>({2, 3, 5, 4});
  // identity: Co == Ci, kernel center 1 on the matching channel
  Tensor<double> wid({3, 3, 3, 3});
  for (int co = 0; co < 3; ++co) wid.at4(co, co, 1, 1) = 1.0;
  const int x = g.input(img);
  const int wi = g.input(wid);
  const int bi = g.input(Tensor<double>::zeros({3}));
  const int y = g.apply(Op::kConv3x3, {x, wi, bi});
  CHECK(max_abs_diff(g.value(y), img) == 0.0);
}

TEST_CASE("softmax-channels on zero logits is uniform") {
  Graph<double> g;
  const int x = g.input(Tensor<double>::zeros({1, 2, 1, 1}));
  const int y = g.apply(Op::kSoftmaxChannels, {x});
  CHECK(g.value(y)[0] == doctest::Approx(0.5));
  CHECK(g.value(y)[1] == doctest::Approx(0.5));
}

TEST_CASE("shape mismatch rejected with both shapes named") {
  Graph<double> g;
  const int a = g.input(Tensor<double>::zeros({2, 3}));
  const int b = g.input(Tensor<double>::zeros({3, 2}));
  try {
    g.apply(Op::kAdd, {a, b});
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("non-finite input rejected") {
  Graph<double> g;
  auto bad = Tensor<double>::zeros({2});
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(g.input(bad), std::invalid_argument);
}

TEST_CASE("backward: mse(x, x) has zero gradient") {
  Graph<double> g;
  Rng rng(3, "mse-self");
  auto xv = rng.normal_tensor<double>({4, 4});
  xv.set_requires_grad(true);
  const int x = g.input(xv);
  const int loss = g.apply(Op::kMse, {x, x});
  CHECK(g.value(loss)[0] == 0.0);
  auto grads = g.backward(loss);
  CHECK(grads.at(x).array().abs().maxCoeff() == 0.0);
}

TEST_CASE("backward: sum of 2x via matmul gives gradient 2 everywhere") {
  Graph<double> g;
  Rng rng(4, "sum-2x");
  auto xv = rng.normal_tensor<double>({5, 1});
  xv.set_requires_grad(true);
  const int x = g.input(xv);
  const int doubled = g.apply(Op::kScale, {x}, 2.0);
  const int ones = g.input(Tensor<double>::full({1, 5}, 1.0));
  const int loss = g.apply(Op::kMatmul, {ones, doubled});
  auto grads = g.backward(loss);
  for (std::int64_t i = 0; i < 5; ++i) CHECK(grads.at(x)[i] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph<double> g;
  auto xv = Tensor<double>::zeros({2, 2});
  xv.set_requires_grad(true);
  const int x = g.input(xv);
  const int y = g.apply(Op::kRelu, {x});
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("gradients accumulate over fan-out") {
  Graph<double> g;
  auto xv = Tensor<double>::from({1, 1}, {3.0});
  xv.set_requires_grad(true);
  const int x = g.input(xv);
  const int y = g.apply(Op::kAdd, {x, x});  // y = 2x
  const int ones = g.input(Tensor<double>::full({1, 1}, 1.0));
  const int loss = g.apply(Op::kMatmul, {ones, y});
  auto grads = g.backward(loss);
  CHECK(grads.at(x)[0] == doctest::Approx(2.0));
}

TEST_CASE("leaves without requires_grad receive no gradient") {
  Graph<double> g;
  auto a = Tensor<double>::from({1, 1}, {1.0});
  a.set_requires_grad(true);
  const int x = g.input(a);
  const int c = g.input(Tensor<double>::from({1, 1}, {5.0}));
  const int y = g.apply(Op::kAdd, {x, c});
  const int loss = g.apply(Op::kMse, {y, c});
  auto grads = g.backward(loss);
  CHECK(grads.count(x) == 1);
  CHECK(grads.count(c) == 0);
}

TEST_CASE("apply is deterministic bit-for-bit") {
  Rng rng(11, "determinism");
  auto x = rng.normal_tensor<float>({2, 4, 8, 8});
  auto w = rng.normal_tensor<float>({3, 4, 3, 3});
  auto b = rng.normal_tensor<float>({3});
  Graph<float> g1, g2;
  const int y1 = g1.apply(Op::kConv3x3, {g1.input(x), g1.input(w), g1.input(b)});
  const int y2 = g2.apply(Op::kConv3x3, {g2.input(x), g2.input(w), g2.input(b)});
  CHECK(g1.value(y1).bit_equal(g2.value(y2)));
}

TEST_CASE("cross-entropy nonnegative, zero only in the margin limit") {
  Graph<double> g;
  Rng rng(5, "ce-prop");
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = rng.normal_tensor<double>({1, 3, 2, 2});
    auto target = Tensor<double>::zeros({1, 3, 2, 2});
    for (int p = 0; p < 4; ++p) {
      const int cls = static_cast<int>(rng.uniform_int(3));
      target[cls * 4 + p] = 1.0;
    }
    const int loss =
        g.apply(Op::kCrossEntropyWithLogits, {g.input(logits), g.input(target)});
    CHECK(g.value(loss)[0] > 0.0);
  }
  // large true-class margin drives CE toward zero
  auto logits = Tensor<double>::zeros({1, 2, 1, 1});
  logits[0] = 50.0;
  auto target = Tensor<double>::from({1, 2, 1, 1}, {1.0, 0.0});
  const int loss =
      g.apply(Op::kCrossEntropyWithLogits, {g.input(logits), g.input(target)});
  CHECK(g.value(loss)[0] < 1e-20);
  CHECK(g.value(loss)[0] >= 0.0);
}

TEST_CASE("cross-entropy rejects grad-requiring target") {
  Graph<double> g;
  auto y = Tensor<double>::from({1, 2, 1, 1}, {1.0, 0.0});
  y.set_requires_grad(true);
  const int logits = g.input(Tensor<double>::zeros({1, 2, 1, 1}));
  const int target = g.input(y);
  CHECK_THROWS_AS(g.apply(Op::kCrossEntropyWithLogits, {logits, target}),
                  std::invalid_argument);
}

TEST_CASE("concat-channels layout and backward slicing") {
  Graph<double> g;
  auto a = Tensor<double>::from({1, 1, 1, 2}, {1, 2});
  auto b = Tensor<double>::from({1, 2, 1, 2}, {3, 4, 5, 6});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  const int ai = g.input(a), bi = g.input(b);
  const int y = g.apply(Op::kConcatChannels, {ai, bi});
  CHECK(g.value(y).shape() == Shape{1, 3, 1, 2});
  for (int i = 0; i < 6; ++i) CHECK(g.value(y)[i] == doctest::Approx(i + 1));

  // loss = mse(concat, 0) -> grad = 2*val/6
  const int zeros = g.input(Tensor<double>::zeros({1, 3, 1, 2}));
  const int loss = g.apply(Op::kMse, {y, zeros});
  auto grads = g.backward(loss);
  CHECK(grads.at(ai)[0] == doctest::Approx(2.0 / 6.0));
  CHECK(grads.at(bi)[3] == doctest::Approx(12.0 / 6.0));
}

TEST_CASE("avgpool and upsample shapes + odd-size rejection") {
  Graph<double> g;
  const int x = g.input(Tensor<double>::full({1, 1, 4, 4}, 2.0));
  const int p = g.apply(Op::kAvgPool2x, {x});
  CHECK(g.value(p).shape() == Shape{1, 1, 2, 2});
  CHECK(g.value(p)[0] == doctest::Approx(2.0));
  const int u = g.apply(Op::kUpsample2x, {p});
  CHECK(g.value(u).shape() == Shape{1, 1, 4, 4});

  const int odd = g.input(Tensor<double>::zeros({1, 1, 3, 3}));
  CHECK_THROWS_AS(g.apply(Op::kAvgPool2x, {odd}), std::invalid_argument);
}

TEST_CASE("value handles compose expressions") {
  Graph<float> g;
  Rng rng(9, "values");
  auto x = constant(g, rng.normal_tensor<float>({1, 2, 4, 4}));
  auto w = param(g, rng.normal_tensor<float>({3, 2, 3, 3}));
  auto b = param(g, Tensor<float>::zeros({3}));
  auto y = silu(conv3x3(x, w, b));
  CHECK(y.tensor().shape() == Shape{1, 3, 4, 4});
}
