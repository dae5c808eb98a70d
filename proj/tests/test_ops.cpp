#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "vmrfa/ops.hpp"
#include "vmrfa/rng.hpp"

using namespace vmrfa;

namespace {

Tensor filled(Shape shape, std::vector<float> values) {
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

TEST_CASE("conv2d with a 1x1 identity kernel is the identity") {
  Graph g;
  Var x = g.value(Tensor(Shape{1, 1, 3, 3}, 2.0f));
  Var w = g.value(filled({1, 1, 1, 1}, {1.0f}));
  Var y = conv2d(x, w, std::nullopt, HW{1, 1}, HW{0, 0});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y.value()[i] == 2.0f);
}

TEST_CASE("conv2d shape arithmetic at backbone scale") {
  Graph g(false);
  Rng rng(1);
  Tensor x(Shape{1, 512, 48, 16});
  x.fill_normal(rng, 0.0f, 1.0f);
  Tensor w(Shape{128, 512, 3, 3});
  w.fill_normal(rng, 0.0f, 0.02f);
  Var y = conv2d(g.value(x), g.value(w), std::nullopt, HW{1, 1}, HW{1, 1});
  REQUIRE(y.shape() == Shape{1, 128, 48, 16});
}

TEST_CASE("conv2d known 2x2 case") {
  Graph g;
  // input [[1,2],[3,4]], kernel [[1,0],[0,1]] -> single output 1+4
  Var x = g.value(filled({1, 1, 2, 2}, {1, 2, 3, 4}));
  Var w = g.value(filled({1, 1, 2, 2}, {1, 0, 0, 1}));
  Var y = conv2d(x, w, std::nullopt, HW{1, 1}, HW{0, 0});
  REQUIRE(y.numel() == 1);
  REQUIRE(y.value()[0] == 5.0f);
}

TEST_CASE("conv2d rejects channel mismatches naming the axes") {
  Graph g;
  Var x = g.value(Tensor(Shape{1, 3, 4, 4}));
  Var w = g.value(Tensor(Shape{2, 4, 3, 3}));
  REQUIRE_THROWS_AS(conv2d(x, w, std::nullopt, HW{1, 1}, HW{1, 1}), DimensionError);
  REQUIRE_THROWS_WITH(conv2d(x, w, std::nullopt, HW{1, 1}, HW{1, 1}),
                      Catch::Matchers::ContainsSubstring("channel axis 1"));
}

TEST_CASE("conv2d bias adds per output channel") {
  Graph g;
  Var x = g.value(Tensor(Shape{1, 1, 2, 2}, 1.0f));
  Var w = g.value(filled({2, 1, 1, 1}, {1.0f, -1.0f}));
  Var b = g.value(filled({2}, {10.0f, 20.0f}));
  Var y = conv2d(x, w, b, HW{1, 1}, HW{0, 0});
  REQUIRE(y.value().at(0, 0, 0, 0) == 11.0f);
  REQUIRE(y.value().at(0, 1, 1, 1) == 19.0f);
}

TEST_CASE("avg pool of a 2x2 window") {
  Graph g;
  Var x = g.value(filled({1, 1, 2, 2}, {1, 2, 3, 4}));
  Var y = pool2d(x, PoolMode::avg, HW{2, 2}, HW{2, 2});
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  REQUIRE(y.value()[0] == 2.5f);
}

TEST_CASE("global average pooling collapses the spatial extent") {
  Graph g(false);
  Var x = g.value(Tensor(Shape{1, 1024, 24, 8}, 0.25f));
  Var y = pool2d(x, PoolMode::global_avg);
  REQUIRE(y.shape() == Shape{1, 1024, 1, 1});
  REQUIRE(y.value()[0] == Catch::Approx(0.25).margin(1e-7));
}

TEST_CASE("max pool ties route the gradient to the first index in row-major order") {
  Graph g;
  Var x = g.value(filled({1, 1, 2, 2}, {1, 5, 5, 2}), /*needs_grad=*/true);
  Var y = pool2d(x, PoolMode::max, HW{2, 2}, HW{2, 2});
  REQUIRE(y.value()[0] == 5.0f);
  g.backward(sum_all(y));
  const Tensor& grad = g.node(x.id).grad;
  REQUIRE(grad[0] == 0.0f);
  REQUIRE(grad[1] == 1.0f);  // first 5 in row-major order
  REQUIRE(grad[2] == 0.0f);
  REQUIRE(grad[3] == 0.0f);
}

TEST_CASE("pool2d rejects windows that do not tile the input") {
  Graph g;
  Var x = g.value(Tensor(Shape{1, 1, 5, 4}));
  REQUIRE_THROWS_AS(pool2d(x, PoolMode::avg, HW{2, 2}, HW{2, 2}), DimensionError);
}

TEST_CASE("affine identity and hand-computed case") {
  Graph g;
  Var x = g.value(filled({1, 2}, {3, 4}));
  Var eye = g.value(filled({2, 2}, {1, 0, 0, 1}));
  Var zero = g.value(Tensor(Shape{2}));
  Var y = affine(x, eye, zero);
  REQUIRE(y.value()[0] == 3.0f);
  REQUIRE(y.value()[1] == 4.0f);

  Var x2 = g.value(filled({1, 2}, {2, 3}));
  Var w = g.value(filled({2, 2}, {1, 1, 1, -1}));
  Var b = g.value(filled({2}, {0, 1}));
  Var y2 = affine(x2, w, b);
  REQUIRE(y2.value()[0] == 5.0f);
  REQUIRE(y2.value()[1] == 0.0f);

  Var bad = g.value(Tensor(Shape{1, 3}));
  REQUIRE_THROWS_AS(affine(bad, w, b), DimensionError);
}

TEST_CASE("batch norm normalizes exactly on a two-point channel") {
  const float eps = 1e-5f;
  Graph g;
  Var x = g.value(filled({2, 1}, {-1.0f, 1.0f}));
  Var gamma = g.value(Tensor(Shape{1}, 1.0f));
  Var beta = g.value(Tensor(Shape{1}, 0.0f));
  Tensor rm(Shape{1}), rv(Shape{1}, 1.0f);
  Var y = batch_norm(x, gamma, beta, rm, rv, BnMode::train, 0.1f, eps);
  const float expected = 1.0f / std::sqrt(1.0f + eps);
  REQUIRE(y.value()[0] == Catch::Approx(-expected).margin(1e-7));
  REQUIRE(y.value()[1] == Catch::Approx(expected).margin(1e-7));

  // affine transform of the normalized values
  Graph g2;
  Var x2 = g2.value(filled({2, 1}, {-1.0f, 1.0f}));
  Var gamma2 = g2.value(Tensor(Shape{1}, 2.0f));
  Var beta2 = g2.value(Tensor(Shape{1}, 3.0f));
  Tensor rm2(Shape{1}), rv2(Shape{1}, 1.0f);
  Var y2 = batch_norm(x2, gamma2, beta2, rm2, rv2, BnMode::train, 0.1f, eps);
  REQUIRE(y2.value()[0] == Catch::Approx(3.0f - 2.0f * expected).margin(1e-6));
  REQUIRE(y2.value()[1] == Catch::Approx(3.0f + 2.0f * expected).margin(1e-6));
}

TEST_CASE("batch norm train statistics match beta and gamma") {
  Rng rng(7);
  Tensor x(Shape{8, 4, 2, 2});
  x.fill_normal(rng, 1.5f, 2.0f);
  Tensor gamma_t(Shape{4});
  gamma_t.fill_normal(rng, 1.0f, 0.3f);
  Tensor beta_t(Shape{4});
  beta_t.fill_normal(rng, 0.0f, 0.5f);

  Graph g;
  Tensor rm(Shape{4}), rv(Shape{4}, 1.0f);
  Var y = batch_norm(g.value(x), g.value(gamma_t), g.value(beta_t), rm, rv,
                     BnMode::train);
  const Tensor& out = y.value();
  const std::int64_t per_channel = 8 * 2 * 2;
  for (int c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    double in_mean = 0.0, in_var = 0.0;
    for (int n = 0; n < 8; ++n) {
      for (int s = 0; s < 4; ++s) {
        mean += out.at(n, c, s / 2, s % 2);
        in_mean += x.at(n, c, s / 2, s % 2);
      }
    }
    mean /= static_cast<double>(per_channel);
    in_mean /= static_cast<double>(per_channel);
    for (int n = 0; n < 8; ++n) {
      for (int s = 0; s < 4; ++s) {
        var += std::pow(out.at(n, c, s / 2, s % 2) - mean, 2);
        in_var += std::pow(x.at(n, c, s / 2, s % 2) - in_mean, 2);
      }
    }
    var /= static_cast<double>(per_channel);
    in_var /= static_cast<double>(per_channel);
    const double expected_var =
        static_cast<double>(gamma_t[c]) * gamma_t[c] * in_var / (in_var + 1e-5);
    REQUIRE(mean == Catch::Approx(beta_t[c]).margin(1e-5));
    REQUIRE(var == Catch::Approx(expected_var).margin(1e-3));
  }
}

TEST_CASE("batch norm rejects degenerate train batches") {
  Graph g;
  Var x = g.value(Tensor(Shape{1, 3}));
  Var gamma = g.value(Tensor(Shape{3}, 1.0f));
  Var beta = g.value(Tensor(Shape{3}));
  Tensor rm(Shape{3}), rv(Shape{3}, 1.0f);
  REQUIRE_THROWS_AS(batch_norm(x, gamma, beta, rm, rv, BnMode::train), ContractError);
  REQUIRE_NOTHROW(batch_norm(x, gamma, beta, rm, rv, BnMode::eval));
}

TEST_CASE("batch norm eval uses running statistics") {
  Graph g;
  Var x = g.value(filled({1, 1}, {3.0f}));
  Var gamma = g.value(Tensor(Shape{1}, 1.0f));
  Var beta = g.value(Tensor(Shape{1}, 0.0f));
  Tensor rm(Shape{1}, 1.0f), rv(Shape{1}, 4.0f);
  Var y = batch_norm(x, gamma, beta, rm, rv, BnMode::eval);
  REQUIRE(y.value()[0] == Catch::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("tanh plus one is exactly 1 at the origin") {
  Graph g;
  Var x = g.value(Tensor(Shape{3}));
  Var mask = add_scalar(tanh_op(x), 1.0f);
  for (std::int64_t i = 0; i < mask.numel(); ++i) REQUIRE(mask.value()[i] == 1.0f);
}

TEST_CASE("l2_normalize matches the 3-4-5 triangle") {
  Graph g;
  Var x = g.value(filled({1, 2}, {3, 4}));
  Var y = l2_normalize(x);
  REQUIRE(y.value()[0] == Catch::Approx(0.6).margin(1e-6));
  REQUIRE(y.value()[1] == Catch::Approx(0.8).margin(1e-6));
}

TEST_CASE("l2_normalize of a zero vector divides by the documented epsilon") {
  Graph g;
  Var y = l2_normalize(g.value(Tensor(Shape{1, 4})));
  for (std::int64_t i = 0; i < 4; ++i) REQUIRE(y.value()[i] == 0.0f);
}

TEST_CASE("log_softmax is stabilized against overflow") {
  Graph g;
  Var x = g.value(filled({1, 2}, {1000.0f, 1000.0f}));
  Var y = log_softmax(x);
  const float ln2 = std::log(2.0f);
  REQUIRE(y.value()[0] == Catch::Approx(-ln2).margin(1e-6));
  REQUIRE(y.value()[1] == Catch::Approx(-ln2).margin(1e-6));
  REQUIRE(y.value().all_finite());
}

TEST_CASE("backward of sum(w * w) doubles the values") {
  Graph g;
  Var w = g.value(filled({3}, {1, 2, 3}), /*needs_grad=*/true);
  Var root = sum_all(elementwise_mul(w, w));
  g.backward(root);
  const Tensor& grad = g.node(w.id).grad;
  REQUIRE(grad[0] == 2.0f);
  REQUIRE(grad[1] == 4.0f);
  REQUIRE(grad[2] == 6.0f);
}

TEST_CASE("backward on a constant root writes nothing and does not fail") {
  Graph g;
  Var c = g.value(Tensor::scalar(5.0f));
  REQUIRE_NOTHROW(g.backward(c));
}

TEST_CASE("backward rejects non-scalar roots and consumed tapes") {
  Graph g;
  Var w = g.value(Tensor(Shape{2}, 1.0f), true);
  Var y = elementwise_mul(w, w);
  REQUIRE_THROWS_AS(g.backward(y), ContractError);
  Var root = sum_all(y);
  g.backward(root);
  REQUIRE_THROWS_AS(g.backward(root), ContractError);
}

TEST_CASE("parameter gradients accumulate until zeroed") {
  Parameter p("w", Tensor(Shape{2}, std::vector<float>{1.0f, 2.0f}), LrGroup::head);
  for (int pass = 0; pass < 2; ++pass) {
    Graph g;
    Var w = g.param(p);
    g.backward(sum_all(elementwise_mul(w, w)));
  }
  REQUIRE(p.grad[0] == 4.0f);  // 2 * 2w
  REQUIRE(p.grad[1] == 8.0f);
  p.zero_grad();
  REQUIRE(p.grad[0] == 0.0f);
}

TEST_CASE("backward is linear in the loss combination") {
  Rng rng(11);
  Tensor xv(Shape{3, 4});
  xv.fill_normal(rng, 0.0f, 1.0f);
  Tensor wv(Shape{2, 4});
  wv.fill_normal(rng, 0.0f, 1.0f);

  auto grads_for = [&](float a, float b, bool combined) {
    Parameter w("w", wv, LrGroup::head);
    Graph g;
    Var wp = g.param(w);
    Var x = g.value(xv);
    Var y = affine(x, wp, g.value(Tensor(Shape{2})));
    Var l1 = sum_all(elementwise_mul(y, y));
    Var l2 = mean_all(tanh_op(y));
    if (combined) {
      g.backward(elementwise_add(scale(l1, a), scale(l2, b)));
      return w.grad;
    }
    g.backward(l1);
    Tensor g1 = w.grad;
    w.zero_grad();
    Graph g2;
    Var wp2 = g2.param(w);
    Var y2 = affine(g2.value(xv), wp2, g2.value(Tensor(Shape{2})));
    g2.backward(mean_all(tanh_op(y2)));
    Tensor g2v = w.grad;
    Tensor out(wv.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * g1[i] + b * g2v[i];
    return out;
  };

  const Tensor combined = grads_for(2.5f, -1.25f, true);
  const Tensor summed = grads_for(2.5f, -1.25f, false);
  for (std::int64_t i = 0; i < combined.numel(); ++i) {
    REQUIRE(combined[i] == Catch::Approx(summed[i]).margin(1e-5));
  }
}

TEST_CASE("identical inputs give bitwise-identical outputs and gradients") {
  Rng rng(3);
  Tensor x(Shape{2, 3, 6, 6});
  x.fill_normal(rng, 0.0f, 1.0f);
  Tensor w(Shape{4, 3, 3, 3});
  w.fill_normal(rng, 0.0f, 0.3f);

  auto run = [&]() {
    Graph g;
    Var xv = g.value(x, true);
    Var wv = g.value(w, true);
    Var y = conv2d(xv, wv, std::nullopt, HW{1, 1}, HW{1, 1});
    g.backward(sum_all(elementwise_mul(y, y)));
    return std::make_pair(g.node(y.id).value, g.node(wv.id).grad);
  };
  auto [y1, g1] = run();
  auto [y2, g2] = run();
  REQUIRE(std::memcmp(y1.data(), y2.data(), sizeof(float) * static_cast<std::size_t>(y1.numel())) == 0);
  REQUIRE(std::memcmp(g1.data(), g2.data(), sizeof(float) * static_cast<std::size_t>(g1.numel())) == 0);
}

TEST_CASE("shape algebra: conv and pool output shapes satisfy the closed forms") {
  Rng rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    const int kh = 1 + static_cast<int>(rng.uniform_int(4));
    const int kw = 1 + static_cast<int>(rng.uniform_int(4));
    const int sh = 1 + static_cast<int>(rng.uniform_int(3));
    const int sw = 1 + static_cast<int>(rng.uniform_int(3));
    const int ph = static_cast<int>(rng.uniform_int(3));
    const int pw = static_cast<int>(rng.uniform_int(3));
    const int h = kh + static_cast<int>(rng.uniform_int(8));
    const int w = kw + static_cast<int>(rng.uniform_int(8));
    Graph g(false);
    Var x = g.value(Tensor(Shape{1, 2, h, w}));
    Var kernel = g.value(Tensor(Shape{3, 2, kh, kw}));
    Var y = conv2d(x, kernel, std::nullopt, HW{sh, sw}, HW{ph, pw});
    REQUIRE(y.dim(2) == (h + 2 * ph - kh) / sh + 1);
    REQUIRE(y.dim(3) == (w + 2 * pw - kw) / sw + 1);
  }
  for (int trial = 0; trial < 60; ++trial) {
    const int wh = 1 + static_cast<int>(rng.uniform_int(3));
    const int ww = 1 + static_cast<int>(rng.uniform_int(3));
    const int th = 1 + static_cast<int>(rng.uniform_int(5));
    const int tw = 1 + static_cast<int>(rng.uniform_int(5));
    Graph g(false);
    Var x = g.value(Tensor(Shape{1, 1, wh * th, ww * tw}));
    Var y = pool2d(x, trial % 2 == 0 ? PoolMode::avg : PoolMode::max, HW{wh, ww},
                   HW{wh, ww});
    REQUIRE(y.dim(2) == th);
    REQUIRE(y.dim(3) == tw);
  }
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(5);
  Tensor x(Shape{2, 4, 6, 6});
  x.fill_normal(rng, 0.0f, 3.0f);
  Tensor w(Shape{4, 4, 3, 3});
  w.fill_normal(rng, 0.0f, 1.0f);
  Graph g(false);
  Var y = conv2d(g.value(x), g.value(w), std::nullopt, HW{1, 1}, HW{1, 1});
  Tensor rm(Shape{4}), rv(Shape{4}, 1.0f);
  y = batch_norm(y, g.value(Tensor(Shape{4}, 1.0f)), g.value(Tensor(Shape{4})), rm, rv,
                 BnMode::train);
  y = relu(y);
  y = pool2d(y, PoolMode::max, HW{2, 2}, HW{2, 2});
  y = l2_normalize(reshape(y, Shape{2, 4 * 3 * 3}));
  REQUIRE(y.value().all_finite());
}
