#include <doctest.h>

#include <cmath>

#include "histodistill/tensor.hpp"
#include "test_helpers.hpp"

using namespace histodistill;
using ad::Tensor;
using testutil::grad_check;
using testutil::max_rel_err;
using testutil::numeric_grad;
using testutil::random_vec;

TEST_CASE("elementwise values") {
  Tensor a = Tensor::from_data({2, 2}, {1.0, -2.0, 3.0, 0.5});
  Tensor b = Tensor::from_data({2, 2}, {0.5, 1.5, -1.0, 2.0});
  CHECK(ad::add(a, b).data() == std::vector<double>{1.5, -0.5, 2.0, 2.5});
  CHECK(ad::sub(a, b).data() == std::vector<double>{0.5, -3.5, 4.0, -1.5});
  CHECK(ad::mul(a, b).data() == std::vector<double>{0.5, -3.0, -3.0, 1.0});
  CHECK(ad::relu(a).data() == std::vector<double>{1.0, 0.0, 3.0, 0.5});
  CHECK(ad::abs(a).data() == std::vector<double>{1.0, 2.0, 3.0, 0.5});
  CHECK(ad::max_scalar(a, 0.75).data() == std::vector<double>{1.0, 0.75, 3.0, 0.75});
  CHECK(ad::clamp(a, -1.0, 1.0).data() == std::vector<double>{1.0, -1.0, 1.0, 0.5});
  CHECK(ad::exp(Tensor::scalar(0.0)).item() == doctest::Approx(1.0));
  CHECK(ad::log(Tensor::scalar(std::exp(1.0))).item() == doctest::Approx(1.0));
}

TEST_CASE("matmul and transpose values") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = ad::matmul(a, b);
  CHECK(c.shape() == ad::Shape{2, 2});
  CHECK(c.data() == std::vector<double>{58, 64, 139, 154});
  CHECK(ad::transpose2d(a).data() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("broadcast and reductions") {
  Tensor b = Tensor::from_data({1, 3}, {1, 2, 3});
  Tensor e = ad::broadcast_to(b, {2, 3});
  CHECK(e.data() == std::vector<double>{1, 2, 3, 1, 2, 3});

  Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(ad::sum_axes(x, {1, 2}, false).data() == std::vector<double>{10, 26});
  CHECK(ad::sum_axes(x, {0}, false).data() == std::vector<double>{6, 8, 10, 12});
  CHECK(ad::sum_all(x).item() == 36.0);
  CHECK(ad::mean_all(x).item() == doctest::Approx(4.5));
}

TEST_CASE("gather and scatter are adjoint index maps") {
  Tensor x = Tensor::from_data({4}, {10, 20, 30, 40});
  auto idx = std::make_shared<const std::vector<int64_t>>(std::vector<int64_t>{3, 3, 0, 1});
  Tensor g = ad::gather(x, idx, {4});
  CHECK(g.data() == std::vector<double>{40, 40, 10, 20});
  Tensor s = ad::scatter_add(g, idx, {4});
  CHECK(s.data() == std::vector<double>{10, 20, 0, 80});
}

TEST_CASE("first-order gradients match finite differences") {
  Rng rng(7);
  const ad::Shape shape{3, 4};
  auto x0 = random_vec(rng, 12, 0.2, 1.5);  // positive, away from kinks

  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::mul(x, x)); }, shape, x0) < 1e-7);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::exp(x)); }, shape, x0) < 1e-6);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::log(x)); }, shape, x0) < 1e-6);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::tanh(x)); }, shape, x0) < 1e-6);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::pow_scalar(x, 1.7)); }, shape, x0) <
        1e-6);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::relu(ad::add_scalar(x, -0.8))); },
                   shape, x0) < 1e-6);
  CHECK(grad_check([](const Tensor& x) { return ad::sum_all(ad::abs(ad::add_scalar(x, -0.8))); },
                   shape, x0) < 1e-6);
  CHECK(grad_check(
            [](const Tensor& x) {
              Tensor w = Tensor::from_data({4, 2}, {.1, .2, .3, .4, .5, .6, .7, .8});
              return ad::sum_all(ad::mul(ad::matmul(x, w), ad::matmul(x, w)));
            },
            shape, x0) < 1e-6);
  CHECK(grad_check(
            [](const Tensor& x) {
              return ad::sum_all(ad::mul(ad::broadcast_to(ad::sum_axes(x, {1}, true), {3, 4}), x));
            },
            shape, x0) < 1e-6);
  auto idx = std::make_shared<const std::vector<int64_t>>(
      std::vector<int64_t>{0, 5, 5, 11, 3, 2});
  CHECK(grad_check(
            [&](const Tensor& x) {
              Tensor g = ad::gather(x, idx, {6});
              return ad::sum_all(ad::mul(g, g));
            },
            shape, x0) < 1e-6);
}

TEST_CASE("softmax cross entropy") {
  SUBCASE("uniform logits give ln C") {
    Tensor logits = Tensor::zeros({3, 4});
    Tensor loss = ad::softmax_cross_entropy(logits, {0, 1, 2});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    Rng rng(11);
    auto x0 = random_vec(rng, 8, -1.0, 1.0);
    CHECK(grad_check(
              [](const Tensor& x) { return ad::softmax_cross_entropy(x, {1, 0}); }, {2, 4}, x0) <
          1e-6);
  }
  SUBCASE("duplicated batch keeps the mean loss") {
    Tensor one = Tensor::from_data({1, 3}, {0.3, -0.2, 0.9});
    Tensor two = Tensor::from_data({2, 3}, {0.3, -0.2, 0.9, 0.3, -0.2, 0.9});
    CHECK(ad::softmax_cross_entropy(one, {2}).item() ==
          doctest::Approx(ad::softmax_cross_entropy(two, {2, 2}).item()).epsilon(1e-14));
  }
}

TEST_CASE("softmax2d normalizes") {
  Tensor x = Tensor::from_data({3, 1}, {0.1, 2.0, -1.0});
  Tensor s = ad::softmax2d(x, 0);
  double sum = 0.0;
  for (double v : s.data()) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  // singleton softmax is exactly one
  CHECK(ad::softmax2d(Tensor::from_data({1, 1}, {3.7}), 0).item() == 1.0);
}

TEST_CASE("second-order derivatives through grad-of-grad") {
  SUBCASE("d/dx of sum((dy/dx)^2) for y = sum(x^3)") {
    Rng rng(3);
    auto x0 = random_vec(rng, 6, 0.5, 1.5);
    Tensor x = Tensor::from_data({6}, x0, true);
    Tensor y = ad::sum_all(ad::pow_scalar(x, 3.0));
    auto g = ad::grad(y, {x}, {.create_graph = true});
    Tensor s = ad::sum_all(ad::mul(g[0], g[0]));  // sum(9 x^4)
    auto h = ad::grad(s, {x});
    for (size_t i = 0; i < x0.size(); ++i)
      CHECK(h[0].data()[i] == doctest::Approx(36.0 * std::pow(x0[i], 3.0)).epsilon(1e-9));
  }

  SUBCASE("gradient-matching pattern on a linear model matches finite differences") {
    // d/d(pixels) of sum_l |grad_theta CE(pixels) - g0| : the exact structure
    // the distillation engine differentiates.
    Rng rng(5);
    const ad::Shape xshape{2, 4};
    auto x0 = random_vec(rng, 8, 0.1, 0.9);
    auto w0 = random_vec(rng, 12, -0.5, 0.5);
    auto g0 = random_vec(rng, 12, -0.1, 0.1);
    const std::vector<int> labels{0, 2};

    auto matching = [&](const Tensor& x) {
      Tensor w = Tensor::from_data({3, 4}, w0, true);
      Tensor logits = ad::matmul(x, ad::transpose2d(w));
      Tensor loss = ad::softmax_cross_entropy(logits, labels);
      auto gw = ad::grad(loss, {w}, {.create_graph = true});
      Tensor ref = Tensor::from_data({3, 4}, g0);
      return ad::sum_all(ad::abs(ad::sub(gw[0], ref)));
    };

    Tensor x = Tensor::from_data(xshape, x0, true);
    auto gx = ad::grad(matching(x), {x});
    auto fd = numeric_grad(
        [&](const std::vector<double>& v) {
          Tensor xx = Tensor::from_data(xshape, v, false);
          return matching(xx).item();
        },
        x0);
    CHECK(max_rel_err(gx[0].data(), fd) < 1e-5);
  }
}

TEST_CASE("grad bookkeeping") {
  SUBCASE("unused inputs get zero gradients") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor z = Tensor::from_data({2}, {5.0, 6.0}, true);
    Tensor y = ad::sum_all(ad::mul(x, x));
    auto g = ad::grad(y, {x, z});
    CHECK(g[1].data() == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("NoGradGuard suppresses taping") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    ad::NoGradGuard off;
    Tensor y = ad::mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("repeated operand accumulates both paths") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Tensor y = ad::sum_all(ad::mul(x, x));
    auto g = ad::grad(y, {x});
    CHECK(g[0].item() == doctest::Approx(6.0));
  }
}
