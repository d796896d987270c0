// Layer wrappers: initialization statistics, parameter registration,
// projection constraints, and the optimizers that drive them.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "taskcodec/layers.hpp"
#include "taskcodec/ops.hpp"
#include "taskcodec/optim.hpp"

using namespace taskcodec;

TEST_CASE("conv layer registers parameters under its prefix") {
  Conv2dT<float> conv(3, 8, 5, 2, 2, true, Rng(1));
  std::vector<Param<float>> ps;
  conv.params("enc", ps);
  REQUIRE(ps.size() == 2);
  CHECK(ps[0].name == "enc.w");
  CHECK(ps[1].name == "enc.b");
  CHECK(ps[0].t.shape() == Shape{8, 3, 5, 5});
  CHECK(ps[1].t.shape() == Shape{8});

  Conv2dT<float> nobias(3, 8, 3, 1, 1, false, Rng(2));
  ps.clear();
  nobias.params("c", ps);
  CHECK(ps.size() == 1);
}

TEST_CASE("layer output shapes follow the arithmetic") {
  auto x = TensorOf<float>::zeros({2, 3, 16, 16});
  Conv2dT<float> down(3, 4, 5, 2, 2, true, Rng(3));
  CHECK(down(x).shape() == Shape{2, 4, 8, 8});
  TransposedConv2dT<float> up(4, 3, 5, 2, 2, 1, true, Rng(4));
  CHECK(up(down(x)).shape() == Shape{2, 3, 16, 16});
  LinearT<float> fc(3 * 16 * 16, 10, Rng(5));
  (void)fc;
  GdnT<float> g(3, false);
  CHECK(g(x).shape() == x.shape());
}

TEST_CASE("gdn init is identity-ish and projection keeps constraints") {
  GdnT<float> g(4, false);
  // beta = 1, gamma = 0.1 I: y = x / sqrt(1 + 0.1 x^2).
  auto x = TensorOf<float>::from({1, 4, 1, 1}, {1.0f, -2.0f, 0.5f, 3.0f});
  auto y = g(x);
  for (int i = 0; i < 4; ++i) {
    const float xv = x.vals()[static_cast<size_t>(i)];
    CHECK(y.vals()[static_cast<size_t>(i)] ==
          doctest::Approx(xv / std::sqrt(1.0f + 0.1f * xv * xv)));
  }

  std::vector<Param<float>> ps;
  g.params("g", ps);
  REQUIRE(ps.size() == 2);
  REQUIRE(static_cast<bool>(ps[0].project));
  g.beta.vals()[0] = -5.0f;
  g.gamma.vals()[1] = -0.3f;
  ps[0].project(g.beta.vals());
  ps[1].project(g.gamma.vals());
  CHECK(g.beta.vals()[0] == 1e-6f);
  CHECK(g.gamma.vals()[1] == 0.0f);
}

TEST_CASE("inverse gdn undoes gdn at matching parameters") {
  // With the same beta/gamma, igdn(gdn(x)) is not exactly x (the denominators
  // are evaluated at different activations), but at gamma = 0 both reduce to
  // scaling by 1/sqrt(beta) and sqrt(beta).
  GdnT<float> f(3, false), inv(3, true);
  for (auto& v : f.gamma.vals()) v = 0;
  for (auto& v : inv.gamma.vals()) v = 0;
  for (auto& v : f.beta.vals()) v = 4.0f;
  for (auto& v : inv.beta.vals()) v = 4.0f;
  auto x = TensorOf<float>::from({1, 3, 1, 2}, {1, 2, 3, 4, 5, 6});
  auto y = inv(f(x));
  for (size_t i = 0; i < x.vals().size(); ++i) {
    CHECK(y.vals()[i] == doctest::Approx(x.vals()[i]).epsilon(1e-5));
  }
}

TEST_CASE("kaiming-style init scale tracks fan-in") {
  Conv2dT<float> conv(16, 64, 3, 1, 1, false, Rng(6));
  double sq = 0;
  for (float v : conv.w.vals()) sq += static_cast<double>(v) * v;
  const double std_dev = std::sqrt(sq / static_cast<double>(conv.w.size()));
  const double expect = std::sqrt(2.0 / (16 * 9));
  CHECK(std_dev == doctest::Approx(expect).epsilon(0.15));
}

TEST_CASE("sgd with momentum matches the hand-rolled recurrence") {
  auto w = TensorOf<float>::from({2}, {1.0f, -1.0f});
  w.set_requires_grad(true);
  SgdT<float> opt({{"w", w, nullptr}}, 0.1, 0.9);

  float vw[2] = {0, 0};
  float expect[2] = {1.0f, -1.0f};
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    auto loss = mean(square(w));
    loss.backward();
    const auto grad = w.grad();
    opt.step();
    for (int i = 0; i < 2; ++i) {
      vw[i] = 0.9f * vw[i] + grad[static_cast<size_t>(i)];
      expect[i] -= 0.1f * vw[i];
      CHECK(w.vals()[static_cast<size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("adam takes a first step of size lr in the gradient direction") {
  auto w = TensorOf<float>::from({2}, {5.0f, -3.0f});
  w.set_requires_grad(true);
  AdamT<float> opt({{"w", w, nullptr}}, 0.01);
  opt.zero_grad();
  auto loss = sum(mul_scalar(w, 2.0f));
  loss.backward();
  opt.step();
  // First Adam step is -lr * g / (|g| + eps) = -lr * sign(g) almost exactly.
  CHECK(w.vals()[0] == doctest::Approx(5.0f - 0.01f).epsilon(1e-4));
  CHECK(w.vals()[1] == doctest::Approx(-3.0f - 0.01f).epsilon(1e-4));
}

TEST_CASE("optimizers skip parameters that received no gradient") {
  auto used = TensorOf<float>::from({1}, {2.0f});
  auto unused = TensorOf<float>::from({1}, {7.0f});
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  AdamT<float> opt({{"a", used, nullptr}, {"b", unused, nullptr}}, 0.1);
  opt.zero_grad();
  auto loss = sum(square(used));
  loss.backward();
  opt.step();
  CHECK(used.vals()[0] != 2.0f);
  CHECK(unused.vals()[0] == 7.0f);
}

TEST_CASE("weight decay shrinks weights even at zero gradient") {
  auto w = TensorOf<float>::from({1}, {1.0f});
  w.set_requires_grad(true);
  SgdT<float> opt({{"w", w, nullptr}}, 0.5, 0.0, 0.1);
  opt.zero_grad();
  auto loss = sum(mul_scalar(w, 0.0f));
  loss.backward();
  opt.step();
  // grad = 0, decay term 0.1 * w: w <- w - 0.5 * 0.1 * 1.
  CHECK(w.vals()[0] == doctest::Approx(0.95f));
}

TEST_CASE("polynomial decay endpoints and monotonicity") {
  CHECK(poly_decay(0.01, 0, 100, 0.9) == doctest::Approx(0.01));
  CHECK(poly_decay(0.01, 100, 100, 0.9) == doctest::Approx(0.0));
  double prev = 1e9;
  for (int it = 0; it <= 100; it += 10) {
    const double lr = poly_decay(0.01, it, 100, 0.9);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("loss monitor flags divergence and tracks decrease") {
  LossMonitor ok("steady");
  for (int i = 0; i < 40; ++i) ok.observe(1.0 - 0.01 * i);
  CHECK(ok.decreased());

  LossMonitor flat("flat");
  for (int i = 0; i < 40; ++i) flat.observe(1.0);
  CHECK_FALSE(flat.decreased());

  LossMonitor bad("nan");
  CHECK_THROWS(bad.observe(std::nan("")));
}
