// Reverse-mode gradients of every differentiable op are checked against
// central differences in double precision. Inputs avoid each op's kinks
// (relu at 0, smooth-l1 at |d|=1, the scale floor, the probability-mass
// floor) so the numeric derivative is valid at the sampled point.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "taskcodec/ops.hpp"
#include "taskcodec/tensor.hpp"
#include "testutil.hpp"

using namespace taskcodec;
using testutil::Tensor64;
using testutil::check_gradients;
using testutil::random_tensor;
using testutil::uniform_tensor;

namespace {

// Values bounded away from zero so relu/max_with kinks are never straddled.
Tensor64 signed_offset_tensor(Shape shape, Rng& rng) {
  auto t = Tensor64::zeros(std::move(shape));
  for (auto& v : t.vals()) {
    const double mag = rng.uniform(0.2, 1.5);
    v = rng.uniform_int(2) == 0 ? -mag : mag;
  }
  return t;
}

}  // namespace

TEST_CASE("elementwise and scalar op gradients") {
  Rng rng(101);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  check_gradients("add", {a, b}, [&] { return sum(add(a, b)); });
  check_gradients("sub", {a, b}, [&] { return sum(sub(a, b)); });
  check_gradients("mul", {a, b}, [&] { return sum(mul(a, b)); });
  check_gradients("add_scalar", {a}, [&] { return sum(add_scalar(a, 2.5)); });
  check_gradients("mul_scalar", {a}, [&] { return sum(mul_scalar(a, -1.7)); });
  check_gradients("square", {a}, [&] { return sum(square(a)); });
  check_gradients("mean", {a}, [&] { return mean(a); });
  check_gradients("mse", {a, b}, [&] { return mse(a, b); });
}

TEST_CASE("unary nonlinearity gradients") {
  Rng rng(102);
  auto x = signed_offset_tensor({2, 5}, rng);
  check_gradients("relu", {x}, [&] { return sum(relu(x)); });
  check_gradients("exp", {x}, [&] { return sum(exp(x)); });
  check_gradients("sigmoid", {x}, [&] { return sum(sigmoid(x)); });
  check_gradients("softplus", {x}, [&] { return sum(softplus(x)); });
  check_gradients("erfc", {x}, [&] { return sum(erfc(x)); });
  check_gradients("std_normal_cdf", {x}, [&] { return sum(std_normal_cdf(x)); });
  check_gradients("logistic_cdf", {x}, [&] { return sum(logistic_cdf(x)); });

  // max_with kinks at the floor; sample away from 0.11.
  auto y = Tensor64::from({6}, {0.5, 0.3, 0.01, -0.4, 1.2, 0.05});
  check_gradients("max_with", {y}, [&] { return sum(max_with(y, 0.11)); });
}

TEST_CASE("gradient accumulates over re-used tensors") {
  Rng rng(103);
  auto x = random_tensor({4}, rng);
  // y = x*x + x: both uses must contribute, d/dx = 2x + 1.
  check_gradients("reuse", {x}, [&] { return sum(add(mul(x, x), x)); });
  x.set_requires_grad(true);
  x.zero_grad();
  auto out = sum(add(mul(x, x), x));
  out.backward();
  for (size_t i = 0; i < x.vals().size(); ++i) {
    CHECK(x.grad()[i] == doctest::Approx(2 * x.vals()[i] + 1).epsilon(1e-10));
  }
}

TEST_CASE("conv2d gradients with and without bias") {
  Rng rng(104);
  auto x = random_tensor({2, 3, 6, 6}, rng);
  auto w = random_tensor({4, 3, 5, 5}, rng, 0.5);
  auto b = random_tensor({4}, rng);
  check_gradients("conv5x5s2", {x, w, b},
                  [&] { return sum(conv2d(x, w, b, 2, 2)); });
  auto w3 = random_tensor({2, 3, 3, 3}, rng, 0.5);
  check_gradients("conv3x3s1 nobias", {x, w3},
                  [&] { return sum(conv2d(x, w3, Tensor64(), 1, 1)); });
}

TEST_CASE("transposed conv2d gradients") {
  Rng rng(105);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto w = random_tensor({4, 3, 5, 5}, rng, 0.5);
  auto b = random_tensor({3}, rng);
  check_gradients("tconv5x5s2op1", {x, w, b},
                  [&] { return sum(transposed_conv2d(x, w, b, 2, 2, 1)); });
  auto w2 = random_tensor({4, 2, 3, 3}, rng, 0.5);
  check_gradients("tconv3x3s1 nobias", {x, w2},
                  [&] { return sum(transposed_conv2d(x, w2, Tensor64(), 1, 1)); });
}

TEST_CASE("depthwise, pooling and linear gradients") {
  Rng rng(106);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  auto w = random_tensor({3, 1, 3, 3}, rng, 0.5);
  check_gradients("depthwise3", {x, w}, [&] { return sum(depthwise_conv2d(x, w)); });
  check_gradients("avgpool3", {x}, [&] { return sum(avgpool2d(x, 3, 1, 1)); });
  check_gradients("avgpool2s2", {x},
                  [&] { return sum(avgpool2d(x, 2, 2, 0)); });
  check_gradients("global_avg_pool", {x}, [&] { return sum(global_avg_pool(x)); });

  auto xf = random_tensor({3, 7}, rng);
  auto wf = random_tensor({4, 7}, rng, 0.5);
  auto bf = random_tensor({4}, rng);
  check_gradients("linear", {xf, wf, bf}, [&] { return sum(linear(xf, wf, bf)); });
}

TEST_CASE("gdn and inverse gdn gradients") {
  Rng rng(107);
  auto x = random_tensor({2, 4, 3, 3}, rng);
  auto beta = uniform_tensor({4}, rng, 0.5, 1.5);
  auto gamma = uniform_tensor({4, 4}, rng, 0.01, 0.2);
  check_gradients("gdn", {x, beta, gamma},
                  [&] { return sum(gdn(x, beta, gamma, false)); });
  check_gradients("igdn", {x, beta, gamma},
                  [&] { return sum(gdn(x, beta, gamma, true)); });
}

TEST_CASE("stack_batch routes gradients through the pick order") {
  Rng rng(108);
  auto a = random_tensor({2, 3, 3}, rng);
  auto b = random_tensor({2, 3, 3}, rng);
  check_gradients("stack_batch", {a, b}, [&] {
    std::vector<Tensor64> items = {a, b};
    return sum(mul(stack_batch(items, {1, 0}), stack_batch(items, {0, 1})));
  });
}

TEST_CASE("classification and detection loss gradients") {
  Rng rng(109);
  auto logits = random_tensor({4, 9}, rng);
  const std::vector<int> labels = {0, 3, 8, 5};
  check_gradients("softmax_ce", {logits},
                  [&] { return softmax_cross_entropy(logits, labels); });

  auto obj = random_tensor({2, 1, 4, 4}, rng);
  std::vector<double> targets(obj.size());
  for (size_t i = 0; i < targets.size(); ++i) targets[i] = (i % 3 == 0) ? 1.0 : 0.0;
  check_gradients("bce pos_weight",
                  {obj}, [&] { return bce_with_logits(obj, targets, 4.0); });

  // Keep |pred - target| away from 1, the smooth-l1 kink.
  auto pred = uniform_tensor({2, 4, 3, 3}, rng, -0.4, 0.4);
  std::vector<double> tgt(pred.size());
  for (size_t i = 0; i < tgt.size(); ++i) tgt[i] = (i % 2 == 0) ? 0.1 : 2.0;
  std::vector<uint8_t> mask(2 * 9, 0);
  for (size_t i = 0; i < mask.size(); i += 2) mask[i] = 1;
  check_gradients("masked_smooth_l1", {pred},
                  [&] { return masked_smooth_l1(pred, tgt, mask); });
}

TEST_CASE("rate estimate gradients") {
  Rng rng(110);
  // z values in a range where interval masses stay far above the floor.
  auto z = uniform_tensor({1, 3, 4, 4}, rng, -2.0, 2.0);
  auto sigma = uniform_tensor({1, 3, 4, 4}, rng, 0.5, 2.0);
  check_gradients("gaussian_interval_bits", {z, sigma},
                  [&] { return gaussian_interval_bits(z, sigma); });

  auto loc = uniform_tensor({3}, rng, -0.3, 0.3);
  auto log_scale = uniform_tensor({3}, rng, -0.5, 0.5);
  check_gradients("logistic_interval_bits", {z, loc, log_scale},
                  [&] { return logistic_interval_bits(z, loc, log_scale); });
}

TEST_CASE("noise injection is an identity for gradients") {
  Rng rng(111);
  auto z = random_tensor({2, 3}, rng);
  std::vector<double> noise(z.size());
  for (auto& v : noise) v = rng.uniform(-0.5, 0.5);
  check_gradients("add_noise", {z}, [&] { return sum(add_noise(z, noise)); });
}

TEST_CASE("round_latents detaches from the graph") {
  auto z = Tensor64::from({4}, {0.4, -0.6, 1.5, -2.5});
  z.set_requires_grad(true);
  auto r = round_latents(z);
  CHECK(r.vals() == std::vector<double>{0.0, -1.0, 2.0, -3.0});
  CHECK_FALSE(r.requires_grad());
  auto out = sum(mul(r, r));
  out.backward();
  CHECK_FALSE(z.has_grad());
}

TEST_CASE("NoGrad scope records no graph") {
  Rng rng(112);
  auto x = random_tensor({3}, rng);
  x.set_requires_grad(true);
  {
    NoGrad guard;
    auto y = sum(square(x));
    y.backward();
    CHECK_FALSE(x.has_grad());
  }
}

TEST_CASE("finite check traps NaN at the producing op") {
  auto x = Tensor64::from({2}, {1.0, -1.0});
  CHECK_THROWS(static_cast<void>(taskcodec::exp(mul_scalar(x, 1e6))));
}
