// Image-quality metrics against closed forms and an independent single-scale
// SSIM written directly from the published formula.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "taskcodec/common.hpp"
#include "taskcodec/metrics.hpp"
#include "taskcodec/tensor.hpp"

using namespace taskcodec;

namespace {

Tensor random_image(int c, int h, int w, uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor::zeros({c, h, w});
  for (auto& v : t.vals()) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return t;
}

Tensor add_noise_clamped(const Tensor& x, double amp, uint64_t seed) {
  Rng rng(seed);
  auto t = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    t.vals()[static_cast<size_t>(i)] = static_cast<float>(std::clamp(
        static_cast<double>(x.vals()[static_cast<size_t>(i)]) + rng.normal() * amp, 0.0,
        1.0));
  }
  return t;
}

// Direct single-scale SSIM: Gaussian-weighted means/variances in each fully
// interior 11x11 window, mean over windows and channels. Written from the
// formula, independently of the library's incremental implementation.
double ssim_direct(const Tensor& a, const Tensor& b) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int win = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> g(static_cast<size_t>(win) * win);
  double gsum = 0;
  for (int y = 0; y < win; ++y) {
    for (int x = 0; x < win; ++x) {
      const double dy = y - win / 2, dx = x - win / 2;
      g[static_cast<size_t>(y) * win + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      gsum += g[static_cast<size_t>(y) * win + x];
    }
  }
  for (auto& v : g) v /= gsum;

  double total = 0;
  int64_t windows = 0;
  for (int ch = 0; ch < c; ++ch) {
    const float* pa = a.data() + static_cast<int64_t>(ch) * h * w;
    const float* pb = b.data() + static_cast<int64_t>(ch) * h * w;
    for (int y = 0; y + win <= h; ++y) {
      for (int x = 0; x + win <= w; ++x) {
        double ma = 0, mb = 0;
        for (int wy = 0; wy < win; ++wy) {
          for (int wx = 0; wx < win; ++wx) {
            const double gw = g[static_cast<size_t>(wy) * win + wx];
            ma += gw * pa[(y + wy) * w + (x + wx)];
            mb += gw * pb[(y + wy) * w + (x + wx)];
          }
        }
        double va = 0, vb = 0, cov = 0;
        for (int wy = 0; wy < win; ++wy) {
          for (int wx = 0; wx < win; ++wx) {
            const double gw = g[static_cast<size_t>(wy) * win + wx];
            const double da = pa[(y + wy) * w + (x + wx)] - ma;
            const double db = pb[(y + wy) * w + (x + wx)] - mb;
            va += gw * da * da;
            vb += gw * db * db;
            cov += gw * da * db;
          }
        }
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

}  // namespace

TEST_CASE("psnr closed forms") {
  auto x = random_image(3, 16, 16, 5);
  CHECK(psnr(x, x) == doctest::Approx(100.0));  // identical images hit the cap

  // A uniform offset of 0.1 gives mse 0.01 and exactly 20 dB.
  auto y = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    y.vals()[static_cast<size_t>(i)] = x.vals()[static_cast<size_t>(i)] * 0.0f + 0.1f;
  }
  auto zero = Tensor::zeros(x.shape());
  CHECK(psnr(zero, y) == doctest::Approx(20.0).epsilon(1e-9));

  CHECK(psnr(x, y) == doctest::Approx(psnr(y, x)));  // symmetric
}

TEST_CASE("psnr strictly decreases along a noise ladder") {
  auto x = random_image(3, 32, 32, 6);
  double prev = 1e9;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    const double v = psnr(x, add_noise_clamped(x, amp, 77));
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("mse accumulates in a fixed order") {
  auto x = random_image(3, 16, 16, 7);
  auto y = add_noise_clamped(x, 0.1, 8);
  CHECK(mse_value(x, y) == mse_value(x, y));
  double acc = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x.vals()[static_cast<size_t>(i)]) -
                     static_cast<double>(y.vals()[static_cast<size_t>(i)]);
    acc += d * d;
  }
  CHECK(mse_value(x, y) == doctest::Approx(acc / static_cast<double>(x.size())).epsilon(1e-12));
}

TEST_CASE("ms_ssim equals 1 on identical images and drops with noise") {
  auto x = random_image(3, 64, 64, 9);
  CHECK(ms_ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));
  const double near = ms_ssim(x, add_noise_clamped(x, 0.02, 10));
  const double far = ms_ssim(x, add_noise_clamped(x, 0.2, 11));
  CHECK(near < 1.0);
  CHECK(far < near);
}

TEST_CASE("ms_ssim at one scale matches the direct ssim oracle") {
  auto x = random_image(3, 32, 32, 12);
  auto y = add_noise_clamped(x, 0.08, 13);
  const double direct = ssim_direct(x, y);
  CHECK(ms_ssim(x, y, 1) == doctest::Approx(direct).epsilon(1e-6));
  CHECK(ssim(x, y) == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("ms_ssim is invariant to identical shifts of both images") {
  // A noisy patch on a constant background, placed at two offsets that
  // differ by a multiple of the total pooling factor, gives the same set of
  // window statistics: every window pair either sees pure background (SSIM
  // exactly 1) or translates one-to-one between the placements.
  const int kPatch = 8;
  Rng rng(15);
  std::vector<float> noise(static_cast<size_t>(3) * kPatch * kPatch);
  for (auto& v : noise) v = static_cast<float>(rng.uniform(-0.2, 0.2));

  auto place = [&](int oy, int ox) {
    auto a = Tensor::full({3, 64, 64}, 0.5f);
    auto b = Tensor::full({3, 64, 64}, 0.5f);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < kPatch; ++y) {
        for (int x = 0; x < kPatch; ++x) {
          const size_t at = (static_cast<size_t>(c) * 64 + oy + y) * 64 + ox + x;
          b.vals()[at] += noise[(static_cast<size_t>(c) * kPatch + y) * kPatch + x];
        }
      }
    }
    return std::pair<Tensor, Tensor>(a, b);
  };

  auto [a1, b1] = place(20, 20);
  auto [a2, b2] = place(24, 28);  // shifted by (4, 8): multiples of 2^(scales-1)
  CHECK(ms_ssim(a1, b1, 2) == doctest::Approx(ms_ssim(a2, b2, 2)).epsilon(1e-9));
}

TEST_CASE("ms_ssim rejects images too small for the scale count") {
  auto tiny = random_image(3, 16, 16, 16);
  CHECK_THROWS(static_cast<void>(ms_ssim(tiny, tiny, 3)));
}

TEST_CASE("bpp arithmetic") {
  CHECK(bpp_actual(1024, 64, 64) == doctest::Approx(2.0));
  CHECK(bpp_actual(0, 64, 64) == 0.0);
  CHECK(bpp_estimate(8192.0, 64, 64) == doctest::Approx(2.0));
}
