#include "taskcodec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace taskcodec {

namespace {

struct Planes {
  int channels;
  int h, w;
  int64_t plane;  // elements per (image, channel) plane
  int count;      // number of planes in total (N*C)
};

Planes plane_layout(const Tensor& a) {
  const auto& s = a.shape();
  check(s.size() == 3 || s.size() == 4, "metrics: expected [C,H,W] or [N,C,H,W], got " + shape_str(s));
  Planes p;
  if (s.size() == 3) {
    p.channels = s[0];
    p.h = s[1];
    p.w = s[2];
    p.count = s[0];
  } else {
    p.channels = s[1];
    p.h = s[2];
    p.w = s[3];
    p.count = s[0] * s[1];
  }
  p.plane = static_cast<int64_t>(p.h) * p.w;
  return p;
}

constexpr int kWin = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(kWin * kWin);
    const double sigma = 1.5;
    double total = 0;
    for (int y = 0; y < kWin; ++y) {
      for (int x = 0; x < kWin; ++x) {
        const double dy = y - (kWin - 1) / 2.0;
        const double dx = x - (kWin - 1) / 2.0;
        w[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        total += w[y * kWin + x];
      }
    }
    for (auto& v : w) v /= total;
    return w;
  }();
  return win;
}

// Per-plane SSIM statistics: mean of the luminance term, the
// contrast-structure term, and their product, over all valid windows.
struct SsimTerms {
  double lum = 0, cs = 0, lum_cs = 0;
};

SsimTerms ssim_plane(const float* a, const float* b, int h, int w) {
  check(h >= kWin && w >= kWin,
        "metrics: image smaller than the 11x11 SSIM window");
  const auto& win = gaussian_window();
  SsimTerms out;
  int64_t windows = 0;
  for (int oy = 0; oy + kWin <= h; ++oy) {
    for (int ox = 0; ox + kWin <= w; ++ox) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = 0; y < kWin; ++y) {
        for (int x = 0; x < kWin; ++x) {
          const double g = win[y * kWin + x];
          const double va = a[(oy + y) * w + ox + x];
          const double vb = b[(oy + y) * w + ox + x];
          ma += g * va;
          mb += g * vb;
          saa += g * va * va;
          sbb += g * vb * vb;
          sab += g * va * vb;
        }
      }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      const double lum = (2 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
      const double cs = (2 * cov + kC2) / (var_a + var_b + kC2);
      out.lum += lum;
      out.cs += cs;
      out.lum_cs += lum * cs;
      ++windows;
    }
  }
  out.lum /= static_cast<double>(windows);
  out.cs /= static_cast<double>(windows);
  out.lum_cs /= static_cast<double>(windows);
  return out;
}

void downsample2(const float* src, int h, int w, std::vector<float>& dst, int& oh, int& ow) {
  oh = h / 2;
  ow = w / 2;
  dst.resize(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      dst[static_cast<size_t>(y) * ow + x] =
          0.25f * (src[(2 * y) * w + 2 * x] + src[(2 * y) * w + 2 * x + 1] +
                   src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1]);
    }
  }
}

}  // namespace

double mse_value(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "metrics: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const float* av = a.data();
  const float* bv = b.data();
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse_value(a, b);
  if (m <= 0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / m));
}

double ssim(const Tensor& a, const Tensor& b) { return ms_ssim(a, b, 1); }

double ms_ssim(const Tensor& a, const Tensor& b, int scales) {
  check(a.shape() == b.shape(), "metrics: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  check(scales >= 1 && scales <= 5, "metrics: ms_ssim scales must be in [1,5]");
  static const double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double wsum = 0;
  for (int i = 0; i < scales; ++i) wsum += kWeights[i];

  const Planes p = plane_layout(a);
  double result = 0.0;
  for (int pl = 0; pl < p.count; ++pl) {
    const float* pa = a.data() + pl * p.plane;
    const float* pb = b.data() + pl * p.plane;
    std::vector<float> bufa, bufb, next;
    int h = p.h, w = p.w;
    double plane_score = 1.0;
    for (int s = 0; s < scales; ++s) {
      const SsimTerms terms = ssim_plane(pa, pb, h, w);
      const double weight = kWeights[s] / wsum;
      if (s == scales - 1) {
        // Coarsest scale carries luminance jointly with cs, so a single
        // scale reproduces plain SSIM exactly.
        plane_score *= std::pow(std::max(terms.lum_cs, 1e-12), weight);
      } else {
        plane_score *= std::pow(std::max(terms.cs, 1e-12), weight);
        int oh, ow;
        downsample2(pa, h, w, next, oh, ow);
        bufa.swap(next);
        downsample2(pb, h, w, next, oh, ow);
        bufb.swap(next);
        pa = bufa.data();
        pb = bufb.data();
        h = oh;
        w = ow;
      }
    }
    result += plane_score;
  }
  return result / static_cast<double>(p.count);
}

double bpp_actual(size_t bytes, int height, int width) {
  return 8.0 * static_cast<double>(bytes) / (static_cast<double>(height) * width);
}

double bpp_estimate(double rate_bits, int height, int width) {
  return rate_bits / (static_cast<double>(height) * width);
}

}  // namespace taskcodec
