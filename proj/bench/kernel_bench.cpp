// Compares the OpenMP kernels against the serial reference implementations:
// verifies that both produce identical bits, then times each pair on shapes
// taken from the codec and task models at 64x64. Run with a thread count via
// OMP_NUM_THREADS; on one core the parallel path should match the reference
// within noise, since the loops are identical apart from the pragmas.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "taskcodec/common.hpp"
#include "taskcodec/kernels.hpp"
#include "taskcodec/kernels_ref.hpp"

namespace {

using taskcodec::Rng;

std::vector<float> random_buf(size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

int failures = 0;

// Runs fn repeatedly until ~100ms has elapsed and reports per-call time.
template <typename F>
double time_ms(F&& fn) {
  fn();  // warm-up, also the correctness run
  int iters = 0;
  const auto t0 = std::chrono::steady_clock::now();
  double elapsed = 0;
  while (elapsed < 100.0) {
    fn();
    ++iters;
    elapsed = ms_since(t0);
  }
  return elapsed / iters;
}

void report(const std::string& name, const std::vector<float>& ref,
            const std::vector<float>& par, double ref_ms, double par_ms) {
  const bool same = std::memcmp(ref.data(), par.data(), ref.size() * sizeof(float)) == 0;
  if (!same) ++failures;
  std::printf("%-24s %s  serial %8.3f ms  parallel %8.3f ms  speedup %5.2fx\n",
              name.c_str(), same ? "bit-equal" : "MISMATCH ", ref_ms, par_ms,
              ref_ms / par_ms);
}

void bench_conv(const char* name, int n, int ci, int hi, int wi, int co, int k,
                int stride, Rng& rng) {
  const int pad = k / 2;
  const int ho = (hi + 2 * pad - k) / stride + 1;
  const int wo = (wi + 2 * pad - k) / stride + 1;
  const auto x = random_buf(static_cast<size_t>(n) * ci * hi * wi, rng);
  const auto w = random_buf(static_cast<size_t>(co) * ci * k * k, rng);
  const auto b = random_buf(static_cast<size_t>(co), rng);
  std::vector<float> yr(static_cast<size_t>(n) * co * ho * wo);
  std::vector<float> yp(yr.size());

  const double ref_ms = time_ms([&] {
    taskcodec::refk::conv2d_fwd(x.data(), w.data(), b.data(), yr.data(), n, ci, hi, wi,
                                co, k, k, stride, pad, ho, wo);
  });
  const double par_ms = time_ms([&] {
    taskcodec::kern::conv2d_fwd(x.data(), w.data(), b.data(), yp.data(), n, ci, hi, wi,
                                co, k, k, stride, pad, ho, wo);
  });
  report(std::string(name) + " fwd", yr, yp, ref_ms, par_ms);

  // Backward pair on the same geometry.
  const auto gy = random_buf(yr.size(), rng);
  std::vector<float> gxr(x.size()), gxp(x.size());
  const double bref = time_ms([&] {
    taskcodec::refk::conv2d_bwd_input(gy.data(), w.data(), gxr.data(), n, ci, hi, wi, co,
                                      k, k, stride, pad, ho, wo);
  });
  const double bpar = time_ms([&] {
    taskcodec::kern::conv2d_bwd_input(gy.data(), w.data(), gxp.data(), n, ci, hi, wi, co,
                                      k, k, stride, pad, ho, wo);
  });
  report(std::string(name) + " bwd_in", gxr, gxp, bref, bpar);

  std::vector<float> gwr(w.size()), gwp(w.size());
  const double wref = time_ms([&] {
    taskcodec::refk::conv2d_bwd_weight(x.data(), gy.data(), gwr.data(), n, ci, hi, wi,
                                       co, k, k, stride, pad, ho, wo);
  });
  const double wpar = time_ms([&] {
    taskcodec::kern::conv2d_bwd_weight(x.data(), gy.data(), gwp.data(), n, ci, hi, wi,
                                       co, k, k, stride, pad, ho, wo);
  });
  report(std::string(name) + " bwd_w", gwr, gwp, wref, wpar);
}

void bench_tconv(const char* name, int n, int ci, int hi, int wi, int co, int k,
                 int stride, Rng& rng) {
  const int pad = k / 2, opad = 1;
  const int ho = (hi - 1) * stride - 2 * pad + k + opad;
  const int wo = (wi - 1) * stride - 2 * pad + k + opad;
  const auto x = random_buf(static_cast<size_t>(n) * ci * hi * wi, rng);
  const auto w = random_buf(static_cast<size_t>(ci) * co * k * k, rng);
  const auto b = random_buf(static_cast<size_t>(co), rng);
  std::vector<float> yr(static_cast<size_t>(n) * co * ho * wo);
  std::vector<float> yp(yr.size());

  const double ref_ms = time_ms([&] {
    taskcodec::refk::tconv2d_fwd(x.data(), w.data(), b.data(), yr.data(), n, ci, hi, wi,
                                 co, k, k, stride, pad, ho, wo);
  });
  const double par_ms = time_ms([&] {
    taskcodec::kern::tconv2d_fwd(x.data(), w.data(), b.data(), yp.data(), n, ci, hi, wi,
                                 co, k, k, stride, pad, ho, wo);
  });
  report(std::string(name) + " fwd", yr, yp, ref_ms, par_ms);
}

void bench_gdn(const char* name, int n, int c, int h, int w, bool inverse, Rng& rng) {
  const auto x = random_buf(static_cast<size_t>(n) * c * h * w, rng);
  auto beta = random_buf(static_cast<size_t>(c), rng);
  auto gamma = random_buf(static_cast<size_t>(c) * c, rng);
  for (auto& v : beta) v = 1.0f + v * v;  // keep the denominator positive
  for (auto& v : gamma) v = 0.01f * v * v;
  std::vector<float> yr(x.size()), yp(x.size());

  const double ref_ms = time_ms([&] {
    taskcodec::refk::gdn_fwd(x.data(), beta.data(), gamma.data(), yr.data(), n, c, h * w,
                             inverse);
  });
  const double par_ms = time_ms([&] {
    taskcodec::kern::gdn_fwd(x.data(), beta.data(), gamma.data(), yp.data(), n, c, h * w,
                             inverse);
  });
  report(name, yr, yp, ref_ms, par_ms);
}

void bench_depthwise(const char* name, int n, int c, int h, int w, int k, Rng& rng) {
  const auto x = random_buf(static_cast<size_t>(n) * c * h * w, rng);
  const auto wt = random_buf(static_cast<size_t>(c) * k * k, rng);
  std::vector<float> yr(x.size()), yp(x.size());
  const double ref_ms = time_ms(
      [&] { taskcodec::refk::depthwise_fwd(x.data(), wt.data(), yr.data(), n, c, h, w, k); });
  const double par_ms = time_ms(
      [&] { taskcodec::kern::depthwise_fwd(x.data(), wt.data(), yp.data(), n, c, h, w, k); });
  report(name, yr, yp, ref_ms, par_ms);
}

void bench_avgpool(const char* name, int n, int c, int h, int w, int k, Rng& rng) {
  const int stride = 1, pad = k / 2;
  const auto x = random_buf(static_cast<size_t>(n) * c * h * w, rng);
  std::vector<float> yr(x.size()), yp(x.size());
  const double ref_ms = time_ms([&] {
    taskcodec::refk::avgpool_fwd(x.data(), yr.data(), n, c, h, w, k, stride, pad, h, w);
  });
  const double par_ms = time_ms([&] {
    taskcodec::kern::avgpool_fwd(x.data(), yp.data(), n, c, h, w, k, stride, pad, h, w);
  });
  report(name, yr, yp, ref_ms, par_ms);
}

}  // namespace

int main() {
  Rng rng(99);
  std::printf("kernel                   check      timings (lower is better)\n");
  // Codec analysis/synthesis shapes at batch 8.
  bench_conv("conv 3->16 s2 64px", 8, 3, 64, 64, 16, 5, 2, rng);
  bench_conv("conv 16->32 s2 16px", 8, 16, 16, 16, 32, 5, 2, rng);
  bench_tconv("tconv 32->16 s2 8px", 8, 32, 8, 8, 16, 5, 2, rng);
  // Task-model shapes.
  bench_conv("conv 16->32 s2 32px", 8, 16, 32, 32, 32, 3, 2, rng);
  bench_conv("conv 64->64 s1 8px", 8, 64, 8, 8, 64, 3, 1, rng);
  // Pointwise stacks.
  bench_gdn("gdn 16ch 32px", 8, 16, 32, 32, false, rng);
  bench_gdn("igdn 16ch 32px", 8, 16, 32, 32, true, rng);
  bench_depthwise("depthwise3 3ch 64px", 8, 3, 64, 64, 3, rng);
  bench_avgpool("avgpool3 3ch 64px", 8, 3, 64, 64, 3, rng);
  if (failures != 0) {
    std::printf("%d kernel(s) disagree with the reference\n", failures);
    return 1;
  }
  return 0;
}
