// The OpenMP kernels must produce the same bits as the serial reference for
// any geometry and any thread count: parallelism is over independent outputs
// with a fixed reduction order, so there is no legitimate source of drift.

#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "doctest.h"
#include "taskcodec/common.hpp"
#include "taskcodec/kernels.hpp"
#include "taskcodec/kernels_ref.hpp"

using namespace taskcodec;

namespace {

std::vector<float> random_buf(size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

struct ConvCase {
  int n, ci, hi, wi, co, kh, kw, stride, pad;
};

void set_threads(int t) {
#ifdef _OPENMP
  omp_set_num_threads(t);
#else
  (void)t;
#endif
}

}  // namespace

TEST_CASE("conv2d forward/backward match the serial reference") {
  Rng rng(7);
  const ConvCase cases[] = {
      {1, 3, 8, 8, 4, 5, 5, 2, 2},  {2, 4, 7, 9, 3, 3, 3, 1, 1},
      {3, 2, 5, 5, 6, 1, 1, 1, 0},  {1, 8, 16, 16, 8, 5, 5, 2, 2},
      {2, 1, 6, 11, 2, 3, 5, 2, 1},
  };
  for (const auto& c : cases) {
    const int ho = (c.hi + 2 * c.pad - c.kh) / c.stride + 1;
    const int wo = (c.wi + 2 * c.pad - c.kw) / c.stride + 1;
    const auto x = random_buf(static_cast<size_t>(c.n) * c.ci * c.hi * c.wi, rng);
    const auto w = random_buf(static_cast<size_t>(c.co) * c.ci * c.kh * c.kw, rng);
    const auto b = random_buf(static_cast<size_t>(c.co), rng);
    const auto gy = random_buf(static_cast<size_t>(c.n) * c.co * ho * wo, rng);

    std::vector<float> ref(gy.size());
    refk::conv2d_fwd(x.data(), w.data(), b.data(), ref.data(), c.n, c.ci, c.hi, c.wi,
                     c.co, c.kh, c.kw, c.stride, c.pad, ho, wo);
    std::vector<float> ref_gx(x.size());
    refk::conv2d_bwd_input(gy.data(), w.data(), ref_gx.data(), c.n, c.ci, c.hi, c.wi,
                           c.co, c.kh, c.kw, c.stride, c.pad, ho, wo);
    std::vector<float> ref_gw(w.size());
    refk::conv2d_bwd_weight(x.data(), gy.data(), ref_gw.data(), c.n, c.ci, c.hi, c.wi,
                            c.co, c.kh, c.kw, c.stride, c.pad, ho, wo);

    for (int threads : {1, 3}) {
      set_threads(threads);
      std::vector<float> y(gy.size());
      kern::conv2d_fwd(x.data(), w.data(), b.data(), y.data(), c.n, c.ci, c.hi, c.wi,
                       c.co, c.kh, c.kw, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref, y));
      std::vector<float> gx(x.size());
      kern::conv2d_bwd_input(gy.data(), w.data(), gx.data(), c.n, c.ci, c.hi, c.wi, c.co,
                             c.kh, c.kw, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref_gx, gx));
      std::vector<float> gw(w.size());
      kern::conv2d_bwd_weight(x.data(), gy.data(), gw.data(), c.n, c.ci, c.hi, c.wi,
                              c.co, c.kh, c.kw, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref_gw, gw));
    }
  }
}

TEST_CASE("transposed conv matches the serial reference") {
  Rng rng(8);
  struct TC {
    int n, ci, hi, wi, co, k, stride, pad, opad;
  };
  const TC cases[] = {
      {1, 4, 4, 4, 3, 5, 2, 2, 1},
      {2, 3, 5, 7, 2, 3, 1, 1, 0},
      {1, 2, 8, 8, 2, 4, 2, 1, 0},
  };
  for (const auto& c : cases) {
    const int ho = (c.hi - 1) * c.stride - 2 * c.pad + c.k + c.opad;
    const int wo = (c.wi - 1) * c.stride - 2 * c.pad + c.k + c.opad;
    const auto x = random_buf(static_cast<size_t>(c.n) * c.ci * c.hi * c.wi, rng);
    const auto w = random_buf(static_cast<size_t>(c.ci) * c.co * c.k * c.k, rng);
    const auto b = random_buf(static_cast<size_t>(c.co), rng);
    const auto gy = random_buf(static_cast<size_t>(c.n) * c.co * ho * wo, rng);

    std::vector<float> ref(gy.size());
    refk::tconv2d_fwd(x.data(), w.data(), b.data(), ref.data(), c.n, c.ci, c.hi, c.wi,
                      c.co, c.k, c.k, c.stride, c.pad, ho, wo);
    std::vector<float> ref_gx(x.size());
    refk::tconv2d_bwd_input(gy.data(), w.data(), ref_gx.data(), c.n, c.ci, c.hi, c.wi,
                            c.co, c.k, c.k, c.stride, c.pad, ho, wo);
    std::vector<float> ref_gw(w.size());
    refk::tconv2d_bwd_weight(x.data(), gy.data(), ref_gw.data(), c.n, c.ci, c.hi, c.wi,
                             c.co, c.k, c.k, c.stride, c.pad, ho, wo);

    for (int threads : {1, 3}) {
      set_threads(threads);
      std::vector<float> y(gy.size());
      kern::tconv2d_fwd(x.data(), w.data(), b.data(), y.data(), c.n, c.ci, c.hi, c.wi,
                        c.co, c.k, c.k, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref, y));
      std::vector<float> gx(x.size());
      kern::tconv2d_bwd_input(gy.data(), w.data(), gx.data(), c.n, c.ci, c.hi, c.wi,
                              c.co, c.k, c.k, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref_gx, gx));
      std::vector<float> gw(w.size());
      kern::tconv2d_bwd_weight(x.data(), gy.data(), gw.data(), c.n, c.ci, c.hi, c.wi,
                               c.co, c.k, c.k, c.stride, c.pad, ho, wo);
      CHECK(bit_equal(ref_gw, gw));
    }
  }
}

TEST_CASE("depthwise, avgpool and gdn match the serial reference") {
  Rng rng(9);
  const auto x = random_buf(2 * 3 * 9 * 9, rng);
  const auto w = random_buf(3 * 3 * 3, rng);

  std::vector<float> ref(x.size());
  refk::depthwise_fwd(x.data(), w.data(), ref.data(), 2, 3, 9, 9, 3);
  std::vector<float> refp(2 * 3 * 5 * 5);
  refk::avgpool_fwd(x.data(), refp.data(), 2, 3, 9, 9, 3, 2, 1, 5, 5);

  auto beta = random_buf(3, rng);
  auto gamma = random_buf(3 * 3, rng);
  for (auto& v : beta) v = 1.0f + v * v;
  for (auto& v : gamma) v = 0.01f * v * v;
  std::vector<float> refg(x.size()), refig(x.size());
  refk::gdn_fwd(x.data(), beta.data(), gamma.data(), refg.data(), 2, 3, 81, false);
  refk::gdn_fwd(x.data(), beta.data(), gamma.data(), refig.data(), 2, 3, 81, true);

  for (int threads : {1, 3}) {
    set_threads(threads);
    std::vector<float> y(x.size());
    kern::depthwise_fwd(x.data(), w.data(), y.data(), 2, 3, 9, 9, 3);
    CHECK(bit_equal(ref, y));
    std::vector<float> p(refp.size());
    kern::avgpool_fwd(x.data(), p.data(), 2, 3, 9, 9, 3, 2, 1, 5, 5);
    CHECK(bit_equal(refp, p));
    std::vector<float> g(x.size()), ig(x.size());
    kern::gdn_fwd(x.data(), beta.data(), gamma.data(), g.data(), 2, 3, 81, false);
    kern::gdn_fwd(x.data(), beta.data(), gamma.data(), ig.data(), 2, 3, 81, true);
    CHECK(bit_equal(refg, g));
    CHECK(bit_equal(refig, ig));
  }
}

TEST_CASE("valid_range brackets exactly the in-bounds outputs") {
  // For every (k, pad, stride, limit, count), the closed range [lo, hi] must
  // contain exactly the outputs whose source index lands in [0, limit).
  for (int k = 0; k < 5; ++k) {
    for (int pad = 0; pad <= 2; ++pad) {
      for (int stride = 1; stride <= 3; ++stride) {
        for (int limit = 1; limit <= 6; ++limit) {
          for (int count = 1; count <= 6; ++count) {
            int lo = 0, hi = 0;
            kern::valid_range(k, pad, stride, limit, count, lo, hi);
            for (int o = 0; o < count; ++o) {
              const int src = o * stride - pad + k;
              const bool inside = src >= 0 && src < limit;
              const bool bracketed = o >= lo && o <= hi;
              CHECK_MESSAGE(inside == bracketed, "k=", k, " pad=", pad, " stride=", stride,
                            " limit=", limit, " count=", count, " o=", o);
            }
          }
        }
      }
    }
  }
}
