#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

// Serial reference kernels. Straight transcriptions of the defining sums,
// one element at a time, no parallelism, no loop restructuring. Tests treat
// these as ground truth for the production kernels, and the benchmark
// binary times the two side by side.

namespace taskcodec::refk {

template <typename S>
void conv2d_fwd(const S* x, const S* w, const S* bias, S* y, int n, int ci,
                int hi, int wi, int co, int kh, int kw, int stride, int pad,
                int ho, int wo) {
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          S acc = bias ? bias[oc] : S(0);
          for (int ic = 0; ic < ci; ++ic)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int ih = oh * stride - pad + fy;
                const int iw = ow * stride - pad + fx;
                if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                acc += x[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw] *
                       w[((static_cast<int64_t>(oc) * ci + ic) * kh + fy) * kw + fx];
              }
          y[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow] = acc;
        }
}

template <typename S>
void conv2d_bwd_input(const S* gy, const S* w, S* gx, int n, int ci, int hi,
                      int wi, int co, int kh, int kw, int stride, int pad,
                      int ho, int wo) {
  std::memset(gx, 0, sizeof(S) * static_cast<size_t>(n) * ci * hi * wi);
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const S g = gy[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow];
          for (int ic = 0; ic < ci; ++ic)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int ih = oh * stride - pad + fy;
                const int iw = ow * stride - pad + fx;
                if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                gx[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw] +=
                    g * w[((static_cast<int64_t>(oc) * ci + ic) * kh + fy) * kw + fx];
              }
        }
}

template <typename S>
void conv2d_bwd_weight(const S* x, const S* gy, S* gw, int n, int ci, int hi,
                       int wi, int co, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
  std::memset(gw, 0, sizeof(S) * static_cast<size_t>(co) * ci * kh * kw);
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const S g = gy[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow];
          for (int ic = 0; ic < ci; ++ic)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int ih = oh * stride - pad + fy;
                const int iw = ow * stride - pad + fx;
                if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                gw[((static_cast<int64_t>(oc) * ci + ic) * kh + fy) * kw + fx] +=
                    g * x[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw];
              }
        }
}

// Transposed conv as its textbook definition: every input element scatters
// through the kernel into the output.
template <typename S>
void tconv2d_fwd(const S* x, const S* w, const S* bias, S* y, int n, int ci,
                 int hi, int wi, int co, int kh, int kw, int stride, int pad,
                 int ho, int wo) {
  for (int in = 0; in < n; ++in)
    for (int oc = 0; oc < co; ++oc) {
      S* yb = y + (static_cast<int64_t>(in) * co + oc) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) yb[i] = bias ? bias[oc] : S(0);
    }
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < ci; ++ic)
      for (int ih = 0; ih < hi; ++ih)
        for (int iw = 0; iw < wi; ++iw) {
          const S xv = x[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw];
          for (int oc = 0; oc < co; ++oc)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int oh = ih * stride - pad + fy;
                const int ow = iw * stride - pad + fx;
                if (oh < 0 || oh >= ho || ow < 0 || ow >= wo) continue;
                y[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow] +=
                    xv * w[((static_cast<int64_t>(ic) * co + oc) * kh + fy) * kw + fx];
              }
        }
}

template <typename S>
void tconv2d_bwd_input(const S* gy, const S* w, S* gx, int n, int ci, int hi,
                       int wi, int co, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < ci; ++ic)
      for (int ih = 0; ih < hi; ++ih)
        for (int iw = 0; iw < wi; ++iw) {
          S acc = 0;
          for (int oc = 0; oc < co; ++oc)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int oh = ih * stride - pad + fy;
                const int ow = iw * stride - pad + fx;
                if (oh < 0 || oh >= ho || ow < 0 || ow >= wo) continue;
                acc += gy[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow] *
                       w[((static_cast<int64_t>(ic) * co + oc) * kh + fy) * kw + fx];
              }
          gx[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw] = acc;
        }
}

template <typename S>
void tconv2d_bwd_weight(const S* x, const S* gy, S* gw, int n, int ci, int hi,
                        int wi, int co, int kh, int kw, int stride, int pad,
                        int ho, int wo) {
  std::memset(gw, 0, sizeof(S) * static_cast<size_t>(ci) * co * kh * kw);
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < ci; ++ic)
      for (int ih = 0; ih < hi; ++ih)
        for (int iw = 0; iw < wi; ++iw) {
          const S xv = x[((static_cast<int64_t>(in) * ci + ic) * hi + ih) * wi + iw];
          for (int oc = 0; oc < co; ++oc)
            for (int fy = 0; fy < kh; ++fy)
              for (int fx = 0; fx < kw; ++fx) {
                const int oh = ih * stride - pad + fy;
                const int ow = iw * stride - pad + fx;
                if (oh < 0 || oh >= ho || ow < 0 || ow >= wo) continue;
                gw[((static_cast<int64_t>(ic) * co + oc) * kh + fy) * kw + fx] +=
                    xv * gy[((static_cast<int64_t>(in) * co + oc) * ho + oh) * wo + ow];
              }
        }
}

template <typename S>
void depthwise_fwd(const S* x, const S* w, S* y, int n, int c, int h, int wd,
                   int k) {
  const int pad = k / 2;
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch)
      for (int oh = 0; oh < h; ++oh)
        for (int ow = 0; ow < wd; ++ow) {
          S acc = 0;
          for (int fy = 0; fy < k; ++fy)
            for (int fx = 0; fx < k; ++fx) {
              const int ih = oh - pad + fy;
              const int iw = ow - pad + fx;
              if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
              acc += x[((static_cast<int64_t>(in) * c + ch) * h + ih) * wd + iw] *
                     w[(static_cast<int64_t>(ch) * k + fy) * k + fx];
            }
          y[((static_cast<int64_t>(in) * c + ch) * h + oh) * wd + ow] = acc;
        }
}

template <typename S>
void avgpool_fwd(const S* x, S* y, int n, int c, int hi, int wi, int k,
                 int stride, int pad, int ho, int wo) {
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          S acc = 0;
          for (int fy = 0; fy < k; ++fy)
            for (int fx = 0; fx < k; ++fx) {
              const int ih = oh * stride - pad + fy;
              const int iw = ow * stride - pad + fx;
              if (ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
              acc += x[((static_cast<int64_t>(in) * c + ch) * hi + ih) * wi + iw];
            }
          y[((static_cast<int64_t>(in) * c + ch) * ho + oh) * wo + ow] =
              acc / static_cast<S>(k * k);
        }
}

template <typename S>
void gdn_fwd(const S* x, const S* beta, const S* gamma, S* y, int n, int c,
             int hw, bool inverse) {
  for (int in = 0; in < n; ++in)
    for (int cc = 0; cc < c; ++cc)
      for (int p = 0; p < hw; ++p) {
        S d = beta[cc];
        for (int dd = 0; dd < c; ++dd) {
          const S xv = x[(static_cast<int64_t>(in) * c + dd) * hw + p];
          d += gamma[static_cast<int64_t>(cc) * c + dd] * xv * xv;
        }
        const S xc = x[(static_cast<int64_t>(in) * c + cc) * hw + p];
        y[(static_cast<int64_t>(in) * c + cc) * hw + p] =
            inverse ? xc * std::sqrt(d) : xc / std::sqrt(d);
      }
}

}  // namespace taskcodec::refk
