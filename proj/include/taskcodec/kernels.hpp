#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "taskcodec/common.hpp"

// Production kernels. Parallelism is only ever over independent output
// elements (or disjoint output blocks), and the reduction order inside each
// output element is fixed, so results are bit-identical for any thread
// count. Weight layouts: conv [co,ci,kh,kw]; transposed conv [ci,co,kh,kw].
// A useful adjoint pair falls out of those layouts: conv2d_bwd_input is
// exactly tconv2d_fwd with the same weight buffer, and vice versa.

namespace taskcodec::kern {

// Range of output indices o (0 <= o < count) whose source coordinate
// o*stride - pad + k lands inside [0, limit). Branch-free inner loops
// depend on this.
inline void valid_range(int k, int pad, int stride, int limit, int count,
                        int& lo, int& hi) {
  const int lo_num = pad - k;
  lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
  const int hi_num = limit - 1 - k + pad;
  hi = hi_num < 0 ? -1 : hi_num / stride;
  if (hi > count - 1) hi = count - 1;
}

template <typename S>
void conv2d_fwd(const S* x, const S* w, const S* bias, S* y, int n, int ci,
                int hi, int wi, int co, int kh, int kw, int stride, int pad,
                int ho, int wo) {
  const int64_t x_img = static_cast<int64_t>(ci) * hi * wi;
  const int64_t y_img = static_cast<int64_t>(co) * ho * wo;
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < co; ++oc) {
      S* yb = y + in * y_img + static_cast<int64_t>(oc) * ho * wo;
      const S bv = bias ? bias[oc] : S(0);
      for (int i = 0; i < ho * wo; ++i) yb[i] = bv;
      for (int ic = 0; ic < ci; ++ic) {
        const S* xb = x + in * x_img + static_cast<int64_t>(ic) * hi * wi;
        const S* wb = w + ((static_cast<int64_t>(oc) * ci + ic) * kh) * kw;
        for (int fy = 0; fy < kh; ++fy) {
          int oh_lo, oh_hi;
          valid_range(fy, pad, stride, hi, ho, oh_lo, oh_hi);
          for (int fx = 0; fx < kw; ++fx) {
            const S wv = wb[fy * kw + fx];
            int ow_lo, ow_hi;
            valid_range(fx, pad, stride, wi, wo, ow_lo, ow_hi);
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
              const S* xr = xb + (oh * stride - pad + fy) * wi - pad + fx;
              S* yr = yb + oh * wo;
              for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                yr[ow] += wv * xr[ow * stride];
              }
            }
          }
        }
      }
    }
  }
}

// Gradient w.r.t. conv weights: gw[oc,ic,fy,fx] = sum_{n,oh,ow} gy * x.
template <typename S>
void conv2d_bwd_weight(const S* x, const S* gy, S* gw, int n, int ci, int hi,
                       int wi, int co, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
  const int64_t x_img = static_cast<int64_t>(ci) * hi * wi;
  const int64_t gy_img = static_cast<int64_t>(co) * ho * wo;
#pragma omp parallel for collapse(2) schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    for (int ic = 0; ic < ci; ++ic) {
      S* gwb = gw + ((static_cast<int64_t>(oc) * ci + ic) * kh) * kw;
      for (int fy = 0; fy < kh; ++fy) {
        int oh_lo, oh_hi;
        valid_range(fy, pad, stride, hi, ho, oh_lo, oh_hi);
        for (int fx = 0; fx < kw; ++fx) {
          int ow_lo, ow_hi;
          valid_range(fx, pad, stride, wi, wo, ow_lo, ow_hi);
          S acc = 0;
          for (int in = 0; in < n; ++in) {
            const S* xb = x + in * x_img + static_cast<int64_t>(ic) * hi * wi;
            const S* gb = gy + in * gy_img + static_cast<int64_t>(oc) * ho * wo;
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
              const S* xr = xb + (oh * stride - pad + fy) * wi - pad + fx;
              const S* gr = gb + oh * wo;
              for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                acc += gr[ow] * xr[ow * stride];
              }
            }
          }
          gwb[fy * kw + fx] = acc;
        }
      }
    }
  }
}

template <typename S>
void conv2d_bwd_bias(const S* gy, S* gb, int n, int co, int ho, int wo) {
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < co; ++oc) {
    S acc = 0;
    for (int in = 0; in < n; ++in) {
      const S* g = gy + (static_cast<int64_t>(in) * co + oc) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) acc += g[i];
    }
    gb[oc] = acc;
  }
}

// Transposed conv forward, gather-free form: each (n,oc) block scatters the
// whole input through the kernel into its own output plane. Output size is
// passed explicitly so the same kernel serves as conv2d_bwd_input.
template <typename S>
void tconv2d_fwd(const S* x, const S* w, const S* bias, S* y, int n, int ci,
                 int hi, int wi, int co, int kh, int kw, int stride, int pad,
                 int ho, int wo) {
  const int64_t x_img = static_cast<int64_t>(ci) * hi * wi;
  const int64_t y_img = static_cast<int64_t>(co) * ho * wo;
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < co; ++oc) {
      S* yb = y + in * y_img + static_cast<int64_t>(oc) * ho * wo;
      const S bv = bias ? bias[oc] : S(0);
      for (int i = 0; i < ho * wo; ++i) yb[i] = bv;
      for (int ic = 0; ic < ci; ++ic) {
        const S* xb = x + in * x_img + static_cast<int64_t>(ic) * hi * wi;
        const S* wb = w + ((static_cast<int64_t>(ic) * co + oc) * kh) * kw;
        for (int fy = 0; fy < kh; ++fy) {
          int ih_lo, ih_hi;
          valid_range(fy, pad, stride, ho, hi, ih_lo, ih_hi);
          for (int fx = 0; fx < kw; ++fx) {
            const S wv = wb[fy * kw + fx];
            int iw_lo, iw_hi;
            valid_range(fx, pad, stride, wo, wi, iw_lo, iw_hi);
            for (int ih = ih_lo; ih <= ih_hi; ++ih) {
              const S* xr = xb + ih * wi;
              S* yr = yb + (ih * stride - pad + fy) * wo - pad + fx;
              for (int iw = iw_lo; iw <= iw_hi; ++iw) {
                yr[iw * stride] += wv * xr[iw];
              }
            }
          }
        }
      }
    }
  }
}

// Gradient w.r.t. transposed-conv weights: gw[ic,oc,fy,fx] =
// sum_{n,ih,iw} x[n,ic,ih,iw] * gy[n,oc,ih*s-p+fy,iw*s-p+fx].
template <typename S>
void tconv2d_bwd_weight(const S* x, const S* gy, S* gw, int n, int ci, int hi,
                        int wi, int co, int kh, int kw, int stride, int pad,
                        int ho, int wo) {
  const int64_t x_img = static_cast<int64_t>(ci) * hi * wi;
  const int64_t gy_img = static_cast<int64_t>(co) * ho * wo;
#pragma omp parallel for collapse(2) schedule(static)
  for (int ic = 0; ic < ci; ++ic) {
    for (int oc = 0; oc < co; ++oc) {
      S* gwb = gw + ((static_cast<int64_t>(ic) * co + oc) * kh) * kw;
      for (int fy = 0; fy < kh; ++fy) {
        int ih_lo, ih_hi;
        valid_range(fy, pad, stride, ho, hi, ih_lo, ih_hi);
        for (int fx = 0; fx < kw; ++fx) {
          int iw_lo, iw_hi;
          valid_range(fx, pad, stride, wo, wi, iw_lo, iw_hi);
          S acc = 0;
          for (int in = 0; in < n; ++in) {
            const S* xb = x + in * x_img + static_cast<int64_t>(ic) * hi * wi;
            const S* gb = gy + in * gy_img + static_cast<int64_t>(oc) * ho * wo;
            for (int ih = ih_lo; ih <= ih_hi; ++ih) {
              const S* xr = xb + ih * wi;
              const S* gr = gb + (ih * stride - pad + fy) * wo - pad + fx;
              for (int iw = iw_lo; iw <= iw_hi; ++iw) {
                acc += xr[iw] * gr[iw * stride];
              }
            }
          }
          gwb[fy * kw + fx] = acc;
        }
      }
    }
  }
}

// Depthwise conv, stride 1, odd kernel, same padding, no bias.
template <typename S>
void depthwise_fwd(const S* x, const S* w, S* y, int n, int c, int h, int wd,
                   int k) {
  const int pad = k / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const S* xb = x + (static_cast<int64_t>(in) * c + ch) * h * wd;
      S* yb = y + (static_cast<int64_t>(in) * c + ch) * h * wd;
      const S* wb = w + static_cast<int64_t>(ch) * k * k;
      for (int i = 0; i < h * wd; ++i) yb[i] = S(0);
      for (int fy = 0; fy < k; ++fy) {
        int oh_lo, oh_hi;
        valid_range(fy, pad, 1, h, h, oh_lo, oh_hi);
        for (int fx = 0; fx < k; ++fx) {
          const S wv = wb[fy * k + fx];
          int ow_lo, ow_hi;
          valid_range(fx, pad, 1, wd, wd, ow_lo, ow_hi);
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const S* xr = xb + (oh - pad + fy) * wd - pad + fx;
            S* yr = yb + oh * wd;
            for (int ow = ow_lo; ow <= ow_hi; ++ow) yr[ow] += wv * xr[ow];
          }
        }
      }
    }
  }
}

template <typename S>
void depthwise_bwd_input(const S* gy, const S* w, S* gx, int n, int c, int h,
                         int wd, int k) {
  const int pad = k / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const S* gb = gy + (static_cast<int64_t>(in) * c + ch) * h * wd;
      S* xb = gx + (static_cast<int64_t>(in) * c + ch) * h * wd;
      const S* wb = w + static_cast<int64_t>(ch) * k * k;
      for (int i = 0; i < h * wd; ++i) xb[i] = S(0);
      // gx[i] += gy[o] * w[f] where i = o - pad + f, i.e. o = i + pad - f:
      // same stencil with the kernel index flipped.
      for (int fy = 0; fy < k; ++fy) {
        int ih_lo, ih_hi;
        valid_range(fy, pad, 1, h, h, ih_lo, ih_hi);
        for (int fx = 0; fx < k; ++fx) {
          const S wv = wb[(k - 1 - fy) * k + (k - 1 - fx)];
          int iw_lo, iw_hi;
          valid_range(fx, pad, 1, wd, wd, iw_lo, iw_hi);
          for (int ih = ih_lo; ih <= ih_hi; ++ih) {
            const S* gr = gb + (ih - pad + fy) * wd - pad + fx;
            S* xr = xb + ih * wd;
            for (int iw = iw_lo; iw <= iw_hi; ++iw) xr[iw] += wv * gr[iw];
          }
        }
      }
    }
  }
}

template <typename S>
void depthwise_bwd_weight(const S* x, const S* gy, S* gw, int n, int c, int h,
                          int wd, int k) {
  const int pad = k / 2;
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    S* gwb = gw + static_cast<int64_t>(ch) * k * k;
    for (int fy = 0; fy < k; ++fy) {
      int oh_lo, oh_hi;
      valid_range(fy, pad, 1, h, h, oh_lo, oh_hi);
      for (int fx = 0; fx < k; ++fx) {
        int ow_lo, ow_hi;
        valid_range(fx, pad, 1, wd, wd, ow_lo, ow_hi);
        S acc = 0;
        for (int in = 0; in < n; ++in) {
          const S* xb = x + (static_cast<int64_t>(in) * c + ch) * h * wd;
          const S* gb = gy + (static_cast<int64_t>(in) * c + ch) * h * wd;
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const S* xr = xb + (oh - pad + fy) * wd - pad + fx;
            const S* gr = gb + oh * wd;
            for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += gr[ow] * xr[ow];
          }
        }
        gwb[fy * k + fx] = acc;
      }
    }
  }
}

// Average pooling with zero padding and a fixed divisor of k*k (border
// windows divide by the full window size, not the valid count).
template <typename S>
void avgpool_fwd(const S* x, S* y, int n, int c, int hi, int wi, int k,
                 int stride, int pad, int ho, int wo) {
  const S inv = S(1) / static_cast<S>(k * k);
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const S* xb = x + (static_cast<int64_t>(in) * c + ch) * hi * wi;
      S* yb = y + (static_cast<int64_t>(in) * c + ch) * ho * wo;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow) {
          S acc = 0;
          for (int fy = 0; fy < k; ++fy) {
            const int ih = oh * stride - pad + fy;
            if (ih < 0 || ih >= hi) continue;
            for (int fx = 0; fx < k; ++fx) {
              const int iw = ow * stride - pad + fx;
              if (iw < 0 || iw >= wi) continue;
              acc += xb[ih * wi + iw];
            }
          }
          yb[oh * wo + ow] = acc * inv;
        }
      }
    }
  }
}

template <typename S>
void avgpool_bwd(const S* gy, S* gx, int n, int c, int hi, int wi, int k,
                 int stride, int pad, int ho, int wo) {
  const S inv = S(1) / static_cast<S>(k * k);
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const S* gb = gy + (static_cast<int64_t>(in) * c + ch) * ho * wo;
      S* xb = gx + (static_cast<int64_t>(in) * c + ch) * hi * wi;
      for (int ih = 0; ih < hi; ++ih) {
        for (int iw = 0; iw < wi; ++iw) {
          // Output cells whose window covers (ih, iw).
          S acc = 0;
          for (int fy = 0; fy < k; ++fy) {
            const int num_h = ih + pad - fy;
            if (num_h < 0 || num_h % stride) continue;
            const int oh = num_h / stride;
            if (oh >= ho) continue;
            for (int fx = 0; fx < k; ++fx) {
              const int num_w = iw + pad - fx;
              if (num_w < 0 || num_w % stride) continue;
              const int ow = num_w / stride;
              if (ow >= wo) continue;
              acc += gb[oh * wo + ow];
            }
          }
          xb[ih * wi + iw] = acc * inv;
        }
      }
    }
  }
}

// GDN: y_c = x_c / sqrt(beta_c + sum_d gamma[c][d] * x_d^2), computed per
// pixel. inverse=true multiplies by the square root instead of dividing.
template <typename S>
void gdn_fwd(const S* x, const S* beta, const S* gamma, S* y, int n, int c,
             int hw, bool inverse) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int p = 0; p < hw; ++p) {
      const S* xp = x + static_cast<int64_t>(in) * c * hw + p;
      S* yp = y + static_cast<int64_t>(in) * c * hw + p;
      for (int cc = 0; cc < c; ++cc) {
        const S* gr = gamma + static_cast<int64_t>(cc) * c;
        S d = beta[cc];
        for (int dd = 0; dd < c; ++dd) {
          const S xv = xp[static_cast<int64_t>(dd) * hw];
          d += gr[dd] * xv * xv;
        }
        const S sq = std::sqrt(d);
        yp[static_cast<int64_t>(cc) * hw] =
            inverse ? xp[static_cast<int64_t>(cc) * hw] * sq
                    : xp[static_cast<int64_t>(cc) * hw] / sq;
      }
    }
  }
}

// GDN backward. The shared factor t[c] = +-(1/2) g_c x_c D_c^(-3/2 or -1/2)
// is built once per pixel; from it
//   gx_e     = g_e * D_e^(+-1/2) + 2 x_e sum_c gamma[c][e] t[c]
//   gbeta_c  = sum_pix t[c]
//   ggamma_cd= sum_pix t[c] * x_d^2
// gbeta/ggamma reductions run serially over pixels per (c) / (c,d) so the
// result does not depend on the thread count.
template <typename S>
void gdn_bwd(const S* x, const S* beta, const S* gamma, const S* gy, S* gx,
             S* gbeta, S* ggamma, int n, int c, int hw, bool inverse) {
  const int64_t total = static_cast<int64_t>(n) * hw;
  std::vector<S> t(static_cast<size_t>(total) * c);
  std::vector<S> dinv_half(static_cast<size_t>(total) * c);  // D^(+-1/2)

#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int p = 0; p < hw; ++p) {
      const int64_t pix = static_cast<int64_t>(in) * hw + p;
      const S* xp = x + static_cast<int64_t>(in) * c * hw + p;
      const S* gp = gy + static_cast<int64_t>(in) * c * hw + p;
      for (int cc = 0; cc < c; ++cc) {
        const S* gr = gamma + static_cast<int64_t>(cc) * c;
        S d = beta[cc];
        for (int dd = 0; dd < c; ++dd) {
          const S xv = xp[static_cast<int64_t>(dd) * hw];
          d += gr[dd] * xv * xv;
        }
        const S sq = std::sqrt(d);
        const S xc = xp[static_cast<int64_t>(cc) * hw];
        const S gc = gp[static_cast<int64_t>(cc) * hw];
        if (inverse) {
          dinv_half[pix * c + cc] = sq;
          t[pix * c + cc] = S(0.5) * gc * xc / sq;
        } else {
          dinv_half[pix * c + cc] = S(1) / sq;
          t[pix * c + cc] = S(-0.5) * gc * xc / (d * sq);
        }
      }
    }
  }

#pragma omp parallel for collapse(2) schedule(static)
  for (int in = 0; in < n; ++in) {
    for (int p = 0; p < hw; ++p) {
      const int64_t pix = static_cast<int64_t>(in) * hw + p;
      const S* xp = x + static_cast<int64_t>(in) * c * hw + p;
      const S* gp = gy + static_cast<int64_t>(in) * c * hw + p;
      S* op = gx + static_cast<int64_t>(in) * c * hw + p;
      for (int ee = 0; ee < c; ++ee) {
        S acc = 0;
        for (int cc = 0; cc < c; ++cc) {
          acc += gamma[static_cast<int64_t>(cc) * c + ee] * t[pix * c + cc];
        }
        const S xe = xp[static_cast<int64_t>(ee) * hw];
        op[static_cast<int64_t>(ee) * hw] =
            gp[static_cast<int64_t>(ee) * hw] * dinv_half[pix * c + ee] +
            S(2) * xe * acc;
      }
    }
  }

#pragma omp parallel for schedule(static)
  for (int cc = 0; cc < c; ++cc) {
    S acc = 0;
    for (int64_t pix = 0; pix < total; ++pix) acc += t[pix * c + cc];
    gbeta[cc] = acc;
  }

#pragma omp parallel for collapse(2) schedule(static)
  for (int cc = 0; cc < c; ++cc) {
    for (int dd = 0; dd < c; ++dd) {
      S acc = 0;
      for (int in = 0; in < n; ++in) {
        const S* xb = x + static_cast<int64_t>(in) * c * hw;
        for (int p = 0; p < hw; ++p) {
          const S xv = xb[static_cast<int64_t>(dd) * hw + p];
          acc += t[(static_cast<int64_t>(in) * hw + p) * c + cc] * xv * xv;
        }
      }
      ggamma[static_cast<int64_t>(cc) * c + dd] = acc;
    }
  }
}

}  // namespace taskcodec::kern
