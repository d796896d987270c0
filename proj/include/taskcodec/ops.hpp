#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "taskcodec/kernels.hpp"
#include "taskcodec/tensor.hpp"

// Differentiable ops. Forward values are computed eagerly (heavy ones via
// the kernels in kernels.hpp); each op registers a closure that pushes
// gradients into whichever parents require them. No broadcasting beyond
// scalar-with-tensor; convolution bias and GDN parameters are op arguments,
// not broadcast adds.

namespace taskcodec {

namespace detail {
inline void op_check(bool cond, const char* op, const std::string& msg) {
  if (!cond) fail(std::string(op) + ": " + msg);
}
}  // namespace detail

// ---- elementwise arithmetic ----

template <typename S>
TensorOf<S> add(const TensorOf<S>& a, const TensorOf<S>& b) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  detail::op_check(a.shape() == b.shape() || a_scalar || b_scalar, "add",
                   "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const TensorOf<S>& big = a_scalar && !b_scalar ? b : a;
  const int64_t n = big.size();
  std::vector<S> out(static_cast<size_t>(n));
  const S* av = a.data();
  const S* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = av[a_scalar ? 0 : i] + bv[b_scalar ? 0 : i];
  }
  Shape shp = big.shape();
  return make_op<S>("add", std::move(shp), std::move(out), {a, b}, [a, b](NodeOf<S>& self) {
    const S* g = self.grad.data();
    const int64_t n = static_cast<int64_t>(self.grad.size());
    for (const TensorOf<S>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      if (t->size() == n) {
        t->accumulate_grad(g, n);
      } else {
        S acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += g[i];
        t->accumulate_grad(&acc, 1);
      }
    }
  });
}

template <typename S>
TensorOf<S> sub(const TensorOf<S>& a, const TensorOf<S>& b) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  detail::op_check(a.shape() == b.shape() || a_scalar || b_scalar, "sub",
                   "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const TensorOf<S>& big = a_scalar && !b_scalar ? b : a;
  const int64_t n = big.size();
  std::vector<S> out(static_cast<size_t>(n));
  const S* av = a.data();
  const S* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = av[a_scalar ? 0 : i] - bv[b_scalar ? 0 : i];
  }
  Shape shp = big.shape();
  return make_op<S>("sub", std::move(shp), std::move(out), {a, b}, [a, b](NodeOf<S>& self) {
    const S* g = self.grad.data();
    const int64_t n = static_cast<int64_t>(self.grad.size());
    if (a.requires_grad()) {
      if (a.size() == n) {
        a.accumulate_grad(g, n);
      } else {
        S acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += g[i];
        a.accumulate_grad(&acc, 1);
      }
    }
    if (b.requires_grad()) {
      std::vector<S> gb(static_cast<size_t>(b.size()), S(0));
      if (b.size() == n) {
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] = -g[i];
      } else {
        for (int64_t i = 0; i < n; ++i) gb[0] -= g[i];
      }
      b.accumulate_grad(gb.data(), b.size());
    }
  });
}

template <typename S>
TensorOf<S> mul(const TensorOf<S>& a, const TensorOf<S>& b) {
  const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
  detail::op_check(a.shape() == b.shape() || a_scalar || b_scalar, "mul",
                   "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const TensorOf<S>& big = a_scalar && !b_scalar ? b : a;
  const int64_t n = big.size();
  std::vector<S> out(static_cast<size_t>(n));
  const S* av = a.data();
  const S* bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = av[a_scalar ? 0 : i] * bv[b_scalar ? 0 : i];
  }
  Shape shp = big.shape();
  return make_op<S>("mul", std::move(shp), std::move(out), {a, b},
                    [a, b, a_scalar, b_scalar](NodeOf<S>& self) {
                      const S* g = self.grad.data();
                      const int64_t n = static_cast<int64_t>(self.grad.size());
                      const S* av = a.data();
                      const S* bv = b.data();
                      if (a.requires_grad()) {
                        std::vector<S> ga(static_cast<size_t>(a.size()), S(0));
                        for (int64_t i = 0; i < n; ++i) {
                          ga[static_cast<size_t>(a_scalar ? 0 : i)] += g[i] * bv[b_scalar ? 0 : i];
                        }
                        a.accumulate_grad(ga.data(), a.size());
                      }
                      if (b.requires_grad()) {
                        std::vector<S> gb(static_cast<size_t>(b.size()), S(0));
                        for (int64_t i = 0; i < n; ++i) {
                          gb[static_cast<size_t>(b_scalar ? 0 : i)] += g[i] * av[a_scalar ? 0 : i];
                        }
                        b.accumulate_grad(gb.data(), b.size());
                      }
                    });
}

template <typename S>
TensorOf<S> add_scalar(const TensorOf<S>& a, S c) {
  std::vector<S> out(a.vals());
  for (auto& o : out) o += c;
  Shape shp = a.shape();
  return make_op<S>("add_scalar", std::move(shp), std::move(out), {a}, [a](NodeOf<S>& self) {
    if (a.requires_grad()) a.accumulate_grad(self.grad.data(), static_cast<int64_t>(self.grad.size()));
  });
}

template <typename S>
TensorOf<S> mul_scalar(const TensorOf<S>& a, S c) {
  std::vector<S> out(a.vals());
  for (auto& o : out) o *= c;
  Shape shp = a.shape();
  return make_op<S>("mul_scalar", std::move(shp), std::move(out), {a}, [a, c](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * c;
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

// ---- elementwise nonlinearities ----

template <typename S>
TensorOf<S> relu(const TensorOf<S>& a) {
  std::vector<S> out(a.vals());
  for (auto& o : out) o = o > S(0) ? o : S(0);
  Shape shp = a.shape();
  return make_op<S>("relu", std::move(shp), std::move(out), {a}, [a](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    const S* xv = a.data();
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) ga[i] = xv[i] > S(0) ? self.grad[i] : S(0);
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

template <typename S>
TensorOf<S> sigmoid(const TensorOf<S>& a) {
  std::vector<S> out(a.vals());
  for (auto& o : out) {
    o = o >= S(0) ? S(1) / (S(1) + std::exp(-o))
                  : std::exp(o) / (S(1) + std::exp(o));
  }
  Shape shp = a.shape();
  return make_op<S>("sigmoid", std::move(shp), std::move(out), {a}, [a](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) {
      const S y = self.values[i];
      ga[i] = self.grad[i] * y * (S(1) - y);
    }
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

template <typename S>
TensorOf<S> softplus(const TensorOf<S>& a) {
  std::vector<S> out(a.vals());
  for (auto& o : out) {
    o = o > S(0) ? o + std::log1p(std::exp(-o)) : std::log1p(std::exp(o));
  }
  Shape shp = a.shape();
  return make_op<S>("softplus", std::move(shp), std::move(out), {a}, [a](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    const S* xv = a.data();
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) {
      const S x = xv[i];
      const S sig = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                              : std::exp(x) / (S(1) + std::exp(x));
      ga[i] = self.grad[i] * sig;
    }
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

template <typename S>
TensorOf<S> square(const TensorOf<S>& a) {
  std::vector<S> out(a.vals());
  for (auto& o : out) o *= o;
  Shape shp = a.shape();
  return make_op<S>("square", std::move(shp), std::move(out), {a}, [a](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    const S* xv = a.data();
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * S(2) * xv[i];
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

// Elementwise max(x, floor); gradient passes only where x > floor.
template <typename S>
TensorOf<S> max_with(const TensorOf<S>& a, S floor) {
  std::vector<S> out(a.vals());
  for (auto& o : out) o = o > floor ? o : floor;
  Shape shp = a.shape();
  return make_op<S>("max_with", std::move(shp), std::move(out), {a}, [a, floor](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    const S* xv = a.data();
    std::vector<S> ga(self.grad.size());
    for (size_t i = 0; i < ga.size(); ++i) ga[i] = xv[i] > floor ? self.grad[i] : S(0);
    a.accumulate_grad(ga.data(), static_cast<int64_t>(ga.size()));
  });
}

// ---- reductions ----

template <typename S>
TensorOf<S> sum(const TensorOf<S>& a) {
  S acc = 0;
  for (const S v : a.vals()) acc += v;
  return make_op<S>("sum", {}, {acc}, {a}, [a](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    std::vector<S> ga(static_cast<size_t>(a.size()), self.grad[0]);
    a.accumulate_grad(ga.data(), a.size());
  });
}

template <typename S>
TensorOf<S> mean(const TensorOf<S>& a) {
  S acc = 0;
  for (const S v : a.vals()) acc += v;
  const S inv = S(1) / static_cast<S>(a.size());
  return make_op<S>("mean", {}, {acc * inv}, {a}, [a, inv](NodeOf<S>& self) {
    if (!a.requires_grad()) return;
    std::vector<S> ga(static_cast<size_t>(a.size()), self.grad[0] * inv);
    a.accumulate_grad(ga.data(), a.size());
  });
}

template <typename S>
TensorOf<S> mse(const TensorOf<S>& a, const TensorOf<S>& b) {
  detail::op_check(a.shape() == b.shape(), "mse",
                   "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const S* av = a.data();
  const S* bv = b.data();
  S acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const S d = av[i] - bv[i];
    acc += d * d;
  }
  const S inv = S(1) / static_cast<S>(a.size());
  return make_op<S>("mse", {}, {acc * inv}, {a, b}, [a, b, inv](NodeOf<S>& self) {
    const S g = self.grad[0];
    const S* av = a.data();
    const S* bv = b.data();
    const int64_t n = a.size();
    if (a.requires_grad()) {
      std::vector<S> ga(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] = g * S(2) * (av[i] - bv[i]) * inv;
      a.accumulate_grad(ga.data(), n);
    }
    if (b.requires_grad()) {
      std::vector<S> gb(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] = -g * S(2) * (av[i] - bv[i]) * inv;
      b.accumulate_grad(gb.data(), n);
    }
  });
}

// ---- structured ops over [N,C,H,W] ----

template <typename S>
TensorOf<S> conv2d(const TensorOf<S>& x, const TensorOf<S>& w, const TensorOf<S>& b,
                   int stride, int pad) {
  detail::op_check(x.shape().size() == 4, "conv2d", "input must be [N,C,H,W], got " + shape_str(x.shape()));
  detail::op_check(w.shape().size() == 4, "conv2d", "weight must be [Co,Ci,Kh,Kw], got " + shape_str(w.shape()));
  const int n = x.dim(0), ci = x.dim(1), hi = x.dim(2), wi = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::op_check(w.dim(1) == ci, "conv2d",
                   "weight expects " + std::to_string(w.dim(1)) + " input channels, input has " + std::to_string(ci));
  detail::op_check(!b.defined() || (b.shape() == Shape{co}), "conv2d", "bias must be [Co]");
  const int ho = (hi + 2 * pad - kh) / stride + 1;
  const int wo = (wi + 2 * pad - kw) / stride + 1;
  detail::op_check(ho > 0 && wo > 0, "conv2d", "kernel larger than padded input");
  std::vector<S> out(static_cast<size_t>(n) * co * ho * wo);
  kern::conv2d_fwd(x.data(), w.data(), b.defined() ? b.data() : nullptr, out.data(),
                   n, ci, hi, wi, co, kh, kw, stride, pad, ho, wo);
  std::vector<TensorOf<S>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<S>(
      "conv2d", {n, co, ho, wo}, std::move(out), std::move(parents),
      [x, w, b, n, ci, hi, wi, co, kh, kw, stride, pad, ho, wo](NodeOf<S>& self) {
        const S* g = self.grad.data();
        if (x.requires_grad()) {
          std::vector<S> gx(static_cast<size_t>(x.size()));
          kern::tconv2d_fwd<S>(g, w.data(), nullptr, gx.data(), n, co, ho, wo, ci,
                               kh, kw, stride, pad, hi, wi);
          x.accumulate_grad(gx.data(), x.size());
        }
        if (w.requires_grad()) {
          std::vector<S> gw(static_cast<size_t>(w.size()));
          kern::conv2d_bwd_weight(x.data(), g, gw.data(), n, ci, hi, wi, co, kh,
                                  kw, stride, pad, ho, wo);
          w.accumulate_grad(gw.data(), w.size());
        }
        if (b.defined() && b.requires_grad()) {
          std::vector<S> gb(static_cast<size_t>(co));
          kern::conv2d_bwd_bias(g, gb.data(), n, co, ho, wo);
          b.accumulate_grad(gb.data(), co);
        }
      });
}

// out_pad grows the output by rows/columns at the bottom-right (must be
// < stride), which is what makes stride-2 kernels of odd size produce an
// exact 2x upsample.
template <typename S>
TensorOf<S> transposed_conv2d(const TensorOf<S>& x, const TensorOf<S>& w,
                              const TensorOf<S>& b, int stride, int pad,
                              int out_pad = 0) {
  detail::op_check(x.shape().size() == 4, "transposed_conv2d", "input must be [N,C,H,W]");
  detail::op_check(w.shape().size() == 4, "transposed_conv2d", "weight must be [Ci,Co,Kh,Kw]");
  detail::op_check(out_pad >= 0 && out_pad < stride, "transposed_conv2d",
                   "out_pad must be in [0, stride)");
  const int n = x.dim(0), ci = x.dim(1), hi = x.dim(2), wi = x.dim(3);
  const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::op_check(w.dim(0) == ci, "transposed_conv2d",
                   "weight expects " + std::to_string(w.dim(0)) + " input channels, input has " + std::to_string(ci));
  detail::op_check(!b.defined() || (b.shape() == Shape{co}), "transposed_conv2d", "bias must be [Co]");
  const int ho = (hi - 1) * stride - 2 * pad + kh + out_pad;
  const int wo = (wi - 1) * stride - 2 * pad + kw + out_pad;
  detail::op_check(ho > 0 && wo > 0, "transposed_conv2d", "empty output");
  std::vector<S> out(static_cast<size_t>(n) * co * ho * wo);
  kern::tconv2d_fwd(x.data(), w.data(), b.defined() ? b.data() : nullptr, out.data(),
                    n, ci, hi, wi, co, kh, kw, stride, pad, ho, wo);
  std::vector<TensorOf<S>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<S>(
      "transposed_conv2d", {n, co, ho, wo}, std::move(out), std::move(parents),
      [x, w, b, n, ci, hi, wi, co, kh, kw, stride, pad, ho, wo](NodeOf<S>& self) {
        const S* g = self.grad.data();
        if (x.requires_grad()) {
          std::vector<S> gx(static_cast<size_t>(x.size()));
          kern::conv2d_fwd<S>(g, w.data(), nullptr, gx.data(), n, co, ho, wo, ci,
                              kh, kw, stride, pad, hi, wi);
          x.accumulate_grad(gx.data(), x.size());
        }
        if (w.requires_grad()) {
          std::vector<S> gw(static_cast<size_t>(w.size()));
          kern::tconv2d_bwd_weight(x.data(), g, gw.data(), n, ci, hi, wi, co, kh,
                                   kw, stride, pad, ho, wo);
          w.accumulate_grad(gw.data(), w.size());
        }
        if (b.defined() && b.requires_grad()) {
          std::vector<S> gb(static_cast<size_t>(co));
          kern::conv2d_bwd_bias(g, gb.data(), n, co, ho, wo);
          b.accumulate_grad(gb.data(), co);
        }
      });
}

// Depthwise 3x3 (or any odd k), stride 1, same padding, no bias.
template <typename S>
TensorOf<S> depthwise_conv2d(const TensorOf<S>& x, const TensorOf<S>& w) {
  detail::op_check(x.shape().size() == 4, "depthwise_conv2d", "input must be [N,C,H,W]");
  detail::op_check(w.shape().size() == 4 && w.dim(1) == 1, "depthwise_conv2d",
                   "weight must be [C,1,K,K], got " + shape_str(w.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int k = w.dim(2);
  detail::op_check(w.dim(0) == c && w.dim(3) == k && (k % 2) == 1, "depthwise_conv2d",
                   "weight must be [C,1,K,K] with odd K matching input channels");
  std::vector<S> out(static_cast<size_t>(x.size()));
  kern::depthwise_fwd(x.data(), w.data(), out.data(), n, c, h, wd, k);
  Shape shp = x.shape();
  return make_op<S>("depthwise_conv2d", std::move(shp), std::move(out), {x, w},
                    [x, w, n, c, h, wd, k](NodeOf<S>& self) {
                      const S* g = self.grad.data();
                      if (x.requires_grad()) {
                        std::vector<S> gx(static_cast<size_t>(x.size()));
                        kern::depthwise_bwd_input(g, w.data(), gx.data(), n, c, h, wd, k);
                        x.accumulate_grad(gx.data(), x.size());
                      }
                      if (w.requires_grad()) {
                        std::vector<S> gw(static_cast<size_t>(w.size()));
                        kern::depthwise_bwd_weight(x.data(), g, gw.data(), n, c, h, wd, k);
                        w.accumulate_grad(gw.data(), w.size());
                      }
                    });
}

template <typename S>
TensorOf<S> avgpool2d(const TensorOf<S>& x, int k, int stride, int pad) {
  detail::op_check(x.shape().size() == 4, "avgpool2d", "input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), hi = x.dim(2), wi = x.dim(3);
  const int ho = (hi + 2 * pad - k) / stride + 1;
  const int wo = (wi + 2 * pad - k) / stride + 1;
  detail::op_check(ho > 0 && wo > 0, "avgpool2d", "window larger than padded input");
  std::vector<S> out(static_cast<size_t>(n) * c * ho * wo);
  kern::avgpool_fwd(x.data(), out.data(), n, c, hi, wi, k, stride, pad, ho, wo);
  return make_op<S>("avgpool2d", {n, c, ho, wo}, std::move(out), {x},
                    [x, n, c, hi, wi, k, stride, pad, ho, wo](NodeOf<S>& self) {
                      if (!x.requires_grad()) return;
                      std::vector<S> gx(static_cast<size_t>(x.size()));
                      kern::avgpool_bwd(self.grad.data(), gx.data(), n, c, hi, wi, k,
                                        stride, pad, ho, wo);
                      x.accumulate_grad(gx.data(), x.size());
                    });
}

template <typename S>
TensorOf<S> global_avg_pool(const TensorOf<S>& x) {
  detail::op_check(x.shape().size() == 4, "global_avg_pool", "input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  std::vector<S> out(static_cast<size_t>(n) * c);
  const S* xv = x.data();
  for (int i = 0; i < n * c; ++i) {
    S acc = 0;
    for (int p = 0; p < hw; ++p) acc += xv[static_cast<int64_t>(i) * hw + p];
    out[static_cast<size_t>(i)] = acc * inv;
  }
  return make_op<S>("global_avg_pool", {n, c}, std::move(out), {x},
                    [x, n, c, hw, inv](NodeOf<S>& self) {
                      if (!x.requires_grad()) return;
                      std::vector<S> gx(static_cast<size_t>(x.size()));
                      for (int i = 0; i < n * c; ++i) {
                        const S g = self.grad[static_cast<size_t>(i)] * inv;
                        for (int p = 0; p < hw; ++p) gx[static_cast<size_t>(i) * hw + p] = g;
                      }
                      x.accumulate_grad(gx.data(), x.size());
                    });
}

template <typename S>
TensorOf<S> linear(const TensorOf<S>& x, const TensorOf<S>& w, const TensorOf<S>& b) {
  detail::op_check(x.shape().size() == 2, "linear", "input must be [N,F]");
  detail::op_check(w.shape().size() == 2, "linear", "weight must be [O,F]");
  const int n = x.dim(0), f = x.dim(1), o = w.dim(0);
  detail::op_check(w.dim(1) == f, "linear", "weight expects " + std::to_string(w.dim(1)) +
                                                " features, input has " + std::to_string(f));
  detail::op_check(!b.defined() || b.shape() == Shape{o}, "linear", "bias must be [O]");
  std::vector<S> out(static_cast<size_t>(n) * o);
  const S* xv = x.data();
  const S* wv = w.data();
  for (int in = 0; in < n; ++in) {
    for (int io = 0; io < o; ++io) {
      S acc = b.defined() ? b.vals()[static_cast<size_t>(io)] : S(0);
      for (int k = 0; k < f; ++k) acc += xv[in * f + k] * wv[io * f + k];
      out[static_cast<size_t>(in) * o + io] = acc;
    }
  }
  std::vector<TensorOf<S>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<S>("linear", {n, o}, std::move(out), std::move(parents),
                    [x, w, b, n, f, o](NodeOf<S>& self) {
                      const S* g = self.grad.data();
                      const S* xv = x.data();
                      const S* wv = w.data();
                      if (x.requires_grad()) {
                        std::vector<S> gx(static_cast<size_t>(n) * f, S(0));
                        for (int in = 0; in < n; ++in)
                          for (int io = 0; io < o; ++io)
                            for (int k = 0; k < f; ++k)
                              gx[static_cast<size_t>(in) * f + k] += g[in * o + io] * wv[io * f + k];
                        x.accumulate_grad(gx.data(), x.size());
                      }
                      if (w.requires_grad()) {
                        std::vector<S> gw(static_cast<size_t>(o) * f, S(0));
                        for (int in = 0; in < n; ++in)
                          for (int io = 0; io < o; ++io)
                            for (int k = 0; k < f; ++k)
                              gw[static_cast<size_t>(io) * f + k] += g[in * o + io] * xv[in * f + k];
                        w.accumulate_grad(gw.data(), w.size());
                      }
                      if (b.defined() && b.requires_grad()) {
                        std::vector<S> gb(static_cast<size_t>(o), S(0));
                        for (int in = 0; in < n; ++in)
                          for (int io = 0; io < o; ++io) gb[static_cast<size_t>(io)] += g[in * o + io];
                        b.accumulate_grad(gb.data(), o);
                      }
                    });
}

template <typename S>
TensorOf<S> gdn(const TensorOf<S>& x, const TensorOf<S>& beta, const TensorOf<S>& gamma,
                bool inverse) {
  detail::op_check(x.shape().size() == 4, "gdn", "input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  detail::op_check(beta.shape() == Shape{c}, "gdn", "beta must be [C]");
  detail::op_check(gamma.shape() == (Shape{c, c}), "gdn", "gamma must be [C,C]");
  std::vector<S> out(static_cast<size_t>(x.size()));
  kern::gdn_fwd(x.data(), beta.data(), gamma.data(), out.data(), n, c, hw, inverse);
  Shape shp = x.shape();
  return make_op<S>("gdn", std::move(shp), std::move(out), {x, beta, gamma},
                    [x, beta, gamma, n, c, hw, inverse](NodeOf<S>& self) {
                      std::vector<S> gx(static_cast<size_t>(x.size()));
                      std::vector<S> gb(static_cast<size_t>(c));
                      std::vector<S> gg(static_cast<size_t>(c) * c);
                      kern::gdn_bwd(x.data(), beta.data(), gamma.data(), self.grad.data(),
                                    gx.data(), gb.data(), gg.data(), n, c, hw, inverse);
                      if (x.requires_grad()) x.accumulate_grad(gx.data(), x.size());
                      if (beta.requires_grad()) beta.accumulate_grad(gb.data(), c);
                      if (gamma.requires_grad()) gamma.accumulate_grad(gg.data(), gamma.size());
                    });
}

// ---- losses ----

// Softmax cross entropy with the class axis at dim 1. Logits may be [N,K]
// or [N,K,H,W]; labels run row-major over (n, spatial), -1 means ignore.
// Returns the mean over counted positions.
template <typename S>
TensorOf<S> softmax_cross_entropy(const TensorOf<S>& logits, const std::vector<int>& labels) {
  detail::op_check(logits.shape().size() >= 2, "softmax_cross_entropy",
                   "logits must have a class dim at axis 1");
  const int n = logits.dim(0), k = logits.dim(1);
  int64_t m = 1;
  for (size_t i = 2; i < logits.shape().size(); ++i) m *= logits.dim(static_cast<int>(i));
  detail::op_check(static_cast<int64_t>(labels.size()) == n * m, "softmax_cross_entropy",
                   "label count " + std::to_string(labels.size()) + " != positions " + std::to_string(n * m));
  const S* lv = logits.data();
  double acc = 0;
  int64_t counted = 0;
  for (int in = 0; in < n; ++in) {
    for (int64_t p = 0; p < m; ++p) {
      const int lab = labels[static_cast<size_t>(in * m + p)];
      if (lab < 0) continue;
      detail::op_check(lab < k, "softmax_cross_entropy", "label out of range");
      const S* base = lv + (static_cast<int64_t>(in) * k) * m + p;
      S mx = base[0];
      for (int ic = 1; ic < k; ++ic) mx = std::max(mx, base[static_cast<int64_t>(ic) * m]);
      double lse = 0;
      for (int ic = 0; ic < k; ++ic) lse += std::exp(static_cast<double>(base[static_cast<int64_t>(ic) * m] - mx));
      lse = std::log(lse) + static_cast<double>(mx);
      acc += lse - static_cast<double>(base[static_cast<int64_t>(lab) * m]);
      ++counted;
    }
  }
  detail::op_check(counted > 0, "softmax_cross_entropy", "all labels ignored");
  const S inv = S(1) / static_cast<S>(counted);
  return make_op<S>("softmax_cross_entropy", {}, {static_cast<S>(acc) * inv}, {logits},
                    [logits, labels, n, k, m, inv](NodeOf<S>& self) {
                      if (!logits.requires_grad()) return;
                      const S g = self.grad[0];
                      const S* lv = logits.data();
                      std::vector<S> gl(static_cast<size_t>(logits.size()), S(0));
                      for (int in = 0; in < n; ++in) {
                        for (int64_t p = 0; p < m; ++p) {
                          const int lab = labels[static_cast<size_t>(in * m + p)];
                          if (lab < 0) continue;
                          const S* base = lv + (static_cast<int64_t>(in) * k) * m + p;
                          S* gbase = gl.data() + (static_cast<int64_t>(in) * k) * m + p;
                          S mx = base[0];
                          for (int ic = 1; ic < k; ++ic) mx = std::max(mx, base[static_cast<int64_t>(ic) * m]);
                          double z = 0;
                          for (int ic = 0; ic < k; ++ic) z += std::exp(static_cast<double>(base[static_cast<int64_t>(ic) * m] - mx));
                          for (int ic = 0; ic < k; ++ic) {
                            const double pk = std::exp(static_cast<double>(base[static_cast<int64_t>(ic) * m] - mx)) / z;
                            S gv = static_cast<S>(pk);
                            if (ic == lab) gv -= S(1);
                            gbase[static_cast<int64_t>(ic) * m] = g * gv * inv;
                          }
                        }
                      }
                      logits.accumulate_grad(gl.data(), logits.size());
                    });
}

// Mean binary cross entropy on logits against constant targets in [0,1].
// pos_weight > 1 upweights the loss (and gradient) of elements whose target
// is 1, the usual remedy when positives are rare; the mean stays over the
// element count.
template <typename S>
TensorOf<S> bce_with_logits(const TensorOf<S>& logits, const std::vector<S>& targets,
                            double pos_weight = 1.0) {
  detail::op_check(static_cast<int64_t>(targets.size()) == logits.size(), "bce_with_logits",
                   "target count mismatch");
  const S* lv = logits.data();
  double acc = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    const double x = static_cast<double>(lv[i]);
    const double t = static_cast<double>(targets[i]);
    const double w = 1.0 + (pos_weight - 1.0) * t;
    acc += w * (std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))));
  }
  const S inv = S(1) / static_cast<S>(targets.size());
  return make_op<S>("bce_with_logits", {}, {static_cast<S>(acc) * inv}, {logits},
                    [logits, targets, inv, pos_weight](NodeOf<S>& self) {
                      if (!logits.requires_grad()) return;
                      const S g = self.grad[0];
                      const S* lv = logits.data();
                      std::vector<S> gl(targets.size());
                      for (size_t i = 0; i < targets.size(); ++i) {
                        const S x = lv[i];
                        const S sig = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                                                : std::exp(x) / (S(1) + std::exp(x));
                        const S w = S(1.0 + (pos_weight - 1.0) *
                                                static_cast<double>(targets[i]));
                        gl[i] = g * w * (sig - targets[i]) * inv;
                      }
                      logits.accumulate_grad(gl.data(), logits.size());
                    });
}

// Smooth-L1 over pred [N,C,H,W] against constant targets, restricted to
// cells where mask[n*H*W + p] != 0; sums the C coords per cell and averages
// over masked cells.
template <typename S>
TensorOf<S> masked_smooth_l1(const TensorOf<S>& pred, const std::vector<S>& target,
                             const std::vector<uint8_t>& mask) {
  detail::op_check(pred.shape().size() == 4, "masked_smooth_l1", "pred must be [N,C,H,W]");
  const int n = pred.dim(0), c = pred.dim(1);
  const int64_t m = static_cast<int64_t>(pred.dim(2)) * pred.dim(3);
  detail::op_check(static_cast<int64_t>(target.size()) == pred.size(), "masked_smooth_l1",
                   "target size mismatch");
  detail::op_check(static_cast<int64_t>(mask.size()) == n * m, "masked_smooth_l1",
                   "mask size mismatch");
  const S* pv = pred.data();
  double acc = 0;
  int64_t counted = 0;
  for (int in = 0; in < n; ++in) {
    for (int64_t p = 0; p < m; ++p) {
      if (!mask[static_cast<size_t>(in * m + p)]) continue;
      ++counted;
      for (int ic = 0; ic < c; ++ic) {
        const int64_t idx = (static_cast<int64_t>(in) * c + ic) * m + p;
        const double d = static_cast<double>(pv[idx]) - static_cast<double>(target[static_cast<size_t>(idx)]);
        acc += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
      }
    }
  }
  const S inv = counted > 0 ? S(1) / static_cast<S>(counted) : S(0);
  return make_op<S>("masked_smooth_l1", {}, {static_cast<S>(acc) * inv}, {pred},
                    [pred, target, mask, n, c, m, inv](NodeOf<S>& self) {
                      if (!pred.requires_grad()) return;
                      const S g = self.grad[0];
                      const S* pv = pred.data();
                      std::vector<S> gp(static_cast<size_t>(pred.size()), S(0));
                      for (int in = 0; in < n; ++in) {
                        for (int64_t p = 0; p < m; ++p) {
                          if (!mask[static_cast<size_t>(in * m + p)]) continue;
                          for (int ic = 0; ic < c; ++ic) {
                            const int64_t idx = (static_cast<int64_t>(in) * c + ic) * m + p;
                            const S d = pv[idx] - target[static_cast<size_t>(idx)];
                            S dd;
                            if (d > S(1)) {
                              dd = S(1);
                            } else if (d < S(-1)) {
                              dd = S(-1);
                            } else {
                              dd = d;
                            }
                            gp[static_cast<size_t>(idx)] = g * dd * inv;
                          }
                        }
                      }
                      pred.accumulate_grad(gp.data(), pred.size());
                    });
}

// ---- rate estimation ----

struct RateStats {
  int64_t clamped = 0;  // interval masses that hit the 2^-32 floor
};

namespace detail {
constexpr double kMassFloor = 2.3283064365386963e-10;  // 2^-32
constexpr double kInvLn2 = 1.4426950408889634;
inline double std_normal_cdf(double u) { return 0.5 * std::erfc(-u * 0.7071067811865476); }
inline double std_normal_pdf(double u) { return 0.3989422804014327 * std::exp(-0.5 * u * u); }
inline double logistic_cdf(double u) {
  return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}
}  // namespace detail

// Total bits to code z under a zero-mean Gaussian with per-element scale
// sigma: sum over elements of -log2(Phi((z+.5)/s) - Phi((z-.5)/s)), with the
// interval mass floored at 2^-32 (clamped elements contribute no gradient).
template <typename S>
TensorOf<S> gaussian_interval_bits(const TensorOf<S>& z, const TensorOf<S>& sigma,
                                   RateStats* stats = nullptr) {
  detail::op_check(z.shape() == sigma.shape(), "gaussian_interval_bits",
                   "z and sigma shapes differ: " + shape_str(z.shape()) + " vs " + shape_str(sigma.shape()));
  const S* zv = z.data();
  const S* sv = sigma.data();
  const int64_t n = z.size();
  double bits = 0;
  int64_t clamped = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double s = static_cast<double>(sv[i]);
    const double a = (static_cast<double>(zv[i]) + 0.5) / s;
    const double b = (static_cast<double>(zv[i]) - 0.5) / s;
    double mass = detail::std_normal_cdf(a) - detail::std_normal_cdf(b);
    if (mass < detail::kMassFloor) {
      mass = detail::kMassFloor;
      ++clamped;
    }
    bits -= std::log2(mass);
  }
  if (stats) stats->clamped += clamped;
  return make_op<S>("gaussian_interval_bits", {}, {static_cast<S>(bits)}, {z, sigma},
                    [z, sigma, n](NodeOf<S>& self) {
                      const double g = static_cast<double>(self.grad[0]);
                      const S* zv = z.data();
                      const S* sv = sigma.data();
                      std::vector<S> gz, gs;
                      if (z.requires_grad()) gz.assign(static_cast<size_t>(n), S(0));
                      if (sigma.requires_grad()) gs.assign(static_cast<size_t>(n), S(0));
                      for (int64_t i = 0; i < n; ++i) {
                        const double s = static_cast<double>(sv[i]);
                        const double a = (static_cast<double>(zv[i]) + 0.5) / s;
                        const double b = (static_cast<double>(zv[i]) - 0.5) / s;
                        const double mass = detail::std_normal_cdf(a) - detail::std_normal_cdf(b);
                        if (mass < detail::kMassFloor) continue;
                        const double common = -g * detail::kInvLn2 / mass;
                        const double pa = detail::std_normal_pdf(a);
                        const double pb = detail::std_normal_pdf(b);
                        if (!gz.empty()) gz[static_cast<size_t>(i)] = static_cast<S>(common * (pa - pb) / s);
                        if (!gs.empty()) gs[static_cast<size_t>(i)] = static_cast<S>(common * (pb * b - pa * a) / s);
                      }
                      if (!gz.empty()) z.accumulate_grad(gz.data(), n);
                      if (!gs.empty()) sigma.accumulate_grad(gs.data(), n);
                    });
}

// Total bits to code z [N,C,H,W] under a per-channel logistic with learned
// location and log-scale (each [C]).
template <typename S>
TensorOf<S> logistic_interval_bits(const TensorOf<S>& z, const TensorOf<S>& loc,
                                   const TensorOf<S>& log_scale, RateStats* stats = nullptr) {
  detail::op_check(z.shape().size() == 4, "logistic_interval_bits", "z must be [N,C,H,W]");
  const int n = z.dim(0), c = z.dim(1);
  const int64_t m = static_cast<int64_t>(z.dim(2)) * z.dim(3);
  detail::op_check(loc.shape() == Shape{c} && log_scale.shape() == Shape{c},
                   "logistic_interval_bits", "loc/log_scale must be [C]");
  const S* zv = z.data();
  double bits = 0;
  int64_t clamped = 0;
  for (int in = 0; in < n; ++in) {
    for (int ic = 0; ic < c; ++ic) {
      const double mu = static_cast<double>(loc.vals()[static_cast<size_t>(ic)]);
      const double s = std::exp(static_cast<double>(log_scale.vals()[static_cast<size_t>(ic)]));
      const S* base = zv + (static_cast<int64_t>(in) * c + ic) * m;
      for (int64_t p = 0; p < m; ++p) {
        const double a = (static_cast<double>(base[p]) + 0.5 - mu) / s;
        const double b = (static_cast<double>(base[p]) - 0.5 - mu) / s;
        double mass = detail::logistic_cdf(a) - detail::logistic_cdf(b);
        if (mass < detail::kMassFloor) {
          mass = detail::kMassFloor;
          ++clamped;
        }
        bits -= std::log2(mass);
      }
    }
  }
  if (stats) stats->clamped += clamped;
  return make_op<S>(
      "logistic_interval_bits", {}, {static_cast<S>(bits)}, {z, loc, log_scale},
      [z, loc, log_scale, n, c, m](NodeOf<S>& self) {
        const double g = static_cast<double>(self.grad[0]);
        const S* zv = z.data();
        std::vector<S> gz;
        if (z.requires_grad()) gz.assign(static_cast<size_t>(z.size()), S(0));
        std::vector<S> gmu(static_cast<size_t>(c), S(0)), gls(static_cast<size_t>(c), S(0));
        for (int in = 0; in < n; ++in) {
          for (int ic = 0; ic < c; ++ic) {
            const double mu = static_cast<double>(loc.vals()[static_cast<size_t>(ic)]);
            const double s = std::exp(static_cast<double>(log_scale.vals()[static_cast<size_t>(ic)]));
            const S* base = zv + (static_cast<int64_t>(in) * c + ic) * m;
            for (int64_t p = 0; p < m; ++p) {
              const double a = (static_cast<double>(base[p]) + 0.5 - mu) / s;
              const double b = (static_cast<double>(base[p]) - 0.5 - mu) / s;
              const double ca = detail::logistic_cdf(a);
              const double cb = detail::logistic_cdf(b);
              const double mass = ca - cb;
              if (mass < detail::kMassFloor) continue;
              const double common = -g * detail::kInvLn2 / mass;
              const double pa = ca * (1.0 - ca);
              const double pb = cb * (1.0 - cb);
              if (!gz.empty()) {
                gz[static_cast<size_t>((static_cast<int64_t>(in) * c + ic) * m + p)] =
                    static_cast<S>(common * (pa - pb) / s);
              }
              gmu[static_cast<size_t>(ic)] += static_cast<S>(common * (pb - pa) / s);
              gls[static_cast<size_t>(ic)] += static_cast<S>(common * (pb * b - pa * a));
            }
          }
        }
        if (!gz.empty()) z.accumulate_grad(gz.data(), z.size());
        if (loc.requires_grad()) loc.accumulate_grad(gmu.data(), c);
        if (log_scale.requires_grad()) log_scale.accumulate_grad(gls.data(), c);
      });
}

// Train-mode quantization surrogate: adds a constant noise vector (drawn by
// the caller, uniform in [-0.5, 0.5)); gradient passes through unchanged.
template <typename S>
TensorOf<S> add_noise(const TensorOf<S>& z, const std::vector<S>& noise) {
  detail::op_check(static_cast<int64_t>(noise.size()) == z.size(), "add_noise",
                   "noise size mismatch");
  std::vector<S> out(z.vals());
  for (size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
  Shape shp = z.shape();
  return make_op<S>("add_noise", std::move(shp), std::move(out), {z}, [z](NodeOf<S>& self) {
    if (z.requires_grad())
      z.accumulate_grad(self.grad.data(), static_cast<int64_t>(self.grad.size()));
  });
}

// Eval-mode quantization: round half away from zero. Produces a detached
// leaf; there is no gradient path through rounding.
template <typename S>
TensorOf<S> round_latents(const TensorOf<S>& z) {
  std::vector<S> out(z.vals());
  for (auto& v : out) v = std::round(v);
  Shape shp = z.shape();
  return TensorOf<S>::from(std::move(shp), std::move(out));
}

// Stacks same-shape [C,H,W] samples picked by `order` into a detached
// [N,C,H,W] batch.
template <typename S>
TensorOf<S> stack_batch(const std::vector<TensorOf<S>>& items,
                        const std::vector<size_t>& order) {
  detail::op_check(!order.empty(), "stack_batch", "empty selection");
  const Shape& s0 = items.at(order[0]).shape();
  detail::op_check(s0.size() == 3, "stack_batch", "items must be [C,H,W]");
  const int64_t per = numel(s0);
  std::vector<S> out(static_cast<size_t>(per) * order.size());
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& t = items.at(order[i]);
    detail::op_check(t.shape() == s0, "stack_batch", "mixed item shapes");
    std::copy(t.vals().begin(), t.vals().end(), out.begin() + static_cast<int64_t>(i) * per);
  }
  return TensorOf<S>::from({static_cast<int>(order.size()), s0[0], s0[1], s0[2]},
                           std::move(out));
}

}  // namespace taskcodec
