#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "taskcodec/ops.hpp"

namespace taskcodec {

// A named handle to one learnable tensor. Copies share the underlying node,
// so registries hand these out by value and optimizers mutate in place.
// `project` (if set) re-establishes a hard constraint after each step.
template <typename S>
struct Param {
  std::string name;
  TensorOf<S> t;
  std::function<void(std::vector<S>&)> project;
};

template <typename S>
uint64_t params_hash(const std::vector<Param<S>>& ps) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : ps) {
    h = fnv1a_str(p.name, h);
    h = fnv1a(p.t.vals().data(), p.t.vals().size() * sizeof(S), h);
  }
  return h;
}

template <typename S>
struct Conv2dT {
  TensorOf<S> w, b;
  int stride = 1, pad = 0;

  Conv2dT() = default;
  Conv2dT(int ci, int co, int k, int stride_, int pad_, bool bias, Rng rng)
      : stride(stride_), pad(pad_) {
    std::vector<S> wv(static_cast<size_t>(co) * ci * k * k);
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
    for (auto& v : wv) v = static_cast<S>(rng.normal() * std_dev);
    w = TensorOf<S>::from({co, ci, k, k}, std::move(wv));
    w.set_requires_grad(true);
    if (bias) {
      b = TensorOf<S>::zeros({co});
      b.set_requires_grad(true);
    }
  }

  TensorOf<S> operator()(const TensorOf<S>& x) const { return conv2d(x, w, b, stride, pad); }

  void params(const std::string& prefix, std::vector<Param<S>>& out) {
    out.push_back({prefix + ".w", w, nullptr});
    if (b.defined()) out.push_back({prefix + ".b", b, nullptr});
  }
};

template <typename S>
struct TransposedConv2dT {
  TensorOf<S> w, b;
  int stride = 1, pad = 0, out_pad = 0;

  TransposedConv2dT() = default;
  TransposedConv2dT(int ci, int co, int k, int stride_, int pad_, int out_pad_, bool bias,
                    Rng rng)
      : stride(stride_), pad(pad_), out_pad(out_pad_) {
    std::vector<S> wv(static_cast<size_t>(ci) * co * k * k);
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
    for (auto& v : wv) v = static_cast<S>(rng.normal() * std_dev);
    w = TensorOf<S>::from({ci, co, k, k}, std::move(wv));
    w.set_requires_grad(true);
    if (bias) {
      b = TensorOf<S>::zeros({co});
      b.set_requires_grad(true);
    }
  }

  TensorOf<S> operator()(const TensorOf<S>& x) const {
    return transposed_conv2d(x, w, b, stride, pad, out_pad);
  }

  void params(const std::string& prefix, std::vector<Param<S>>& out) {
    out.push_back({prefix + ".w", w, nullptr});
    if (b.defined()) out.push_back({prefix + ".b", b, nullptr});
  }
};

// GDN / IGDN. beta stays >= 1e-6 and gamma >= 0 via projection; init is the
// customary beta = 1, gamma = 0.1 * I.
template <typename S>
struct GdnT {
  TensorOf<S> beta, gamma;
  bool inverse = false;

  GdnT() = default;
  GdnT(int c, bool inverse_) : inverse(inverse_) {
    beta = TensorOf<S>::full({c}, S(1));
    beta.set_requires_grad(true);
    std::vector<S> g(static_cast<size_t>(c) * c, S(0));
    for (int i = 0; i < c; ++i) g[static_cast<size_t>(i) * c + i] = S(0.1);
    gamma = TensorOf<S>::from({c, c}, std::move(g));
    gamma.set_requires_grad(true);
  }

  TensorOf<S> operator()(const TensorOf<S>& x) const { return gdn(x, beta, gamma, inverse); }

  void params(const std::string& prefix, std::vector<Param<S>>& out) {
    out.push_back({prefix + ".beta", beta, [](std::vector<S>& v) {
                     for (auto& x : v) x = std::max(x, S(1e-6));
                   }});
    out.push_back({prefix + ".gamma", gamma, [](std::vector<S>& v) {
                     for (auto& x : v) x = std::max(x, S(0));
                   }});
  }
};

template <typename S>
struct LinearT {
  TensorOf<S> w, b;

  LinearT() = default;
  LinearT(int in, int out, Rng rng) {
    std::vector<S> wv(static_cast<size_t>(out) * in);
    const double std_dev = std::sqrt(2.0 / in);
    for (auto& v : wv) v = static_cast<S>(rng.normal() * std_dev);
    w = TensorOf<S>::from({out, in}, std::move(wv));
    w.set_requires_grad(true);
    b = TensorOf<S>::zeros({out});
    b.set_requires_grad(true);
  }

  TensorOf<S> operator()(const TensorOf<S>& x) const { return linear(x, w, b); }

  void params(const std::string& prefix, std::vector<Param<S>>& out) {
    out.push_back({prefix + ".w", w, nullptr});
    out.push_back({prefix + ".b", b, nullptr});
  }
};

}  // namespace taskcodec
