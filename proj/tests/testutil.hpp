#pragma once

// Shared helpers for the test suites: numeric differentiation in double
// precision and small tensor factories.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "taskcodec/common.hpp"
#include "taskcodec/tensor.hpp"

namespace testutil {

using taskcodec::Rng;
using taskcodec::TensorOf;
using Tensor64 = taskcodec::TensorOf<double>;

inline Tensor64 random_tensor(taskcodec::Shape shape, Rng& rng, double scale = 1.0) {
  auto t = Tensor64::zeros(std::move(shape));
  for (auto& v : t.vals()) v = rng.normal() * scale;
  return t;
}

inline Tensor64 uniform_tensor(taskcodec::Shape shape, Rng& rng, double lo, double hi) {
  auto t = Tensor64::zeros(std::move(shape));
  for (auto& v : t.vals()) v = rng.uniform(lo, hi);
  return t;
}

// Central-difference gradient check against reverse mode. `loss` must build
// a fresh graph on every call (graphs are single-use). Relative error is
// measured against max(1, |analytic|, |numeric|) so tiny gradients do not
// blow up the ratio.
inline void check_gradients(const std::string& label, std::vector<Tensor64> inputs,
                            const std::function<Tensor64()>& loss, double tol = 1e-4,
                            double step = 1e-5) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor64 out = loss();
  REQUIRE_MESSAGE(out.size() == 1, label, ": loss must be scalar");
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    REQUIRE_MESSAGE(in.has_grad(), label, ": input missing gradient");
    analytic.push_back(in.grad());
  }

  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& vals = inputs[t].vals();
    for (size_t j = 0; j < vals.size(); ++j) {
      const double keep = vals[j];
      const double h = step * std::max(1.0, std::fabs(keep));
      vals[j] = keep + h;
      const double up = loss().item();
      vals[j] = keep - h;
      const double down = loss().item();
      vals[j] = keep;
      const double numeric = (up - down) / (2 * h);
      const double got = analytic[t][j];
      const double rel =
          std::fabs(got - numeric) / std::max({1.0, std::fabs(got), std::fabs(numeric)});
      REQUIRE_MESSAGE(rel < tol, label, ": input ", t, " element ", j, " analytic ", got,
                      " numeric ", numeric, " rel ", rel);
    }
  }
}

}  // namespace testutil
