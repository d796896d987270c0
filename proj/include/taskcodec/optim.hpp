#pragma once

#include <cmath>
#include <vector>

#include "taskcodec/layers.hpp"

namespace taskcodec {

// Optimizers own a snapshot of the parameter list. step() reads each
// parameter's accumulated gradient (a parameter that received none this
// step is simply skipped, which is what frozen submodules rely on) and then
// applies any projection the parameter carries.

template <typename S>
class SgdT {
 public:
  SgdT(std::vector<Param<S>> params, double lr, double momentum = 0.0,
       double weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    vel_.resize(params_.size());
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() {
    for (auto& p : params_) p.t.zero_grad();
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.t.has_grad()) continue;
      auto& v = p.t.vals();
      auto& g = p.t.grad();
      if (momentum_ != 0.0) {
        if (vel_[i].empty()) vel_[i].assign(v.size(), S(0));
        for (size_t j = 0; j < v.size(); ++j) {
          S gj = g[j] + static_cast<S>(wd_) * v[j];
          vel_[i][j] = static_cast<S>(momentum_) * vel_[i][j] + gj;
          v[j] -= static_cast<S>(lr_) * vel_[i][j];
        }
      } else {
        for (size_t j = 0; j < v.size(); ++j) {
          S gj = g[j] + static_cast<S>(wd_) * v[j];
          v[j] -= static_cast<S>(lr_) * gj;
        }
      }
      if (p.project) p.project(v);
    }
  }

 private:
  std::vector<Param<S>> params_;
  double lr_, momentum_, wd_;
  std::vector<std::vector<S>> vel_;
};

template <typename S>
class AdamT {
 public:
  AdamT(std::vector<Param<S>> params, double lr, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() {
    for (auto& p : params_) p.t.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.t.has_grad()) continue;
      auto& w = p.t.vals();
      auto& g = p.t.grad();
      if (m_[i].empty()) {
        m_[i].assign(w.size(), S(0));
        v_[i].assign(w.size(), S(0));
      }
      for (size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
        const double mh = m_[i][j] / bc1;
        const double vh = v_[i][j] / bc2;
        w[j] -= static_cast<S>(lr_ * mh / (std::sqrt(vh) + eps_));
      }
      if (p.project) p.project(w);
    }
  }

 private:
  std::vector<Param<S>> params_;
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// lr * (1 - iter/max_iter)^power, the schedule used for segmentation
// fine-tuning.
inline double poly_decay(double base_lr, int64_t iter, int64_t max_iter, double power) {
  if (iter >= max_iter) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

// Tracks a training loss. A non-finite observation aborts the run; after
// training, decreased() compares the first and last quarters of the history
// so callers can assert the run made progress.
class LossMonitor {
 public:
  explicit LossMonitor(std::string label) : label_(std::move(label)) {}

  void observe(double loss) {
    if (!std::isfinite(loss)) {
      fail("runtime: " + label_ + " loss diverged (non-finite) at step " +
           std::to_string(history_.size()));
    }
    history_.push_back(loss);
    ema_ = history_.size() == 1 ? loss : 0.98 * ema_ + 0.02 * loss;
  }

  double smoothed() const { return ema_; }
  size_t steps() const { return history_.size(); }

  bool decreased() const {
    const size_t n = history_.size();
    if (n < 8) return true;  // too short to judge
    const size_t q = n / 4;
    double head = 0, tail = 0;
    for (size_t i = 0; i < q; ++i) head += history_[i];
    for (size_t i = n - q; i < n; ++i) tail += history_[i];
    return tail < head;
  }

 private:
  std::string label_;
  std::vector<double> history_;
  double ema_ = 0;
};

}  // namespace taskcodec
