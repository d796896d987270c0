#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "taskcodec/common.hpp"

namespace taskcodec {

// Reverse-mode autodiff over dense row-major tensors. The graph is a DAG of
// nodes linked child -> parents; backward() walks it once in reverse
// topological order and then frees it, so each graph is single-use.

template <typename S>
class TensorOf;

template <typename S>
struct NodeOf {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set once backward() has run through this node
  std::vector<TensorOf<S>> parents;
  std::function<void(NodeOf<S>&)> backward_fn;
};

// Graph recording is on by default; NoGrad scopes turn it off for pure
// evaluation so no parents/closures are kept.
inline bool& grad_mode_ref() {
  thread_local bool on = true;
  return on;
}

struct NoGrad {
  bool prev;
  NoGrad() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGrad() { grad_mode_ref() = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// Finite checks after each op catch NaN/Inf at the op that produced it.
// Training loops may turn this off for throughput and instead watch the loss.
inline bool& finite_check_mode() {
  static bool on = true;
  return on;
}

template <typename S>
class TensorOf {
 public:
  TensorOf() = default;

  static TensorOf zeros(Shape shape) {
    TensorOf t;
    t.n_ = std::make_shared<NodeOf<S>>();
    t.n_->values.assign(static_cast<size_t>(numel(shape)), S(0));
    t.n_->shape = std::move(shape);
    return t;
  }

  static TensorOf full(Shape shape, S v) {
    TensorOf t = zeros(std::move(shape));
    std::fill(t.n_->values.begin(), t.n_->values.end(), v);
    return t;
  }

  static TensorOf from(Shape shape, std::vector<S> values) {
    check(static_cast<int64_t>(values.size()) == numel(shape),
          "tensor: value count " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
    TensorOf t;
    t.n_ = std::make_shared<NodeOf<S>>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    return t;
  }

  static TensorOf scalar(S v) { return from({}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t size() const { return static_cast<int64_t>(n_->values.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }

  std::vector<S>& vals() { return n_->values; }
  const std::vector<S>& vals() const { return n_->values; }
  S* data() { return n_->values.data(); }
  const S* data() const { return n_->values.data(); }

  S item() const {
    check(size() == 1, "tensor: item() on non-scalar " + shape_str(shape()));
    return n_->values[0];
  }

  TensorOf& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  std::vector<S>& grad() {
    check(has_grad(), "tensor: no gradient present");
    return n_->grad;
  }
  const std::vector<S>& grad() const {
    check(has_grad(), "tensor: no gradient present");
    return n_->grad;
  }
  void zero_grad() const { n_->grad.clear(); }

  // Node mutation through a const handle is deliberate: handles are shared
  // references, and backward closures hold const copies of their parents.
  void accumulate_grad(const S* g, int64_t count) const {
    check(count == size(), "tensor: gradient size mismatch");
    if (n_->grad.empty()) {
      n_->grad.assign(n_->values.size(), S(0));
    }
    S* dst = n_->grad.data();
    for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
  }

  // New leaf sharing nothing with the graph (values copied).
  TensorOf detach() const {
    Shape s = shape();
    return from(std::move(s), vals());
  }

  NodeOf<S>* node() const { return n_.get(); }

  // Backpropagate from a scalar root. Frees the graph as it goes: interior
  // parent links and closures are dropped, so a second backward() on the
  // same graph fails loudly instead of silently recomputing.
  void backward() {
    check(defined(), "backward: undefined tensor");
    check(size() == 1, "backward: root must be a scalar, got " + shape_str(shape()));
    NodeOf<S>* root = n_.get();
    check(!root->consumed, "backward: graph already consumed by a previous backward");
    check(root->requires_grad,
          "backward: root does not depend on any tensor requiring grad");

    // Post-order DFS; reversing it yields consumers-before-producers. The
    // order list holds owning handles: freeing a processed node's parent
    // links must not destroy nodes still waiting for their backward pass.
    std::vector<TensorOf<S>> order;
    std::unordered_set<NodeOf<S>*> seen;
    struct Frame {
      TensorOf<S> t;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({*this, 0});
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      NodeOf<S>* nd = f.t.node();
      if (f.next_parent < nd->parents.size()) {
        const TensorOf<S>& p = nd->parents[f.next_parent++];
        NodeOf<S>* pn = p.node();
        if (pn->consumed) {
          fail("backward: graph reuses a node already freed by backward");
        }
        if (pn->requires_grad && seen.insert(pn).second) {
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.t);
        stack.pop_back();
      }
    }

    root->grad.assign(1, S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeOf<S>* nd = it->node();
      if (nd->backward_fn && !nd->grad.empty()) {
        nd->backward_fn(*nd);
      }
      if (nd->backward_fn) {
        // Interior node: free edges, keep values (still readable).
        nd->backward_fn = nullptr;
        nd->parents.clear();
        nd->consumed = true;
        nd->grad.clear();
      }
    }
  }

 private:
  std::shared_ptr<NodeOf<S>> n_;
};

using Tensor = TensorOf<float>;
using Tensor64 = TensorOf<double>;

template <typename S>
void ensure_all_finite(const char* op, const TensorOf<S>& t) {
  const S* v = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      fail(std::string("runtime: non-finite value produced by op '") + op + "'");
    }
  }
}

// Common construction path for every differentiable op: wraps the freshly
// computed values, and only when grad recording is live does it keep parent
// links and the backward closure.
template <typename S>
TensorOf<S> make_op(const char* name, Shape shape, std::vector<S> values,
                    std::vector<TensorOf<S>> parents,
                    std::function<void(NodeOf<S>&)> backward_fn) {
  TensorOf<S> out = TensorOf<S>::from(std::move(shape), std::move(values));
  if (finite_check_mode()) ensure_all_finite(name, out);
  if (grad_mode_ref()) {
    bool need = false;
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        need = true;
        break;
      }
    }
    if (need) {
      auto* nd = out.node();
      nd->requires_grad = true;
      nd->parents = std::move(parents);
      nd->backward_fn = std::move(backward_fn);
    }
  }
  return out;
}

// Central-difference gradient checker. f must map the leaf tensors to a
// scalar. Returns the worst relative disagreement between the analytic
// gradient and (f(x+e)-f(x-e))/2e over every coordinate of every leaf.
template <typename S, typename F>
double grad_check(F&& f, std::vector<TensorOf<S>> inputs, double eps = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();  // stale accumulation from an earlier check would skew analytic
  }
  TensorOf<S> y = f(inputs);
  check(y.size() == 1, "grad_check: function must return a scalar");
  y.backward();

  std::vector<std::vector<S>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<S>(static_cast<size_t>(t.size()), S(0)));
    t.zero_grad();
  }

  NoGrad ng;
  double max_rel = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    std::vector<S>& v = inputs[i].vals();
    for (size_t j = 0; j < v.size(); ++j) {
      const S orig = v[j];
      v[j] = orig + static_cast<S>(eps);
      const double fp = static_cast<double>(f(inputs).item());
      v[j] = orig - static_cast<S>(eps);
      const double fm = static_cast<double>(f(inputs).item());
      v[j] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i][j]);
      const double scale = std::max({1e-6, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, std::abs(a - numeric) / scale);
    }
  }
  return max_rel;
}

// Sparse variant for big models: checks only the given coordinates of one
// leaf. f takes no arguments and must capture the leaf (and everything else)
// by reference so the coordinate perturbation is visible.
template <typename S, typename F>
double grad_check_at(F&& f, TensorOf<S> leaf, const std::vector<int64_t>& coords,
                     double eps = 1e-5) {
  leaf.set_requires_grad(true);
  leaf.zero_grad();  // stale accumulation from an earlier check would skew analytic
  TensorOf<S> y = f();
  check(y.size() == 1, "grad_check_at: function must return a scalar");
  y.backward();
  std::vector<S> analytic = leaf.has_grad()
                                ? leaf.grad()
                                : std::vector<S>(static_cast<size_t>(leaf.size()), S(0));
  leaf.zero_grad();

  NoGrad ng;
  double max_rel = 0.0;
  std::vector<S>& v = leaf.vals();
  for (int64_t j : coords) {
    const S orig = v[static_cast<size_t>(j)];
    v[static_cast<size_t>(j)] = orig + static_cast<S>(eps);
    const double fp = static_cast<double>(f().item());
    v[static_cast<size_t>(j)] = orig - static_cast<S>(eps);
    const double fm = static_cast<double>(f().item());
    v[static_cast<size_t>(j)] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[static_cast<size_t>(j)]);
    const double scale = std::max({1e-6, std::abs(a), std::abs(numeric)});
    max_rel = std::max(max_rel, std::abs(a - numeric) / scale);
  }
  return max_rel;
}

}  // namespace taskcodec
