/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle on a graph node. Operations build the graph only when
// gradient recording is enabled and at least one input requires a gradient;
// otherwise they return plain constants. Gradients are accumulated with
// backward() in reverse topological order.

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "timeflow/tensor.hpp"

namespace timeflow::ad {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph construction for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.data.empty()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }
  static Var scalar(T v) { return Var(Tensor<T>({1}, v)); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape; }
  Index size() const { return node_->value.size(); }
  T item() const { return node_->value.data.at(0); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() {
    if (!node_->grad.data.empty()) std::fill(node_->grad.data.begin(), node_->grad.data.end(), T{0});
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps an op result; records `backward` if any input participates in differentiation.
template <class T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <class T>
void accumulate(Node<T>& target, const Tensor<T>& g) {
  if (!target.requires_grad) return;
  auto& buf = target.grad_buffer();
  for (Index i = 0; i < g.size(); ++i) buf[i] += g[i];
}

/// Accumulates d(root)/d(leaf) into every reachable node. `root` must be a scalar.
template <class T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& seed = root.node()->grad_buffer();
  std::fill(seed.data.begin(), seed.data.end(), T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.data.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape);
  for (Index i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  Tensor<T> out(a.shape);
  for (Index i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value));
}

/// Same value, no gradient flows back through it.
template <class T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value());
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  return make_result<T>(detail::zip(a.value(), b.value(), std::plus<T>()), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    accumulate(*n.parents[1], n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  return make_result<T>(detail::zip(a.value(), b.value(), std::minus<T>()), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  return make_result<T>(detail::zip(a.value(), b.value(), std::multiplies<T>()), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "div");
  return make_result<T>(detail::zip(a.value(), b.value(), std::divides<T>()), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->grad_buffer();
      for (Index i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  return make_result<T>(detail::map(a.value(), [factor](T v) { return v * factor; }), {a},
                        [factor](Node<T>& n) {
                          auto& g = n.parents[0]->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) g[i] += n.grad[i] * factor;
                        });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  return make_result<T>(detail::map(a.value(), [offset](T v) { return v + offset; }), {a},
                        [](Node<T>& n) { accumulate(*n.parents[0], n.grad); });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return make_result<T>(detail::map(a.value(), [](T v) { return v * v; }), {a}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    auto& g = n.parents[0]->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) g[i] += T{2} * av[i] * n.grad[i];
  });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope = T{0.2}) {
  return make_result<T>(detail::map(a.value(), [slope](T v) { return v > 0 ? v : slope * v; }), {a},
                        [slope](Node<T>& n) {
                          const auto& av = n.parents[0]->value;
                          auto& g = n.parents[0]->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) g[i] += av[i] > 0 ? n.grad[i] : slope * n.grad[i];
                        });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return make_result<T>(detail::map(a.value(), [](T v) { return v / (T{1} + std::exp(-v)); }), {a},
                        [](Node<T>& n) {
                          const auto& av = n.parents[0]->value;
                          auto& g = n.parents[0]->grad_buffer();
                          for (Index i = 0; i < g.size(); ++i) {
                            const T s = T{1} / (T{1} + std::exp(-av[i]));
                            g[i] += n.grad[i] * s * (T{1} + av[i] * (T{1} - s));
                          }
                        });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data) acc += static_cast<double>(v);
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {a}, [](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (Index i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

/// Mean over voxels where mask > 0. `mask` has layout [1,1,Z,Y,X] (or matches `a`) and is
/// broadcast over batch and channels; the denominator counts every broadcast element.
template <class T>
Var<T> masked_mean(const Var<T>& a, const Tensor<T>& mask) {
  const Index total = a.size();
  const Index voxels = mask.size();
  if (voxels == 0 || total % voxels != 0) {
    throw DimensionError("masked_mean: mask " + to_string(mask.shape) + " incompatible with " +
                         to_string(a.shape()));
  }
  double count = 0.0;
  for (T m : mask.data) count += m > 0 ? 1.0 : 0.0;
  if (count == 0.0) throw DegenerateError("masked_mean: empty mask");
  const Index reps = total / voxels;
  count *= static_cast<double>(reps);
  double acc = 0.0;
  const auto& av = a.value();
  for (Index r = 0; r < reps; ++r) {
    for (Index i = 0; i < voxels; ++i) {
      if (mask[i] > 0) acc += static_cast<double>(av[r * voxels + i]);
    }
  }
  const T inv = static_cast<T>(1.0 / count);
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / count)), {a}, [mask, reps, voxels, inv](Node<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    const T gv = n.grad[0] * inv;
    for (Index r = 0; r < reps; ++r) {
      for (Index i = 0; i < voxels; ++i) {
        if (mask[i] > 0) g[r * voxels + i] += gv;
      }
    }
  });
}

/// Weighted sum of scalar vars.
template <class T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  Var<T> acc;
  for (const auto& [w, v] : terms) {
    Var<T> term = scale(v, w);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

}  // namespace timeflow::ad
