#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sfda/errors.hpp"

namespace sfda {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// N-dimensional row-major array with an optional gradient buffer.
/// Value-semantic handle over shared storage: copies alias the same data,
/// clone() deep-copies. The scalar type is float in train mode and double
/// in the oracle/test suites.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    const std::size_t n = shape_numel(shape);
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->v.assign(n, S(0));
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.s_->v.begin(), t.s_->v.end(), value);
    return t;
  }

  static Tensor scalar(S value) { return full(Shape{}, value); }

  static Tensor from(Shape shape, std::vector<S> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->v = std::move(values);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape[i]; }
  std::size_t numel() const { return s_->v.size(); }

  std::vector<S>& values() { return s_->v; }
  const std::vector<S>& values() const { return s_->v; }
  S* data() { return s_->v.data(); }
  const S* data() const { return s_->v.data(); }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (!on) s_->g.clear();
    return *this;
  }

  /// Gradient buffer; allocated (zeroed) on first touch.
  std::vector<S>& grad() {
    if (!requires_grad()) {
      throw ContractError("grad: tensor does not require gradients");
    }
    if (s_->g.size() != s_->v.size()) s_->g.assign(s_->v.size(), S(0));
    return s_->g;
  }

  const std::vector<S>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  /// True once a gradient buffer exists (i.e. something accumulated into it
  /// or grad() was called).
  bool grad_allocated() const { return s_ && s_->g.size() == s_->v.size(); }

  /// Pointer to the gradient buffer, or nullptr when never touched.
  const S* grad_if_allocated() const {
    return grad_allocated() ? s_->g.data() : nullptr;
  }

  void zero_grad() {
    if (s_ && !s_->g.empty()) std::fill(s_->g.begin(), s_->g.end(), S(0));
  }

  void accumulate_grad(const S* g, std::size_t n) {
    auto& dst = grad();
    if (n != dst.size()) {
      throw ContractError("accumulate_grad: size mismatch");
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
  }

  S item() const {
    if (numel() != 1) {
      throw ContractError("item: tensor " + shape_str(shape()) +
                          " is not a scalar");
    }
    return s_->v[0];
  }

  S at(std::initializer_list<std::size_t> idx) const {
    return s_->v[flat_index(idx)];
  }

  S& at(std::initializer_list<std::size_t> idx) {
    return s_->v[flat_index(idx)];
  }

  /// Deep copy; the copy never aliases and carries no gradient buffer.
  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->v = s_->v;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(s_->v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<U>(s_->v[i]);
    }
    auto t = Tensor<U>::from(s_->shape, std::move(v));
    t.set_requires_grad(s_->requires_grad);
    return t;
  }

  /// Identity of the underlying storage; used to detect aliasing.
  const void* storage_id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<S> v;
    std::vector<S> g;
    bool requires_grad = false;
  };

  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != s_->shape.size()) {
      throw ContractError("at: rank mismatch");
    }
    std::size_t flat = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
      if (i >= s_->shape[d]) throw ContractError("at: index out of bounds");
      flat = flat * s_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  std::shared_ptr<Storage> s_;
};

template <class S>
bool all_finite(const Tensor<S>& t) {
  for (S x : t.values()) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

}  // namespace sfda
