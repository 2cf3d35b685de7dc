// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "moepeft/errors.hpp"
#include "moepeft/rng.hpp"

namespace moepeft {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until backward() reaches this tensor
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that recorded the producing op
};

inline void ensure_grad(TensorImpl& t) {
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0f);
}
}  // namespace detail

// Dense row-major float32 tensor. Value-semantics handle over shared storage;
// storage is written only at construction, by the optimizer, and by gradient
// accumulation during backward.
class Tensor {
 public:
  Tensor() = default;

  static void validate_shape(const Shape& shape) {
    for (int d : shape) {
      if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    }
  }

  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    validate_shape(shape);
    std::vector<float> d(static_cast<std::size_t>(shape_numel(shape)), value);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0f, requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0f, requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor randn(Shape shape, RngStream& rng, float stddev = 1.0f,
                      bool requires_grad = false) {
    std::vector<float> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : d) v = rng.normal() * stddev;
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& raw() { return impl_->data; }
  const std::vector<float>& raw() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<float>& grad() const {
    if (impl_->grad.empty()) throw ContractError("tensor has no gradient");
    return impl_->grad;
  }
  std::vector<float>& grad_ref() {
    detail::ensure_grad(*impl_);
    return impl_->grad;
  }
  void clear_grad() { impl_->grad.clear(); }

  float item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  // Deep copy; grad state is not copied.
  Tensor clone(bool requires_grad = false) const {
    return from_data(impl_->shape, impl_->data, requires_grad);
  }

  // Identity of the underlying storage, used by the tape and checksums.
  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace moepeft
