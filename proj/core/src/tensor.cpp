#include "rvit/tensor.hpp"

namespace rvit {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d <= 0) throw ShapeError(cat("tensor: non-positive dim in ", shape_str(shape_)));
  }
  payload_ = std::make_shared<Payload>();
  payload_->values.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
    throw ShapeError(cat("tensor: ", values.size(), " values do not fill ", shape_str(shape_)));
  }
  payload_ = std::make_shared<Payload>();
  payload_->values = std::move(values);
}

Tensor Tensor::full(Shape shape, float v) {
  Tensor t(std::move(shape));
  for (auto& x : t.vec()) x = v;
  return t;
}

Tensor Tensor::row(std::vector<float> values) {
  Shape s{static_cast<int>(values.size())};
  return Tensor(std::move(s), std::move(values));
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= ndim()) throw ShapeError(cat("tensor: dim ", i, " out of range for ", shape_str(shape_)));
  return shape_[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return defined() ? static_cast<int64_t>(payload_->values.size()) : 0; }

float Tensor::scalar() const {
  if (numel() != 1) throw ShapeError(cat("tensor: scalar() on ", shape_str(shape_)));
  return payload_->values[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) {
    throw ShapeError(cat("tensor: at() with ", idx.size(), " indices on ", shape_str(shape_)));
  }
  int64_t off = 0;
  int i = 0;
  for (int v : idx) {
    if (v < 0 || v >= shape_[static_cast<size_t>(i)]) {
      throw ShapeError(cat("tensor: index ", v, " out of range on axis ", i, " of ", shape_str(shape_)));
    }
    off = off * shape_[static_cast<size_t>(i)] + v;
    ++i;
  }
  return payload_->values[static_cast<size_t>(off)];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.payload_ = std::make_shared<Payload>();
  t.payload_->values = payload_->values;
  return t;
}

}  // namespace rvit
