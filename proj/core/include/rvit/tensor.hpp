#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "rvit/common.hpp"

namespace rvit {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major f32 tensor. Copies are shallow: they share the underlying
// buffer, which is what lets optimizers update model weights in place and the
// tape save activations without copying. Gradient participation is expressed
// by a (tape id, node id) pair stored with the shared buffer, so watching any
// handle of a parameter marks every handle of it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, float v);
  static Tensor row(std::vector<float> values);  // rank-1

  bool defined() const { return static_cast<bool>(payload_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;
  int64_t numel() const;

  float* data() { return payload_->values.data(); }
  const float* data() const { return payload_->values.data(); }
  std::vector<float>& vec() { return payload_->values; }
  const std::vector<float>& vec() const { return payload_->values; }

  float scalar() const;
  float at(std::initializer_list<int> idx) const;

  // Deep copy; the result is untracked.
  Tensor clone() const;

  bool grad_enabled() const { return defined() && payload_->node >= 0; }
  int node_id() const { return defined() ? payload_->node : -1; }
  uint64_t tape_id() const { return defined() ? payload_->tape_id : 0; }
  // Stable identity of the shared buffer; gradient maps key on it so lookups
  // survive the tensor being re-watched on a later tape.
  const void* payload_key() const { return payload_.get(); }

 private:
  struct Payload {
    std::vector<float> values;
    uint64_t tape_id = 0;
    int node = -1;
  };

  Shape shape_;
  std::shared_ptr<Payload> payload_;

  friend class Tape;
};

}  // namespace rvit
