#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "rvit/tensor.hpp"

namespace rvit {

enum class Op : uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Transpose,
  Reshape,
  SoftmaxLastDim,
  LayerNorm,
  Gelu,
  Mean,
  Sum,
  Mse,
  CrossEntropyLogits,
  Gather,
  Concat,
  Slice,
  Exp,
  Log,
  Sqrt,
  Patchify,
  Unpatchify,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Leaf;
  std::vector<int> ins;          // node ids, -1 for untracked inputs
  std::vector<Tensor> in_vals;   // saved input values (shared handles)
  Tensor out;
  float alpha = 0.0f;            // Scale factor
  int axis = 0, start = 0, len = 0;
  int ph = 0, pw = 0, pc = 0, pp = 0;  // image geometry for (un)patchify
  std::vector<int> index;        // Gather rows or CrossEntropy labels
};

// Gradients for every leaf, keyed by node id and by buffer identity.
struct GradMap {
  uint64_t tape_id = 0;
  std::unordered_map<int, Tensor> by_node;
  std::unordered_map<const void*, int> by_payload;

  bool contains(const Tensor& t) const;
  const Tensor& at(const Tensor& t) const;
};

// Reverse-mode tape over f32 tensors. Ops record themselves only when at
// least one input is tracked on this tape, so the same forward code serves
// both training and no-grad evaluation.
class Tape {
 public:
  enum class BackwardMode { standard, guided };

  Tape();

  void set_backward_mode(BackwardMode m) { mode_ = m; }
  BackwardMode backward_mode() const { return mode_; }
  uint64_t id() const { return id_; }
  size_t node_count() const { return nodes_.size(); }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

  // Registers t as a differentiable leaf. Idempotent per tape.
  Tensor& watch(Tensor& t);

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, float alpha);
  Tensor transpose(const Tensor& a);
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor softmax_lastdim(const Tensor& a);
  Tensor layernorm(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mse(const Tensor& a, const Tensor& b);
  Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels);
  Tensor gather(const Tensor& a, const std::vector<int>& rows);
  Tensor concat(const std::vector<Tensor>& xs, int axis);
  Tensor slice(const Tensor& a, int axis, int start, int len);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor sqrt(const Tensor& a);
  Tensor patchify(const Tensor& image, int patch);
  Tensor unpatchify(const Tensor& patches, int h, int w, int c, int patch);

  // Gradient of the scalar loss for every leaf. Requires standard mode.
  GradMap backward(const Tensor& loss);
  // Same walk with the guided rule at activation gates: the gradient arriving
  // at a GELU is zeroed wherever the forward output or the incoming gradient
  // is non-positive. Requires guided mode.
  GradMap guided_backward(const Tensor& loss);

  // Re-executes the recorded graph in f64 with leaf values optionally
  // overridden, returning the recomputed scalar value of target. This is the
  // evaluation route used by the finite-difference oracle.
  double replay_f64(const Tensor& target,
                    const std::unordered_map<int, std::vector<double>>& leaf_override) const;

 private:
  bool tracked(const Tensor& t) const { return t.tape_id() == id_ && t.node_id() >= 0; }
  int push(Node&& n, Tensor& out);
  GradMap run_backward(const Tensor& loss);

  uint64_t id_;
  BackwardMode mode_ = BackwardMode::standard;
  std::vector<Node> nodes_;
};

// Uniform entry point over the primitive op set keyed by Op, mainly to drive
// property suites that iterate over every primitive.
struct PrimitiveArgs {
  float alpha = 1.0f;
  Shape shape;
  int axis = 0, start = 0, len = 0;
  std::vector<int> index;
  int patch = 0, h = 0, w = 0, c = 0;
};

Tensor primitive_forward(Tape& tape, Op op, const std::vector<Tensor>& inputs,
                         const PrimitiveArgs& args = {});

}  // namespace rvit
