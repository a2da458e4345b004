#include "rvit/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "rvit/kernels.hpp"

namespace rvit {

namespace {

std::atomic<uint64_t> g_tape_counter{0};

int64_t rows_of(const Tensor& t) {
  return t.ndim() == 0 ? 1 : t.numel() / t.dim(t.ndim() - 1);
}

int64_t lastdim_of(const Tensor& t) { return t.dim(t.ndim() - 1); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw ShapeError(cat(op, ": expected rank-2 tensor, got ", shape_str(t.shape())));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// Whether b broadcasts across rows of a: b rank-1 matching a's last dim.
bool row_broadcast(const Tensor& a, const Tensor& b) {
  return b.ndim() == 1 && a.ndim() >= 1 && b.dim(0) == a.dim(a.ndim() - 1) && !same_shape(a, b);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::SoftmaxLastDim: return "softmax_lastdim";
    case Op::LayerNorm: return "layernorm";
    case Op::Gelu: return "gelu";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::Mse: return "mse";
    case Op::CrossEntropyLogits: return "cross_entropy_logits";
    case Op::Gather: return "gather";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Patchify: return "patchify";
    case Op::Unpatchify: return "unpatchify";
  }
  return "?";
}

bool GradMap::contains(const Tensor& t) const {
  return by_payload.count(t.payload_key()) > 0;
}

const Tensor& GradMap::at(const Tensor& t) const {
  auto it = by_payload.find(t.payload_key());
  if (it == by_payload.end()) throw ValueError("gradient map: tensor is not a tracked leaf of this tape");
  return by_node.at(it->second);
}

Tape::Tape() : id_(++g_tape_counter) {}

Tensor& Tape::watch(Tensor& t) {
  if (!t.defined()) throw ValueError("watch: undefined tensor");
  if (tracked(t)) return t;
  Node n;
  n.op = Op::Leaf;
  n.out = t;
  t.payload_->tape_id = id_;
  t.payload_->node = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  return t;
}

int Tape::push(Node&& n, Tensor& out) {
  bool track = false;
  for (int id : n.ins) {
    if (id >= 0) {
      track = true;
      break;
    }
  }
  if (!track) return -1;
  out.payload_->tape_id = id_;
  out.payload_->node = static_cast<int>(nodes_.size());
  n.out = out;
  nodes_.push_back(std::move(n));
  return out.node_id();
}

namespace {

Node make_node(const Tape& tape, Op op, std::initializer_list<Tensor> ins) {
  Node n;
  n.op = op;
  for (const Tensor& t : ins) {
    n.ins.push_back(t.tape_id() == tape.id() ? t.node_id() : -1);
    n.in_vals.push_back(t);
  }
  return n;
}

}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError(cat("matmul: inner dims mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  }
  Tensor out(Shape{a.dim(0), b.dim(1)});
  kernels::matmul(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  Node n = make_node(*this, Op::MatMul, {a, b});
  push(std::move(n), out);
  return out;
}

namespace {

Tensor ew_forward(Tape& tape, Op op, kernels::EwOp k, const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  if (same_shape(a, b)) {
    kernels::elementwise(k, a.data(), b.data(), out.data(), a.numel());
  } else if (row_broadcast(a, b)) {
    kernels::elementwise_rowbcast(k, a.data(), b.data(), out.data(), rows_of(a), lastdim_of(a));
  } else {
    throw ShapeError(cat(op_name(op), ": shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()),
                         " neither match nor row-broadcast"));
  }
  return out;
}

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  Tensor out = ew_forward(*this, Op::Add, kernels::EwOp::Add, a, b);
  Node n = make_node(*this, Op::Add, {a, b});
  push(std::move(n), out);
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  Tensor out = ew_forward(*this, Op::Sub, kernels::EwOp::Sub, a, b);
  Node n = make_node(*this, Op::Sub, {a, b});
  push(std::move(n), out);
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  Tensor out = ew_forward(*this, Op::Mul, kernels::EwOp::Mul, a, b);
  Node n = make_node(*this, Op::Mul, {a, b});
  push(std::move(n), out);
  return out;
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError(cat("div: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " must match"));
  }
  Tensor out(a.shape());
  kernels::elementwise(kernels::EwOp::Div, a.data(), b.data(), out.data(), a.numel());
  Node n = make_node(*this, Op::Div, {a, b});
  push(std::move(n), out);
  return out;
}

Tensor Tape::scale(const Tensor& a, float alpha) {
  Tensor out(a.shape());
  kernels::scale(a.data(), out.data(), a.numel(), alpha);
  Node n = make_node(*this, Op::Scale, {a});
  n.alpha = alpha;
  push(std::move(n), out);
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor out(Shape{a.dim(1), a.dim(0)});
  kernels::transpose(a.data(), out.data(), a.dim(0), a.dim(1));
  Node n = make_node(*this, Op::Transpose, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError(cat("reshape: ", shape_str(a.shape()), " to ", shape_str(shape), " changes element count"));
  }
  Tensor out(shape, a.vec());
  Node n = make_node(*this, Op::Reshape, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("softmax_lastdim: rank-0 input");
  Tensor out(a.shape());
  kernels::softmax_lastdim(a.data(), out.data(), rows_of(a), lastdim_of(a));
  Node n = make_node(*this, Op::SoftmaxLastDim, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::layernorm(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("layernorm: rank-0 input");
  Tensor out(a.shape());
  kernels::layernorm(a.data(), out.data(), rows_of(a), lastdim_of(a));
  Node n = make_node(*this, Op::LayerNorm, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::gelu(const Tensor& a) {
  Tensor out(a.shape());
  kernels::gelu(a.data(), out.data(), a.numel());
  Node n = make_node(*this, Op::Gelu, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  Tensor out(Shape{1});
  out.data()[0] = static_cast<float>(kernels::reduce_sum(a.data(), a.numel()) / static_cast<double>(a.numel()));
  Node n = make_node(*this, Op::Mean, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::sum(const Tensor& a) {
  Tensor out(Shape{1});
  out.data()[0] = static_cast<float>(kernels::reduce_sum(a.data(), a.numel()));
  Node n = make_node(*this, Op::Sum, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::mse(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError(cat("mse: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()), " must match"));
  }
  Tensor out(Shape{1});
  out.data()[0] = static_cast<float>(kernels::mse_value(a.data(), b.data(), a.numel()));
  Node n = make_node(*this, Op::Mse, {a, b});
  push(std::move(n), out);
  return out;
}

Tensor Tape::cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
  require_rank2(logits, "cross_entropy_logits");
  if (static_cast<int>(labels.size()) != logits.dim(0)) {
    throw ShapeError(cat("cross_entropy_logits: ", labels.size(), " labels for ", logits.dim(0), " rows"));
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.dim(1)) {
      throw ShapeError(cat("cross_entropy_logits: label ", y, " out of range for ", logits.dim(1), " classes"));
    }
  }
  Tensor out(Shape{1});
  out.data()[0] =
      static_cast<float>(kernels::cross_entropy_value(logits.data(), labels.data(), logits.dim(0), logits.dim(1)));
  Node n = make_node(*this, Op::CrossEntropyLogits, {logits});
  n.index = labels;
  push(std::move(n), out);
  return out;
}

Tensor Tape::gather(const Tensor& a, const std::vector<int>& rows) {
  if (a.ndim() < 1) throw ShapeError("gather: rank-0 input");
  const int nrows = a.dim(0);
  for (int r : rows) {
    if (r < 0 || r >= nrows) throw ShapeError(cat("gather: row ", r, " out of range for ", shape_str(a.shape())));
  }
  Shape os = a.shape();
  os[0] = static_cast<int>(rows.size());
  Tensor out(os);
  kernels::gather_rows(a.data(), rows.data(), out.data(), static_cast<int>(rows.size()), a.numel() / nrows);
  Node n = make_node(*this, Op::Gather, {a});
  n.index = rows;
  push(std::move(n), out);
  return out;
}

Tensor Tape::concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError(cat("concat: axis ", axis, " unsupported"));
  if (axis == 0) {
    Shape tail = xs[0].shape();
    int total = 0;
    for (const Tensor& t : xs) {
      Shape s = t.shape();
      if (s.empty()) throw ShapeError("concat: rank-0 input");
      total += s[0];
      s[0] = tail[0];
      if (s != tail) throw ShapeError(cat("concat: trailing dims differ: ", shape_str(t.shape()), " vs ",
                                          shape_str(xs[0].shape())));
    }
    Shape os = xs[0].shape();
    os[0] = total;
    Tensor out(os);
    float* dst = out.data();
    for (const Tensor& t : xs) {
      std::copy(t.data(), t.data() + t.numel(), dst);
      dst += t.numel();
    }
    Node n;
    n.op = Op::Concat;
    n.axis = 0;
    for (const Tensor& t : xs) {
      n.ins.push_back(t.tape_id() == id_ ? t.node_id() : -1);
      n.in_vals.push_back(t);
    }
    push(std::move(n), out);
    return out;
  }
  // axis == 1: rank-2 column concat
  int rows = -1, cols = 0;
  for (const Tensor& t : xs) {
    require_rank2(t, "concat");
    if (rows < 0) rows = t.dim(0);
    if (t.dim(0) != rows) throw ShapeError(cat("concat: row counts differ: ", t.dim(0), " vs ", rows));
    cols += t.dim(1);
  }
  Tensor out(Shape{rows, cols});
  int off = 0;
  for (const Tensor& t : xs) {
    const int tc = t.dim(1);
    for (int i = 0; i < rows; ++i) {
      std::copy(t.data() + static_cast<int64_t>(i) * tc, t.data() + static_cast<int64_t>(i + 1) * tc,
                out.data() + static_cast<int64_t>(i) * cols + off);
    }
    off += tc;
  }
  Node n;
  n.op = Op::Concat;
  n.axis = 1;
  for (const Tensor& t : xs) {
    n.ins.push_back(t.tape_id() == id_ ? t.node_id() : -1);
    n.in_vals.push_back(t);
  }
  push(std::move(n), out);
  return out;
}

Tensor Tape::slice(const Tensor& a, int axis, int start, int len) {
  if (axis != 0 && axis != 1) throw ShapeError(cat("slice: axis ", axis, " unsupported"));
  if (axis == 1) require_rank2(a, "slice");
  if (a.ndim() < 1) throw ShapeError("slice: rank-0 input");
  const int extent = a.dim(axis);
  if (start < 0 || len <= 0 || start + len > extent) {
    throw ShapeError(cat("slice: range [", start, ",", start + len, ") out of [0,", extent, ") on ",
                         shape_str(a.shape())));
  }
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = len;
  Tensor out(os);
  if (axis == 0) {
    const int64_t cols = a.numel() / a.dim(0);
    std::copy(a.data() + start * cols, a.data() + (start + len) * cols, out.data());
  } else {
    const int rows = a.dim(0), cols = a.dim(1);
    for (int i = 0; i < rows; ++i)
      std::copy(a.data() + static_cast<int64_t>(i) * cols + start,
                a.data() + static_cast<int64_t>(i) * cols + start + len,
                out.data() + static_cast<int64_t>(i) * len);
  }
  Node n = make_node(*this, Op::Slice, {a});
  n.axis = axis;
  n.start = start;
  n.len = len;
  push(std::move(n), out);
  return out;
}

Tensor Tape::exp(const Tensor& a) {
  Tensor out(a.shape());
  kernels::unary_exp(a.data(), out.data(), a.numel());
  Node n = make_node(*this, Op::Exp, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::log(const Tensor& a) {
  Tensor out(a.shape());
  kernels::unary_log(a.data(), out.data(), a.numel());
  Node n = make_node(*this, Op::Log, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::sqrt(const Tensor& a) {
  Tensor out(a.shape());
  kernels::unary_sqrt(a.data(), out.data(), a.numel());
  Node n = make_node(*this, Op::Sqrt, {a});
  push(std::move(n), out);
  return out;
}

Tensor Tape::patchify(const Tensor& image, int patch) {
  if (image.ndim() != 3) throw ShapeError(cat("patchify: expected H x W x C image, got ", shape_str(image.shape())));
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError(cat("patchify: image ", h, "x", w, " not divisible by patch ", patch));
  }
  Tensor out(Shape{(h / patch) * (w / patch), patch * patch * c});
  kernels::patchify(image.data(), out.data(), h, w, c, patch);
  Node n = make_node(*this, Op::Patchify, {image});
  n.ph = h;
  n.pw = w;
  n.pc = c;
  n.pp = patch;
  push(std::move(n), out);
  return out;
}

Tensor Tape::unpatchify(const Tensor& patches, int h, int w, int c, int patch) {
  require_rank2(patches, "unpatchify");
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError(cat("unpatchify: target ", h, "x", w, " not divisible by patch ", patch));
  }
  if (patches.dim(0) != (h / patch) * (w / patch) || patches.dim(1) != patch * patch * c) {
    throw ShapeError(cat("unpatchify: patches ", shape_str(patches.shape()), " do not tile ", h, "x", w, "x", c,
                         " at patch ", patch));
  }
  Tensor out(Shape{h, w, c});
  kernels::unpatchify(patches.data(), out.data(), h, w, c, patch);
  Node n = make_node(*this, Op::Unpatchify, {patches});
  n.ph = h;
  n.pw = w;
  n.pc = c;
  n.pp = patch;
  push(std::move(n), out);
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

using DVec = std::vector<double>;

void axpy(DVec& dst, const DVec& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

GradMap Tape::backward(const Tensor& loss) {
  if (mode_ != BackwardMode::standard) throw ValueError("backward: tape is not in standard mode");
  return run_backward(loss);
}

GradMap Tape::guided_backward(const Tensor& loss) {
  if (mode_ != BackwardMode::guided) throw ValueError("guided_backward: tape is not in guided mode");
  return run_backward(loss);
}

GradMap Tape::run_backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ValueError(cat("backward: loss must be scalar, got ", shape_str(loss.shape())));
  if (!tracked(loss)) throw ValueError("backward: loss is not tracked on this tape");

  std::vector<DVec> grads(nodes_.size());
  grads[static_cast<size_t>(loss.node_id())] = DVec{1.0};

  auto grad_for = [&](int id, int64_t n) -> DVec& {
    DVec& g = grads[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(n), 0.0);
    return g;
  };

  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    const Node& nd = nodes_[static_cast<size_t>(i)];
    const DVec& g = grads[static_cast<size_t>(i)];
    if (g.empty() || nd.op == Op::Leaf) continue;

    auto want = [&](size_t slot) { return nd.ins[slot] >= 0; };

    switch (nd.op) {
      case Op::Leaf:
        break;
      case Op::MatMul: {
        const Tensor& a = nd.in_vals[0];
        const Tensor& b = nd.in_vals[1];
        const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (int r = 0; r < m; ++r)
            for (int t = 0; t < k; ++t) {
              double acc = 0.0;
              for (int j = 0; j < nn; ++j)
                acc += g[static_cast<size_t>(r) * nn + j] * static_cast<double>(b.data()[static_cast<int64_t>(t) * nn + j]);
              ga[static_cast<size_t>(r) * k + t] += acc;
            }
        }
        if (want(1)) {
          DVec& gb = grad_for(nd.ins[1], b.numel());
          for (int t = 0; t < k; ++t)
            for (int j = 0; j < nn; ++j) {
              double acc = 0.0;
              for (int r = 0; r < m; ++r)
                acc += static_cast<double>(a.data()[static_cast<int64_t>(r) * k + t]) * g[static_cast<size_t>(r) * nn + j];
              gb[static_cast<size_t>(t) * nn + j] += acc;
            }
        }
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        const Tensor& a = nd.in_vals[0];
        const Tensor& b = nd.in_vals[1];
        const bool bcast = row_broadcast(a, b);
        const int64_t cols = bcast ? lastdim_of(a) : 0;
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], a.numel());
          if (nd.op == Op::Mul) {
            for (int64_t e = 0; e < a.numel(); ++e) {
              double bv = bcast ? b.data()[e % cols] : b.data()[e];
              ga[static_cast<size_t>(e)] += g[static_cast<size_t>(e)] * bv;
            }
          } else {
            axpy(ga, g);
          }
        }
        if (want(1)) {
          DVec& gb = grad_for(nd.ins[1], b.numel());
          const double sign = nd.op == Op::Sub ? -1.0 : 1.0;
          if (bcast) {
            for (int64_t e = 0; e < a.numel(); ++e) {
              double v = g[static_cast<size_t>(e)];
              if (nd.op == Op::Mul) v *= static_cast<double>(a.data()[e]);
              gb[static_cast<size_t>(e % cols)] += sign * v;
            }
          } else {
            for (int64_t e = 0; e < b.numel(); ++e) {
              double v = g[static_cast<size_t>(e)];
              if (nd.op == Op::Mul) v *= static_cast<double>(a.data()[e]);
              gb[static_cast<size_t>(e)] += sign * v;
            }
          }
        }
        break;
      }
      case Op::Div: {
        const Tensor& a = nd.in_vals[0];
        const Tensor& b = nd.in_vals[1];
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (int64_t e = 0; e < a.numel(); ++e)
            ga[static_cast<size_t>(e)] += g[static_cast<size_t>(e)] / static_cast<double>(b.data()[e]);
        }
        if (want(1)) {
          DVec& gb = grad_for(nd.ins[1], b.numel());
          for (int64_t e = 0; e < b.numel(); ++e) {
            double bv = b.data()[e];
            gb[static_cast<size_t>(e)] -= g[static_cast<size_t>(e)] * static_cast<double>(a.data()[e]) / (bv * bv);
          }
        }
        break;
      }
      case Op::Scale: {
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], nd.in_vals[0].numel());
          for (size_t e = 0; e < g.size(); ++e) ga[e] += g[e] * static_cast<double>(nd.alpha);
        }
        break;
      }
      case Op::Transpose: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          const int m = a.dim(0), nn = a.dim(1);
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (int r = 0; r < m; ++r)
            for (int cjj = 0; cjj < nn; ++cjj)
              ga[static_cast<size_t>(r) * nn + cjj] += g[static_cast<size_t>(cjj) * m + r];
        }
        break;
      }
      case Op::Reshape: {
        if (want(0)) axpy(grad_for(nd.ins[0], nd.in_vals[0].numel()), g);
        break;
      }
      case Op::SoftmaxLastDim: {
        if (want(0)) {
          const Tensor& s = nd.out;
          const int64_t rows = rows_of(s), cols = lastdim_of(s);
          DVec& ga = grad_for(nd.ins[0], s.numel());
          for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t j = 0; j < cols; ++j)
              dot += g[static_cast<size_t>(r * cols + j)] * static_cast<double>(s.data()[r * cols + j]);
            for (int64_t j = 0; j < cols; ++j) {
              double sv = s.data()[r * cols + j];
              ga[static_cast<size_t>(r * cols + j)] += sv * (g[static_cast<size_t>(r * cols + j)] - dot);
            }
          }
        }
        break;
      }
      case Op::LayerNorm: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          const int64_t rows = rows_of(a), cols = lastdim_of(a);
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (int64_t r = 0; r < rows; ++r) {
            const float* x = a.data() + r * cols;
            double mu = 0.0;
            for (int64_t j = 0; j < cols; ++j) mu += x[j];
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
              double d = static_cast<double>(x[j]) - mu;
              var += d * d;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + kernels::kLayerNormEps);
            double gmean = 0.0, gxmean = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
              const double xh = (static_cast<double>(x[j]) - mu) * inv;
              const double gv = g[static_cast<size_t>(r * cols + j)];
              gmean += gv;
              gxmean += gv * xh;
            }
            gmean /= static_cast<double>(cols);
            gxmean /= static_cast<double>(cols);
            for (int64_t j = 0; j < cols; ++j) {
              const double xh = (static_cast<double>(x[j]) - mu) * inv;
              ga[static_cast<size_t>(r * cols + j)] +=
                  (g[static_cast<size_t>(r * cols + j)] - gmean - xh * gxmean) * inv;
            }
          }
        }
        break;
      }
      case Op::Gelu: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          DVec& ga = grad_for(nd.ins[0], a.numel());
          const bool guided = mode_ == BackwardMode::guided;
          for (int64_t e = 0; e < a.numel(); ++e) {
            double gv = g[static_cast<size_t>(e)];
            if (guided && (nd.out.data()[e] <= 0.0f || gv <= 0.0)) continue;
            ga[static_cast<size_t>(e)] += gv * kernels::gelu_derivative(static_cast<double>(a.data()[e]));
          }
        }
        break;
      }
      case Op::Mean: {
        if (want(0)) {
          const int64_t n = nd.in_vals[0].numel();
          DVec& ga = grad_for(nd.ins[0], n);
          const double v = g[0] / static_cast<double>(n);
          for (int64_t e = 0; e < n; ++e) ga[static_cast<size_t>(e)] += v;
        }
        break;
      }
      case Op::Sum: {
        if (want(0)) {
          const int64_t n = nd.in_vals[0].numel();
          DVec& ga = grad_for(nd.ins[0], n);
          for (int64_t e = 0; e < n; ++e) ga[static_cast<size_t>(e)] += g[0];
        }
        break;
      }
      case Op::Mse: {
        const Tensor& a = nd.in_vals[0];
        const Tensor& b = nd.in_vals[1];
        const int64_t n = a.numel();
        const double c0 = 2.0 * g[0] / static_cast<double>(n);
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], n);
          for (int64_t e = 0; e < n; ++e)
            ga[static_cast<size_t>(e)] += c0 * (static_cast<double>(a.data()[e]) - static_cast<double>(b.data()[e]));
        }
        if (want(1)) {
          DVec& gb = grad_for(nd.ins[1], n);
          for (int64_t e = 0; e < n; ++e)
            gb[static_cast<size_t>(e)] -= c0 * (static_cast<double>(a.data()[e]) - static_cast<double>(b.data()[e]));
        }
        break;
      }
      case Op::CrossEntropyLogits: {
        if (want(0)) {
          const Tensor& l = nd.in_vals[0];
          const int rows = l.dim(0), cols = l.dim(1);
          DVec& ga = grad_for(nd.ins[0], l.numel());
          const double gn = g[0] / static_cast<double>(rows);
          for (int r = 0; r < rows; ++r) {
            const float* x = l.data() + static_cast<int64_t>(r) * cols;
            double mx = x[0];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, static_cast<double>(x[j]));
            double sum = 0.0;
            for (int j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
            for (int j = 0; j < cols; ++j) {
              double p = std::exp(static_cast<double>(x[j]) - mx) / sum;
              if (j == nd.index[static_cast<size_t>(r)]) p -= 1.0;
              ga[static_cast<size_t>(r) * cols + j] += gn * p;
            }
          }
        }
        break;
      }
      case Op::Gather: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          const int64_t cols = a.numel() / a.dim(0);
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (size_t r = 0; r < nd.index.size(); ++r) {
            const int64_t src = static_cast<int64_t>(r) * cols;
            const int64_t dst = static_cast<int64_t>(nd.index[r]) * cols;
            for (int64_t j = 0; j < cols; ++j) ga[static_cast<size_t>(dst + j)] += g[static_cast<size_t>(src + j)];
          }
        }
        break;
      }
      case Op::Concat: {
        if (nd.axis == 0) {
          int64_t off = 0;
          for (size_t s = 0; s < nd.in_vals.size(); ++s) {
            const int64_t n = nd.in_vals[s].numel();
            if (nd.ins[s] >= 0) {
              DVec& gi = grad_for(nd.ins[s], n);
              for (int64_t e = 0; e < n; ++e) gi[static_cast<size_t>(e)] += g[static_cast<size_t>(off + e)];
            }
            off += n;
          }
        } else {
          const int rows = nd.out.dim(0), cols = nd.out.dim(1);
          int off = 0;
          for (size_t s = 0; s < nd.in_vals.size(); ++s) {
            const int tc = nd.in_vals[s].dim(1);
            if (nd.ins[s] >= 0) {
              DVec& gi = grad_for(nd.ins[s], nd.in_vals[s].numel());
              for (int r = 0; r < rows; ++r)
                for (int j = 0; j < tc; ++j)
                  gi[static_cast<size_t>(r) * tc + j] += g[static_cast<size_t>(r) * cols + off + j];
            }
            off += tc;
          }
        }
        break;
      }
      case Op::Slice: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          DVec& ga = grad_for(nd.ins[0], a.numel());
          if (nd.axis == 0) {
            const int64_t cols = a.numel() / a.dim(0);
            for (int64_t e = 0; e < nd.out.numel(); ++e)
              ga[static_cast<size_t>(nd.start * cols + e)] += g[static_cast<size_t>(e)];
          } else {
            const int rows = a.dim(0), cols = a.dim(1);
            for (int r = 0; r < rows; ++r)
              for (int j = 0; j < nd.len; ++j)
                ga[static_cast<size_t>(r) * cols + nd.start + j] += g[static_cast<size_t>(r) * nd.len + j];
          }
        }
        break;
      }
      case Op::Exp: {
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], nd.in_vals[0].numel());
          for (size_t e = 0; e < g.size(); ++e) ga[e] += g[e] * static_cast<double>(nd.out.data()[e]);
        }
        break;
      }
      case Op::Log: {
        if (want(0)) {
          const Tensor& a = nd.in_vals[0];
          DVec& ga = grad_for(nd.ins[0], a.numel());
          for (size_t e = 0; e < g.size(); ++e) ga[e] += g[e] / static_cast<double>(a.data()[e]);
        }
        break;
      }
      case Op::Sqrt: {
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], nd.in_vals[0].numel());
          for (size_t e = 0; e < g.size(); ++e) ga[e] += g[e] * 0.5 / static_cast<double>(nd.out.data()[e]);
        }
        break;
      }
      case Op::Patchify: {
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], nd.in_vals[0].numel());
          // Scatter through the inverse index map.
          std::vector<double> tmp(static_cast<size_t>(nd.in_vals[0].numel()), 0.0);
          kernels::unpatchify(g.data(), tmp.data(), nd.ph, nd.pw, nd.pc, nd.pp);
          axpy(ga, tmp);
        }
        break;
      }
      case Op::Unpatchify: {
        if (want(0)) {
          DVec& ga = grad_for(nd.ins[0], nd.in_vals[0].numel());
          std::vector<double> tmp(static_cast<size_t>(nd.in_vals[0].numel()), 0.0);
          kernels::patchify(g.data(), tmp.data(), nd.ph, nd.pw, nd.pc, nd.pp);
          axpy(ga, tmp);
        }
        break;
      }
    }
  }

  GradMap out;
  out.tape_id = id_;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op != Op::Leaf) continue;
    const Tensor& t = nodes_[i].out;
    Tensor gt(t.shape());
    const DVec& g = grads[i];
    if (!g.empty()) {
      for (int64_t e = 0; e < t.numel(); ++e) gt.data()[e] = static_cast<float>(g[static_cast<size_t>(e)]);
    }
    out.by_payload[t.payload_key()] = static_cast<int>(i);
    out.by_node.emplace(static_cast<int>(i), std::move(gt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// f64 replay
// ---------------------------------------------------------------------------

double Tape::replay_f64(const Tensor& target,
                        const std::unordered_map<int, std::vector<double>>& leaf_override) const {
  if (target.tape_id() != id_ || target.node_id() < 0) throw ValueError("replay: target not tracked on this tape");
  if (target.numel() != 1) throw ValueError("replay: target must be scalar");

  std::vector<DVec> vals(nodes_.size());
  auto input_val = [&](const Node& nd, size_t slot) -> DVec {
    const int id = nd.ins[slot];
    if (id >= 0) return vals[static_cast<size_t>(id)];
    const Tensor& t = nd.in_vals[slot];
    DVec v(static_cast<size_t>(t.numel()));
    for (int64_t e = 0; e < t.numel(); ++e) v[static_cast<size_t>(e)] = t.data()[e];
    return v;
  };

  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& nd = nodes_[i];
    if (nd.op == Op::Leaf) {
      auto it = leaf_override.find(static_cast<int>(i));
      if (it != leaf_override.end()) {
        vals[i] = it->second;
      } else {
        const Tensor& t = nd.out;
        vals[i].resize(static_cast<size_t>(t.numel()));
        for (int64_t e = 0; e < t.numel(); ++e) vals[i][static_cast<size_t>(e)] = t.data()[e];
      }
      continue;
    }
    DVec a = input_val(nd, 0);
    DVec out(static_cast<size_t>(nd.out.numel()), 0.0);
    switch (nd.op) {
      case Op::Leaf:
        break;
      case Op::MatMul: {
        DVec b = input_val(nd, 1);
        kernels::matmul(a.data(), b.data(), out.data(), nd.in_vals[0].dim(0), nd.in_vals[0].dim(1),
                        nd.in_vals[1].dim(1));
        break;
      }
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        DVec b = input_val(nd, 1);
        kernels::EwOp k = nd.op == Op::Add   ? kernels::EwOp::Add
                          : nd.op == Op::Sub ? kernels::EwOp::Sub
                          : nd.op == Op::Mul ? kernels::EwOp::Mul
                                             : kernels::EwOp::Div;
        if (row_broadcast(nd.in_vals[0], nd.in_vals[1])) {
          kernels::elementwise_rowbcast(k, a.data(), b.data(), out.data(), rows_of(nd.in_vals[0]),
                                        lastdim_of(nd.in_vals[0]));
        } else {
          kernels::elementwise(k, a.data(), b.data(), out.data(), static_cast<int64_t>(a.size()));
        }
        break;
      }
      case Op::Scale:
        kernels::scale(a.data(), out.data(), static_cast<int64_t>(a.size()), nd.alpha);
        break;
      case Op::Transpose:
        kernels::transpose(a.data(), out.data(), nd.in_vals[0].dim(0), nd.in_vals[0].dim(1));
        break;
      case Op::Reshape:
        out = a;
        break;
      case Op::SoftmaxLastDim:
        kernels::softmax_lastdim(a.data(), out.data(), rows_of(nd.in_vals[0]), lastdim_of(nd.in_vals[0]));
        break;
      case Op::LayerNorm:
        kernels::layernorm(a.data(), out.data(), rows_of(nd.in_vals[0]), lastdim_of(nd.in_vals[0]));
        break;
      case Op::Gelu:
        kernels::gelu(a.data(), out.data(), static_cast<int64_t>(a.size()));
        break;
      case Op::Mean:
        out[0] = kernels::reduce_sum(a.data(), static_cast<int64_t>(a.size())) / static_cast<double>(a.size());
        break;
      case Op::Sum:
        out[0] = kernels::reduce_sum(a.data(), static_cast<int64_t>(a.size()));
        break;
      case Op::Mse: {
        DVec b = input_val(nd, 1);
        out[0] = kernels::mse_value(a.data(), b.data(), static_cast<int64_t>(a.size()));
        break;
      }
      case Op::CrossEntropyLogits:
        out[0] = kernels::cross_entropy_value(a.data(), nd.index.data(), nd.in_vals[0].dim(0), nd.in_vals[0].dim(1));
        break;
      case Op::Gather:
        kernels::gather_rows(a.data(), nd.index.data(), out.data(), static_cast<int>(nd.index.size()),
                             nd.in_vals[0].numel() / nd.in_vals[0].dim(0));
        break;
      case Op::Concat: {
        if (nd.axis == 0) {
          int64_t off = 0;
          for (size_t s = 0; s < nd.in_vals.size(); ++s) {
            DVec v = input_val(nd, s);
            std::copy(v.begin(), v.end(), out.begin() + off);
            off += static_cast<int64_t>(v.size());
          }
        } else {
          const int rows = nd.out.dim(0), cols = nd.out.dim(1);
          int off = 0;
          for (size_t s = 0; s < nd.in_vals.size(); ++s) {
            DVec v = input_val(nd, s);
            const int tc = nd.in_vals[s].dim(1);
            for (int r = 0; r < rows; ++r)
              for (int j = 0; j < tc; ++j) out[static_cast<size_t>(r) * cols + off + j] = v[static_cast<size_t>(r) * tc + j];
            off += tc;
          }
        }
        break;
      }
      case Op::Slice: {
        if (nd.axis == 0) {
          const int64_t cols = nd.in_vals[0].numel() / nd.in_vals[0].dim(0);
          std::copy(a.begin() + nd.start * cols, a.begin() + (nd.start + nd.len) * cols, out.begin());
        } else {
          const int rows = nd.in_vals[0].dim(0), cols = nd.in_vals[0].dim(1);
          for (int r = 0; r < rows; ++r)
            for (int j = 0; j < nd.len; ++j)
              out[static_cast<size_t>(r) * nd.len + j] = a[static_cast<size_t>(r) * cols + nd.start + j];
        }
        break;
      }
      case Op::Exp:
        kernels::unary_exp(a.data(), out.data(), static_cast<int64_t>(a.size()));
        break;
      case Op::Log:
        kernels::unary_log(a.data(), out.data(), static_cast<int64_t>(a.size()));
        break;
      case Op::Sqrt:
        kernels::unary_sqrt(a.data(), out.data(), static_cast<int64_t>(a.size()));
        break;
      case Op::Patchify:
        kernels::patchify(a.data(), out.data(), nd.ph, nd.pw, nd.pc, nd.pp);
        break;
      case Op::Unpatchify:
        kernels::unpatchify(a.data(), out.data(), nd.ph, nd.pw, nd.pc, nd.pp);
        break;
    }
    vals[i] = std::move(out);
  }
  return vals[static_cast<size_t>(target.node_id())][0];
}

// ---------------------------------------------------------------------------
// Primitive dispatcher
// ---------------------------------------------------------------------------

Tensor primitive_forward(Tape& tape, Op op, const std::vector<Tensor>& inputs, const PrimitiveArgs& args) {
  auto need = [&](size_t n) {
    if (inputs.size() != n)
      throw ShapeError(cat(op_name(op), ": expected ", n, " inputs, got ", inputs.size()));
  };
  switch (op) {
    case Op::MatMul: need(2); return tape.matmul(inputs[0], inputs[1]);
    case Op::Add: need(2); return tape.add(inputs[0], inputs[1]);
    case Op::Sub: need(2); return tape.sub(inputs[0], inputs[1]);
    case Op::Mul: need(2); return tape.mul(inputs[0], inputs[1]);
    case Op::Div: need(2); return tape.div(inputs[0], inputs[1]);
    case Op::Scale: need(1); return tape.scale(inputs[0], args.alpha);
    case Op::Transpose: need(1); return tape.transpose(inputs[0]);
    case Op::Reshape: need(1); return tape.reshape(inputs[0], args.shape);
    case Op::SoftmaxLastDim: need(1); return tape.softmax_lastdim(inputs[0]);
    case Op::LayerNorm: need(1); return tape.layernorm(inputs[0]);
    case Op::Gelu: need(1); return tape.gelu(inputs[0]);
    case Op::Mean: need(1); return tape.mean(inputs[0]);
    case Op::Sum: need(1); return tape.sum(inputs[0]);
    case Op::Mse: need(2); return tape.mse(inputs[0], inputs[1]);
    case Op::CrossEntropyLogits: need(1); return tape.cross_entropy_logits(inputs[0], args.index);
    case Op::Gather: need(1); return tape.gather(inputs[0], args.index);
    case Op::Concat: return tape.concat(inputs, args.axis);
    case Op::Slice: need(1); return tape.slice(inputs[0], args.axis, args.start, args.len);
    case Op::Exp: need(1); return tape.exp(inputs[0]);
    case Op::Log: need(1); return tape.log(inputs[0]);
    case Op::Sqrt: need(1); return tape.sqrt(inputs[0]);
    case Op::Patchify: need(1); return tape.patchify(inputs[0], args.patch);
    case Op::Unpatchify: need(1); return tape.unpatchify(inputs[0], args.h, args.w, args.c, args.patch);
    case Op::Leaf: break;
  }
  throw ValueError(cat("primitive_forward: ", op_name(op), " is not dispatchable"));
}

}  // namespace rvit
