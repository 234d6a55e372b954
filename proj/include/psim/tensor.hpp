#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psim {

// Thrown by every tensor / graph operation on contract violations (shape
// mismatch, non-finite input, bad rank, ...). The message names the operation
// and the offending shapes so failures are attributable without a debugger.
struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. T is float for the 32-bit compute path and double
// for verification (gradient checks, oracles). Rank 0 = scalar, numel 1.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)) {
    int64_t n = shape_numel(shape);
    if (n < 0) throw TensorError("tensor: negative dimension in " + shape_str(shape));
    data.assign(static_cast<size_t>(n), T(0));
  }
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw TensorError("tensor: data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }

  static TensorT scalar(T v) {
    TensorT t{Shape{}};
    t.data[0] = v;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  T& at(std::initializer_list<int64_t> idx) {
    return data[flat_index(idx)];
  }
  T at(std::initializer_list<int64_t> idx) const {
    return data[flat_index(idx)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

 private:
  size_t flat_index(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw TensorError("tensor: index rank mismatch for " + shape_str(shape));
    size_t flat = 0;
    int i = 0;
    for (int64_t v : idx) {
      flat = flat * static_cast<size_t>(shape[i]) + static_cast<size_t>(v);
      ++i;
    }
    return flat;
  }
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& src) {
  TensorT<To> out{src.shape};
  for (int64_t i = 0; i < src.numel(); ++i)
    out.data[static_cast<size_t>(i)] = static_cast<To>(src.data[static_cast<size_t>(i)]);
  return out;
}

enum class Op {
  Leaf,
  MatMul,
  MatMulNT,  // a @ b^T
  Add,
  Mul,
  Relu,
  SoftmaxLast,  // optional appended zero logit
  LayerNorm,
  Sum,
  Mean,
  SquaredError,
  Scale,
  Concat,
  MaskFill,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Relu: return "relu";
    case Op::SoftmaxLast: return "softmax_lastdim";
    case Op::LayerNorm: return "layer_norm";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SquaredError: return "squared_error";
    case Op::Scale: return "scale";
    case Op::Concat: return "concat";
    case Op::MaskFill: return "mask_fill";
  }
  return "?";
}

// Non-tensor operands of a primitive.
template <typename T>
struct PrimitiveAttrs {
  T scalar = T(0);                  // Scale factor, MaskFill fill value
  int axis = -1;                    // Concat axis
  bool zero_logit = false;          // SoftmaxLast: append a zero logit per row
  const TensorT<uint8_t>* mask = nullptr;  // MaskFill: nonzero = fill
};

// Evaluates one primitive outside any graph. Same kernels the graph uses, so
// the semantics (including validation) cannot drift between the two paths.
template <typename T>
TensorT<T> eval_primitive(Op op, const std::vector<const TensorT<T>*>& inputs,
                          const PrimitiveAttrs<T>& attrs = {});

namespace detail {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
void require_finite(Op op, int input_index, const TensorT<T>& t) {
  if (!t.all_finite())
    throw TensorError(std::string(op_name(op)) + ": input " + std::to_string(input_index) +
                      " with shape " + shape_str(t.shape) + " contains a non-finite value");
}

[[noreturn]] inline void shape_fail(Op op, const std::string& what) {
  throw TensorError(std::string(op_name(op)) + ": " + what);
}

// Broadcast contract: either identical shapes, or the smaller operand's shape
// equals a suffix of the larger one (expansion over leading batch axes only).
// Returns true when *small points at b (also the case for equal shapes).
template <typename T>
bool check_broadcast_pair(Op op, const TensorT<T>& a, const TensorT<T>& b,
                          const TensorT<T>** big, const TensorT<T>** small) {
  if (a.shape == b.shape) {
    *big = &a;
    *small = &b;
    return true;
  }
  const TensorT<T>*hi = &a, *lo = &b;
  bool b_small = true;
  if (a.rank() < b.rank()) {
    hi = &b;
    lo = &a;
    b_small = false;
  } else if (a.rank() == b.rank()) {
    shape_fail(op, "shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                       " differ at equal rank; only leading-axis expansion is supported");
  }
  int off = hi->rank() - lo->rank();
  for (int i = 0; i < lo->rank(); ++i)
    if (hi->shape[static_cast<size_t>(i + off)] != lo->shape[static_cast<size_t>(i)])
      shape_fail(op, "shape " + shape_str(lo->shape) + " is not a trailing suffix of " +
                         shape_str(hi->shape));
  *big = hi;
  *small = lo;
  return b_small;
}

}  // namespace detail

}  // namespace psim
