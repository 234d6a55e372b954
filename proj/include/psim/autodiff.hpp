#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "psim/tensor.hpp"

namespace psim {
namespace detail {

// c[M,N] += op(a)[M,K] * op(b)[K,N].  a is stored [K,M] when ta, b is stored
// [N,K] when tb.  Loop orders keep the innermost walk contiguous.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t M, int64_t N, int64_t K, bool ta, bool tb) {
  if (!ta && !tb) {
    for (int64_t i = 0; i < M; ++i)
      for (int64_t k = 0; k < K; ++k) {
        T av = a[i * K + k];
        const T* brow = b + k * N;
        T* crow = c + i * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
  } else if (!ta && tb) {
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) {
        T s = 0;
        const T* arow = a + i * K;
        const T* brow = b + j * K;
        for (int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
        c[i * N + j] += s;
      }
  } else if (ta && !tb) {
    for (int64_t k = 0; k < K; ++k) {
      const T* arow = a + k * M;
      const T* brow = b + k * N;
      for (int64_t i = 0; i < M; ++i) {
        T av = arow[i];
        T* crow = c + i * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) {
        T s = 0;
        for (int64_t k = 0; k < K; ++k) s += a[k * M + i] * b[j * K + k];
        c[i * N + j] += s;
      }
  }
}

struct MatDims {
  int64_t batch;  // 1 when both operands are rank 2
  int64_t m, n, k;
  bool a_batched, b_batched;
};

template <typename T>
MatDims matmul_dims(Op op, const TensorT<T>& a, const TensorT<T>& b, bool nt) {
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3)
    shape_fail(op, "operands must have rank 2 or 3, got " + shape_str(a.shape) + " and " +
                       shape_str(b.shape));
  MatDims d{};
  d.a_batched = a.rank() == 3;
  d.b_batched = b.rank() == 3;
  if (d.b_batched && !d.a_batched)
    shape_fail(op, "rank-2 left operand with rank-3 right operand is not supported");
  d.batch = d.a_batched ? a.shape[0] : 1;
  if (d.b_batched && b.shape[0] != d.batch)
    shape_fail(op, "batch mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  d.m = a.shape[static_cast<size_t>(a.rank()) - 2];
  d.k = a.shape[static_cast<size_t>(a.rank()) - 1];
  int64_t bk = nt ? b.shape[static_cast<size_t>(b.rank()) - 1]
                  : b.shape[static_cast<size_t>(b.rank()) - 2];
  d.n = nt ? b.shape[static_cast<size_t>(b.rank()) - 2]
           : b.shape[static_cast<size_t>(b.rank()) - 1];
  if (bk != d.k)
    shape_fail(op, "inner dimension mismatch: " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape) + (nt ? " (transposed)" : ""));
  return d;
}

template <typename T>
TensorT<T> k_matmul(const TensorT<T>& a, const TensorT<T>& b, bool nt) {
  Op op = nt ? Op::MatMulNT : Op::MatMul;
  require_finite(op, 0, a);
  require_finite(op, 1, b);
  MatDims d = matmul_dims(op, a, b, nt);
  Shape out_shape = d.a_batched ? Shape{d.batch, d.m, d.n} : Shape{d.m, d.n};
  TensorT<T> out{out_shape};
  int64_t a_stride = d.m * d.k;
  int64_t b_stride = d.b_batched ? d.k * d.n : 0;
  int64_t c_stride = d.m * d.n;
  for (int64_t bb = 0; bb < d.batch; ++bb)
    gemm_acc(a.data.data() + bb * a_stride, b.data.data() + bb * b_stride,
             out.data.data() + bb * c_stride, d.m, d.n, d.k, false, nt);
  return out;
}

template <typename T>
TensorT<T> k_ewise(Op op, const TensorT<T>& a, const TensorT<T>& b) {
  require_finite(op, 0, a);
  require_finite(op, 1, b);
  const TensorT<T>*big, *small;
  check_broadcast_pair(op, a, b, &big, &small);
  bool add = op == Op::Add;
  TensorT<T> out{big->shape};
  int64_t period = small->numel();
  int64_t n = big->numel();
  const T* bp = big->data.data();
  const T* sp = small->data.data();
  T* op_ = out.data.data();
  for (int64_t i = 0; i < n; ++i) {
    T sv = sp[i % period];
    op_[i] = add ? bp[i] + sv : bp[i] * sv;
  }
  return out;
}

template <typename T>
TensorT<T> k_relu(const TensorT<T>& a) {
  require_finite(Op::Relu, 0, a);
  TensorT<T> out{a.shape};
  for (int64_t i = 0; i < a.numel(); ++i) {
    T v = a.data[static_cast<size_t>(i)];
    out.data[static_cast<size_t>(i)] = v > T(0) ? v : T(0);
  }
  return out;
}

// Softmax over the last axis.  -inf logits are legal here (they are the mask
// convention and get exactly zero weight); NaN and +inf are rejected.  With
// zero_logit set, a constant 0 is appended to every row before the max shift,
// its exp joins the denominator, and the output keeps only the real slots, so
// rows sum to strictly less than one.
template <typename T>
TensorT<T> k_softmax_last(const TensorT<T>& a, bool zero_logit) {
  if (a.rank() < 1) shape_fail(Op::SoftmaxLast, "rank must be at least 1");
  for (T v : a.data) {
    double dv = static_cast<double>(v);
    if (std::isnan(dv) || dv == std::numeric_limits<double>::infinity())
      throw TensorError("softmax_lastdim: input contains NaN or +inf");
  }
  int64_t cols = a.shape[static_cast<size_t>(a.rank()) - 1];
  int64_t rows = a.numel() / cols;
  TensorT<T> out{a.shape};
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a.data.data() + r * cols;
    T* y = out.data.data() + r * cols;
    T mx = zero_logit ? T(0) : -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
    if (!std::isfinite(static_cast<double>(mx)))
      throw TensorError("softmax_lastdim: row " + std::to_string(r) + " has no finite entry");
    T denom = zero_logit ? std::exp(T(0) - mx) : T(0);
    for (int64_t j = 0; j < cols; ++j) {
      T e = std::isinf(static_cast<double>(x[j])) ? T(0) : std::exp(x[j] - mx);
      y[j] = e;
      denom += e;
    }
    for (int64_t j = 0; j < cols; ++j) y[j] /= denom;
  }
  return out;
}

template <typename T>
TensorT<T> k_layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                        std::vector<T>* mean_out, std::vector<T>* rstd_out) {
  require_finite(Op::LayerNorm, 0, x);
  require_finite(Op::LayerNorm, 1, gain);
  require_finite(Op::LayerNorm, 2, bias);
  if (x.rank() < 1) shape_fail(Op::LayerNorm, "rank must be at least 1");
  int64_t cols = x.shape[static_cast<size_t>(x.rank()) - 1];
  if (gain.shape != Shape{cols} || bias.shape != Shape{cols})
    shape_fail(Op::LayerNorm, "gain/bias must have shape [" + std::to_string(cols) + "], got " +
                                  shape_str(gain.shape) + " and " + shape_str(bias.shape));
  int64_t rows = x.numel() / cols;
  TensorT<T> out{x.shape};
  mean_out->assign(static_cast<size_t>(rows), T(0));
  rstd_out->assign(static_cast<size_t>(rows), T(0));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xp = x.data.data() + r * cols;
    T* yp = out.data.data() + r * cols;
    T mu = 0;
    for (int64_t j = 0; j < cols; ++j) mu += xp[j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (int64_t j = 0; j < cols; ++j) {
      T d = xp[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    (*mean_out)[static_cast<size_t>(r)] = mu;
    (*rstd_out)[static_cast<size_t>(r)] = rstd;
    for (int64_t j = 0; j < cols; ++j)
      yp[j] = (xp[j] - mu) * rstd * gain.data[static_cast<size_t>(j)] +
              bias.data[static_cast<size_t>(j)];
  }
  return out;
}

template <typename T>
TensorT<T> k_reduce(Op op, const TensorT<T>& a) {
  require_finite(op, 0, a);
  T acc = 0;
  for (T v : a.data) acc += v;
  if (op == Op::Mean) acc /= static_cast<T>(a.numel());
  return TensorT<T>::scalar(acc);
}

template <typename T>
TensorT<T> k_sqerr(const TensorT<T>& a, const TensorT<T>& b) {
  require_finite(Op::SquaredError, 0, a);
  require_finite(Op::SquaredError, 1, b);
  if (!a.same_shape(b))
    shape_fail(Op::SquaredError,
               "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  T acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    T d = a.data[static_cast<size_t>(i)] - b.data[static_cast<size_t>(i)];
    acc += d * d;
  }
  return TensorT<T>::scalar(acc);
}

template <typename T>
TensorT<T> k_scale(const TensorT<T>& a, T s) {
  require_finite(Op::Scale, 0, a);
  if (!std::isfinite(static_cast<double>(s)))
    throw TensorError("scale: factor is non-finite");
  TensorT<T> out{a.shape};
  for (int64_t i = 0; i < a.numel(); ++i)
    out.data[static_cast<size_t>(i)] = a.data[static_cast<size_t>(i)] * s;
  return out;
}

struct ConcatDims {
  int64_t outer, a_ax, b_ax, inner;
};

template <typename T>
ConcatDims concat_dims(const TensorT<T>& a, const TensorT<T>& b, int axis) {
  if (a.rank() != b.rank()) shape_fail(Op::Concat, "rank mismatch");
  if (axis < 0 || axis >= a.rank())
    shape_fail(Op::Concat, "axis " + std::to_string(axis) + " out of range for rank " +
                               std::to_string(a.rank()));
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.shape[static_cast<size_t>(i)] != b.shape[static_cast<size_t>(i)])
      shape_fail(Op::Concat, "shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                                 " differ off the concat axis");
  ConcatDims d{1, a.shape[static_cast<size_t>(axis)], b.shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) d.outer *= a.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < a.rank(); ++i) d.inner *= a.shape[static_cast<size_t>(i)];
  return d;
}

template <typename T>
TensorT<T> k_concat(const TensorT<T>& a, const TensorT<T>& b, int axis) {
  require_finite(Op::Concat, 0, a);
  require_finite(Op::Concat, 1, b);
  ConcatDims d = concat_dims(a, b, axis);
  Shape out_shape = a.shape;
  out_shape[static_cast<size_t>(axis)] = d.a_ax + d.b_ax;
  TensorT<T> out{out_shape};
  for (int64_t o = 0; o < d.outer; ++o) {
    T* dst = out.data.data() + o * (d.a_ax + d.b_ax) * d.inner;
    std::copy_n(a.data.data() + o * d.a_ax * d.inner, d.a_ax * d.inner, dst);
    std::copy_n(b.data.data() + o * d.b_ax * d.inner, d.b_ax * d.inner, dst + d.a_ax * d.inner);
  }
  return out;
}

template <typename T>
TensorT<T> k_mask_fill(const TensorT<T>& a, const TensorT<uint8_t>& mask, T fill) {
  require_finite(Op::MaskFill, 0, a);
  if (std::isnan(static_cast<double>(fill)))
    throw TensorError("mask_fill: fill value is NaN");
  const TensorT<T>*big, *small;
  // Reuse the suffix-broadcast check by matching shapes only.
  TensorT<T> mask_shape_probe{mask.shape};
  check_broadcast_pair(Op::MaskFill, a, mask_shape_probe, &big, &small);
  if (big != &a) shape_fail(Op::MaskFill, "mask may not outrank the input");
  int64_t period = mask_shape_probe.numel();
  TensorT<T> out{a.shape};
  for (int64_t i = 0; i < a.numel(); ++i)
    out.data[static_cast<size_t>(i)] =
        mask.data[static_cast<size_t>(i % period)] ? fill : a.data[static_cast<size_t>(i)];
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> eval_primitive(Op op, const std::vector<const TensorT<T>*>& in,
                          const PrimitiveAttrs<T>& attrs) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      throw TensorError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                        " inputs, got " + std::to_string(in.size()));
  };
  std::vector<T> scratch_mean, scratch_rstd;
  switch (op) {
    case Op::MatMul: need(2); return detail::k_matmul(*in[0], *in[1], false);
    case Op::MatMulNT: need(2); return detail::k_matmul(*in[0], *in[1], true);
    case Op::Add:
    case Op::Mul: need(2); return detail::k_ewise(op, *in[0], *in[1]);
    case Op::Relu: need(1); return detail::k_relu(*in[0]);
    case Op::SoftmaxLast: need(1); return detail::k_softmax_last(*in[0], attrs.zero_logit);
    case Op::LayerNorm:
      need(3);
      return detail::k_layer_norm(*in[0], *in[1], *in[2], &scratch_mean, &scratch_rstd);
    case Op::Sum:
    case Op::Mean: need(1); return detail::k_reduce(op, *in[0]);
    case Op::SquaredError: need(2); return detail::k_sqerr(*in[0], *in[1]);
    case Op::Scale: need(1); return detail::k_scale(*in[0], attrs.scalar);
    case Op::Concat: need(2); return detail::k_concat(*in[0], *in[1], attrs.axis);
    case Op::MaskFill:
      need(1);
      if (!attrs.mask) throw TensorError("mask_fill: no mask supplied");
      return detail::k_mask_fill(*in[0], *attrs.mask, attrs.scalar);
    case Op::Leaf: throw TensorError("leaf is not evaluable");
  }
  throw TensorError("unknown primitive");
}

// Reverse-mode tape.  Nodes are appended in construction order, which is a
// topological order by definition, so backward is a single reverse sweep.
template <typename T>
class GraphT {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    TensorT<T> value;
    TensorT<T> grad;  // allocated by backward() for nodes that require grad
    bool requires_grad = false;
    std::string name;
    // attrs / saved context
    T scalar = 0;
    int axis = -1;
    bool zero_logit = false;
    TensorT<uint8_t> mask;
    std::vector<T> ln_mean, ln_rstd;
  };

  int leaf(TensorT<T> value, bool requires_grad = false, std::string name = {}) {
    if (!value.all_finite())
      throw TensorError("leaf '" + name + "' with shape " + shape_str(value.shape) +
                        " contains a non-finite value");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int matmul(int a, int b) { return binary(Op::MatMul, a, b); }
  int matmul_nt(int a, int b) { return binary(Op::MatMulNT, a, b); }
  int add(int a, int b) { return binary(Op::Add, a, b); }
  int mul(int a, int b) { return binary(Op::Mul, a, b); }

  int relu(int a) {
    Node n = unary(Op::Relu, a);
    n.value = detail::k_relu(val(a));
    return push(std::move(n));
  }

  int softmax_lastdim(int a, bool zero_logit = false) {
    Node n = unary(Op::SoftmaxLast, a);
    n.zero_logit = zero_logit;
    n.value = detail::k_softmax_last(val(a), zero_logit);
    return push(std::move(n));
  }

  int layer_norm(int x, int gain, int bias) {
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {check_id(x), check_id(gain), check_id(bias)};
    n.value = detail::k_layer_norm(val(x), val(gain), val(bias), &n.ln_mean, &n.ln_rstd);
    n.requires_grad = nodes_[x].requires_grad || nodes_[gain].requires_grad ||
                      nodes_[bias].requires_grad;
    return push(std::move(n));
  }

  int sum(int a) {
    Node n = unary(Op::Sum, a);
    n.value = detail::k_reduce(Op::Sum, val(a));
    return push(std::move(n));
  }

  int mean(int a) {
    Node n = unary(Op::Mean, a);
    n.value = detail::k_reduce(Op::Mean, val(a));
    return push(std::move(n));
  }

  int squared_error(int a, int b) { return binary(Op::SquaredError, a, b); }

  int scale(int a, T s) {
    Node n = unary(Op::Scale, a);
    n.scalar = s;
    n.value = detail::k_scale(val(a), s);
    return push(std::move(n));
  }

  int concat(int a, int b, int axis) {
    Node n;
    n.op = Op::Concat;
    n.inputs = {check_id(a), check_id(b)};
    n.axis = axis;
    n.value = detail::k_concat(val(a), val(b), axis);
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(std::move(n));
  }

  int mask_fill(int a, TensorT<uint8_t> mask, T fill) {
    Node n = unary(Op::MaskFill, a);
    n.mask = std::move(mask);
    n.scalar = fill;
    n.value = detail::k_mask_fill(val(a), n.mask, fill);
    return push(std::move(n));
  }

  // Seeds the (scalar) root with 1 and sweeps the tape in reverse.  Leaves
  // that require grad but do not feed the root keep an all-zero gradient.
  void backward(int root) {
    check_id(root);
    if (nodes_[static_cast<size_t>(root)].value.numel() != 1)
      throw TensorError("backward: root must be a scalar, got shape " +
                        shape_str(nodes_[static_cast<size_t>(root)].value.shape));
    for (Node& n : nodes_) {
      if (n.requires_grad)
        n.grad = TensorT<T>{n.value.shape};
      else
        n.grad = TensorT<T>{};
    }
    Node& rn = nodes_[static_cast<size_t>(root)];
    if (!rn.requires_grad) return;
    rn.grad.data[0] = T(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.op == Op::Leaf) continue;
      propagate(n);
    }
  }

  // Recomputes every interior node from the current leaf values.  Used by the
  // finite-difference checker; evaluation order and kernels are identical to
  // construction, so an unperturbed recompute is bit-identical.
  void recompute_all() {
    for (Node& n : nodes_) {
      switch (n.op) {
        case Op::Leaf: break;
        case Op::MatMul: n.value = detail::k_matmul(val(n.inputs[0]), val(n.inputs[1]), false); break;
        case Op::MatMulNT: n.value = detail::k_matmul(val(n.inputs[0]), val(n.inputs[1]), true); break;
        case Op::Add:
        case Op::Mul: n.value = detail::k_ewise(n.op, val(n.inputs[0]), val(n.inputs[1])); break;
        case Op::Relu: n.value = detail::k_relu(val(n.inputs[0])); break;
        case Op::SoftmaxLast:
          n.value = detail::k_softmax_last(val(n.inputs[0]), n.zero_logit);
          break;
        case Op::LayerNorm:
          n.value = detail::k_layer_norm(val(n.inputs[0]), val(n.inputs[1]), val(n.inputs[2]),
                                         &n.ln_mean, &n.ln_rstd);
          break;
        case Op::Sum:
        case Op::Mean: n.value = detail::k_reduce(n.op, val(n.inputs[0])); break;
        case Op::SquaredError: n.value = detail::k_sqerr(val(n.inputs[0]), val(n.inputs[1])); break;
        case Op::Scale: n.value = detail::k_scale(val(n.inputs[0]), n.scalar); break;
        case Op::Concat: n.value = detail::k_concat(val(n.inputs[0]), val(n.inputs[1]), n.axis); break;
        case Op::MaskFill: n.value = detail::k_mask_fill(val(n.inputs[0]), n.mask, n.scalar); break;
      }
    }
  }

  const TensorT<T>& value(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  TensorT<T>& mutable_leaf(int id) {
    Node& n = nodes_.at(static_cast<size_t>(id));
    if (n.op != Op::Leaf) throw TensorError("mutable_leaf: node is not a leaf");
    return n.value;
  }
  const TensorT<T>& grad(int id) const {
    const Node& n = nodes_.at(static_cast<size_t>(id));
    if (n.grad.data.empty() && n.value.numel() != 0)
      throw TensorError("grad: node " + std::to_string(id) + " has no gradient (not computed)");
    return n.grad;
  }
  TensorT<T>& mutable_grad(int id) { return nodes_.at(static_cast<size_t>(id)).grad; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<size_t>(id)).requires_grad; }
  const std::string& name(int id) const { return nodes_.at(static_cast<size_t>(id)).name; }
  Op op(int id) const { return nodes_.at(static_cast<size_t>(id)).op; }
  int size() const { return static_cast<int>(nodes_.size()); }

  std::vector<int> grad_leaves() const {
    std::vector<int> ids;
    for (int i = 0; i < size(); ++i)
      if (nodes_[static_cast<size_t>(i)].op == Op::Leaf &&
          nodes_[static_cast<size_t>(i)].requires_grad)
        ids.push_back(i);
    return ids;
  }

 private:
  std::vector<Node> nodes_;

  const TensorT<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  int check_id(int id) const {
    if (id < 0 || id >= size())
      throw TensorError("graph: node id " + std::to_string(id) + " out of range");
    return id;
  }

  Node unary(Op op, int a) {
    Node n;
    n.op = op;
    n.inputs = {check_id(a)};
    n.requires_grad = nodes_[static_cast<size_t>(a)].requires_grad;
    return n;
  }

  int binary(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.inputs = {check_id(a), check_id(b)};
    n.requires_grad = nodes_[static_cast<size_t>(a)].requires_grad ||
                      nodes_[static_cast<size_t>(b)].requires_grad;
    switch (op) {
      case Op::MatMul: n.value = detail::k_matmul(val(a), val(b), false); break;
      case Op::MatMulNT: n.value = detail::k_matmul(val(a), val(b), true); break;
      case Op::Add:
      case Op::Mul: n.value = detail::k_ewise(op, val(a), val(b)); break;
      case Op::SquaredError: n.value = detail::k_sqerr(val(a), val(b)); break;
      default: throw TensorError("internal: bad binary op");
    }
    return push(std::move(n));
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void axpy(TensorT<T>& dst, const TensorT<T>& src, T f = T(1)) {
    for (int64_t i = 0; i < src.numel(); ++i)
      dst.data[static_cast<size_t>(i)] += f * src.data[static_cast<size_t>(i)];
  }

  bool wants(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  TensorT<T>& g(int id) { return nodes_[static_cast<size_t>(id)].grad; }

  void propagate(Node& n) {
    const TensorT<T>& gy = n.grad;
    switch (n.op) {
      case Op::MatMul:
      case Op::MatMulNT: {
        bool nt = n.op == Op::MatMulNT;
        const TensorT<T>& a = val(n.inputs[0]);
        const TensorT<T>& b = val(n.inputs[1]);
        detail::MatDims d = detail::matmul_dims(n.op, a, b, nt);
        int64_t a_stride = d.m * d.k;
        int64_t b_stride = d.b_batched ? (nt ? d.n * d.k : d.k * d.n) : 0;
        int64_t c_stride = d.m * d.n;
        for (int64_t bb = 0; bb < d.batch; ++bb) {
          const T* ap = a.data.data() + bb * a_stride;
          const T* bp = b.data.data() + bb * b_stride;
          const T* gp = gy.data.data() + bb * c_stride;
          if (wants(n.inputs[0])) {
            T* da = g(n.inputs[0]).data.data() + bb * a_stride;
            if (!nt)  // dA = gy . B^T
              detail::gemm_acc(gp, bp, da, d.m, d.k, d.n, false, true);
            else  // dA = gy . B
              detail::gemm_acc(gp, bp, da, d.m, d.k, d.n, false, false);
          }
          if (wants(n.inputs[1])) {
            T* db = g(n.inputs[1]).data.data() + bb * b_stride;
            if (!nt)  // dB = A^T . gy
              detail::gemm_acc(ap, gp, db, d.k, d.n, d.m, true, false);
            else  // dB = gy^T . A
              detail::gemm_acc(gp, ap, db, d.n, d.k, d.m, true, false);
          }
        }
        break;
      }
      case Op::Add:
      case Op::Mul: {
        const TensorT<T>& a = val(n.inputs[0]);
        const TensorT<T>& b = val(n.inputs[1]);
        const TensorT<T>*big, *small;
        bool b_small = detail::check_broadcast_pair(n.op, a, b, &big, &small);
        int big_id = b_small ? n.inputs[0] : n.inputs[1];
        int small_id = b_small ? n.inputs[1] : n.inputs[0];
        int64_t period = small->numel();
        int64_t total = big->numel();
        bool is_add = n.op == Op::Add;
        if (wants(big_id)) {
          T* d = g(big_id).data.data();
          const T* sp = small->data.data();
          for (int64_t i = 0; i < total; ++i)
            d[i] += is_add ? gy.data[static_cast<size_t>(i)]
                           : gy.data[static_cast<size_t>(i)] * sp[i % period];
        }
        if (wants(small_id)) {
          T* d = g(small_id).data.data();
          const T* bp = big->data.data();
          for (int64_t i = 0; i < total; ++i)
            d[i % period] += is_add ? gy.data[static_cast<size_t>(i)]
                                    : gy.data[static_cast<size_t>(i)] * bp[i];
        }
        break;
      }
      case Op::Relu: {
        if (!wants(n.inputs[0])) break;
        const TensorT<T>& x = val(n.inputs[0]);
        T* d = g(n.inputs[0]).data.data();
        for (int64_t i = 0; i < x.numel(); ++i)
          if (x.data[static_cast<size_t>(i)] > T(0)) d[i] += gy.data[static_cast<size_t>(i)];
        break;
      }
      case Op::SoftmaxLast: {
        if (!wants(n.inputs[0])) break;
        int64_t cols = n.value.shape[static_cast<size_t>(n.value.rank()) - 1];
        int64_t rows = n.value.numel() / cols;
        T* d = g(n.inputs[0]).data.data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* p = n.value.data.data() + r * cols;
          const T* gr = gy.data.data() + r * cols;
          T s = 0;
          for (int64_t j = 0; j < cols; ++j) s += p[j] * gr[j];
          for (int64_t j = 0; j < cols; ++j) d[r * cols + j] += p[j] * (gr[j] - s);
        }
        break;
      }
      case Op::LayerNorm: {
        const TensorT<T>& x = val(n.inputs[0]);
        const TensorT<T>& gain = val(n.inputs[1]);
        int64_t cols = x.shape[static_cast<size_t>(x.rank()) - 1];
        int64_t rows = x.numel() / cols;
        for (int64_t r = 0; r < rows; ++r) {
          const T* xp = x.data.data() + r * cols;
          const T* gr = gy.data.data() + r * cols;
          T mu = n.ln_mean[static_cast<size_t>(r)];
          T rstd = n.ln_rstd[static_cast<size_t>(r)];
          if (wants(n.inputs[1]) || wants(n.inputs[2])) {
            for (int64_t j = 0; j < cols; ++j) {
              T xhat = (xp[j] - mu) * rstd;
              if (wants(n.inputs[1])) g(n.inputs[1]).data[static_cast<size_t>(j)] += gr[j] * xhat;
              if (wants(n.inputs[2])) g(n.inputs[2]).data[static_cast<size_t>(j)] += gr[j];
            }
          }
          if (wants(n.inputs[0])) {
            T sum_dh = 0, sum_dh_xhat = 0;
            for (int64_t j = 0; j < cols; ++j) {
              T xhat = (xp[j] - mu) * rstd;
              T dh = gr[j] * gain.data[static_cast<size_t>(j)];
              sum_dh += dh;
              sum_dh_xhat += dh * xhat;
            }
            T inv = T(1) / static_cast<T>(cols);
            T* d = g(n.inputs[0]).data.data() + r * cols;
            for (int64_t j = 0; j < cols; ++j) {
              T xhat = (xp[j] - mu) * rstd;
              T dh = gr[j] * gain.data[static_cast<size_t>(j)];
              d[j] += rstd * (dh - sum_dh * inv - xhat * sum_dh_xhat * inv);
            }
          }
        }
        break;
      }
      case Op::Sum: {
        if (!wants(n.inputs[0])) break;
        T gv = gy.data[0];
        T* d = g(n.inputs[0]).data.data();
        for (int64_t i = 0; i < val(n.inputs[0]).numel(); ++i) d[i] += gv;
        break;
      }
      case Op::Mean: {
        if (!wants(n.inputs[0])) break;
        T gv = gy.data[0] / static_cast<T>(val(n.inputs[0]).numel());
        T* d = g(n.inputs[0]).data.data();
        for (int64_t i = 0; i < val(n.inputs[0]).numel(); ++i) d[i] += gv;
        break;
      }
      case Op::SquaredError: {
        const TensorT<T>& a = val(n.inputs[0]);
        const TensorT<T>& b = val(n.inputs[1]);
        T gv = gy.data[0];
        for (int64_t i = 0; i < a.numel(); ++i) {
          T diff = T(2) * (a.data[static_cast<size_t>(i)] - b.data[static_cast<size_t>(i)]) * gv;
          if (wants(n.inputs[0])) g(n.inputs[0]).data[static_cast<size_t>(i)] += diff;
          if (wants(n.inputs[1])) g(n.inputs[1]).data[static_cast<size_t>(i)] -= diff;
        }
        break;
      }
      case Op::Scale: {
        if (!wants(n.inputs[0])) break;
        axpy(g(n.inputs[0]), gy, n.scalar);
        break;
      }
      case Op::Concat: {
        detail::ConcatDims d = detail::concat_dims(val(n.inputs[0]), val(n.inputs[1]), n.axis);
        for (int64_t o = 0; o < d.outer; ++o) {
          const T* src = gy.data.data() + o * (d.a_ax + d.b_ax) * d.inner;
          if (wants(n.inputs[0])) {
            T* da = g(n.inputs[0]).data.data() + o * d.a_ax * d.inner;
            for (int64_t i = 0; i < d.a_ax * d.inner; ++i) da[i] += src[i];
          }
          if (wants(n.inputs[1])) {
            T* db = g(n.inputs[1]).data.data() + o * d.b_ax * d.inner;
            for (int64_t i = 0; i < d.b_ax * d.inner; ++i) db[i] += src[i + d.a_ax * d.inner];
          }
        }
        break;
      }
      case Op::MaskFill: {
        if (!wants(n.inputs[0])) break;
        int64_t period = static_cast<int64_t>(n.mask.data.size());
        T* d = g(n.inputs[0]).data.data();
        for (int64_t i = 0; i < n.value.numel(); ++i)
          if (!n.mask.data[static_cast<size_t>(i % period)])
            d[i] += gy.data[static_cast<size_t>(i)];
        break;
      }
      case Op::Leaf: break;
    }
  }
};

using Graph32 = GraphT<float>;
using Graph64 = GraphT<double>;

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0;
  std::string worst_leaf;
  int64_t worst_index = -1;
  double analytic = 0;
  double numeric = 0;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "pass" : "FAIL") << ", max rel err " << max_rel_err << " at leaf '"
       << worst_leaf << "'[" << worst_index << "] (backward " << analytic << ", central fd "
       << numeric << ")";
    return os.str();
  }
};

// Central-difference check of backward() against direct re-evaluation of the
// graph, one leaf element at a time.  `tamper` exists for negative-control
// fixtures: it runs after backward and may corrupt stored gradients, and the
// report must then fail and name the corrupted leaf.
template <typename T>
GradCheckReport grad_check(GraphT<T>& g, int root, double tol, double fd_step = 1e-3,
                           const std::function<void(GraphT<T>&)>& tamper = {}) {
  g.backward(root);
  if (tamper) tamper(g);
  std::vector<int> leaves = g.grad_leaves();
  std::vector<TensorT<T>> saved_grads;
  saved_grads.reserve(leaves.size());
  for (int id : leaves) saved_grads.push_back(g.grad(id));

  // Near-zero components are compared against a floor tied to the dominant
  // gradient scale; otherwise finite-difference roundoff on an element whose
  // true gradient happens to vanish would swamp the relative error.
  double gmax = 0;
  for (const auto& t : saved_grads)
    for (auto v : t.data) gmax = std::max(gmax, std::abs(static_cast<double>(v)));
  double floor = std::max(1e-3 * gmax, 1e-12);

  GradCheckReport rep;
  rep.pass = true;
  for (size_t li = 0; li < leaves.size(); ++li) {
    int id = leaves[li];
    TensorT<T>& leaf = g.mutable_leaf(id);
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      T saved = leaf.data[static_cast<size_t>(i)];
      leaf.data[static_cast<size_t>(i)] = saved + static_cast<T>(fd_step);
      g.recompute_all();
      double fp = static_cast<double>(g.value(root).data[0]);
      leaf.data[static_cast<size_t>(i)] = saved - static_cast<T>(fd_step);
      g.recompute_all();
      double fm = static_cast<double>(g.value(root).data[0]);
      leaf.data[static_cast<size_t>(i)] = saved;
      double numeric = (fp - fm) / (2.0 * fd_step);
      double analytic = static_cast<double>(saved_grads[li].data[static_cast<size_t>(i)]);
      double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      double rel = std::abs(analytic - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_leaf = g.name(id).empty() ? ("leaf#" + std::to_string(id)) : g.name(id);
        rep.worst_index = i;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  g.recompute_all();
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace psim
