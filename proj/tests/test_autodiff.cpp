#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "psim/autodiff.hpp"
#include "psim/rng.hpp"
#include "testutil.hpp"

using psim::Graph64;
using psim::Op;
using psim::Shape;
using psim::Tensor64;
using psim::TensorError;
using testutil::BuiltGraph;
using testutil::fd_oracle;
using testutil::rand_tensor;

namespace {

Tensor64 t1(std::vector<double> v) {
  Shape s{static_cast<int64_t>(v.size())};
  return Tensor64{s, std::move(v)};
}

}  // namespace

TEST_CASE("eval_primitive matmul 2x2") {
  Tensor64 a{{2, 2}, {1, 2, 3, 4}};
  Tensor64 b{{2, 2}, {5, 6, 7, 8}};
  auto c = psim::eval_primitive<double>(Op::MatMul, {&a, &b});
  CHECK(c.shape == Shape{2, 2});
  CHECK(c.data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("relu clamps negatives") {
  Tensor64 x = t1({-1, 0, 2});
  auto y = psim::eval_primitive<double>(Op::Relu, {&x});
  CHECK(y.data == std::vector<double>{0, 0, 2});
}

TEST_CASE("softmax with zero slot on a zero row") {
  Tensor64 x{{1, 2}, {0, 0}};
  psim::PrimitiveAttrs<double> attrs;
  attrs.zero_logit = true;
  auto y = psim::eval_primitive<double>(Op::SoftmaxLast, {&x}, attrs);
  CHECK(y.data[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(y.data[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows are nonnegative and sum to at most one") {
  psim::Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor64 x = rand_tensor({3, 5}, rng, -8, 8);
    for (bool zero : {false, true}) {
      psim::PrimitiveAttrs<double> attrs;
      attrs.zero_logit = zero;
      auto y = psim::eval_primitive<double>(Op::SoftmaxLast, {&x}, attrs);
      for (int64_t r = 0; r < 3; ++r) {
        double s = 0;
        for (int64_t j = 0; j < 5; ++j) {
          double v = y.at({r, j});
          CHECK(v >= 0.0);
          s += v;
        }
        CHECK(s <= 1.0 + 1e-6);
        if (zero)
          CHECK(s < 1.0);
        else
          CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("softmax accepts -inf logits, rejects NaN and +inf") {
  double inf = std::numeric_limits<double>::infinity();
  Tensor64 x{{1, 3}, {0.0, -inf, 1.0}};
  auto y = psim::eval_primitive<double>(Op::SoftmaxLast, {&x});
  CHECK(y.data[1] == 0.0);
  CHECK(y.data[0] + y.data[2] == doctest::Approx(1.0));

  Tensor64 bad_nan{{1, 2}, {0.0, std::nan("")}};
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::SoftmaxLast, {&bad_nan}), TensorError);
  Tensor64 bad_inf{{1, 2}, {0.0, inf}};
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::SoftmaxLast, {&bad_inf}), TensorError);
}

TEST_CASE("shape mismatches are rejected with the op named") {
  Tensor64 a{{2, 3}, {1, 2, 3, 4, 5, 6}};
  Tensor64 b{{2, 2}, {1, 2, 3, 4}};
  try {
    psim::eval_primitive<double>(Op::MatMul, {&a, &b});
    FAIL("expected a shape error");
  } catch (const TensorError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::Add, {&a, &b}), TensorError);
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::SquaredError, {&a, &b}), TensorError);
}

TEST_CASE("non-finite inputs are rejected") {
  Tensor64 a{{2}, {1.0, std::nan("")}};
  Tensor64 b{{2}, {1.0, 2.0}};
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::Add, {&a, &b}), TensorError);
  CHECK_THROWS_AS(psim::eval_primitive<double>(Op::Relu, {&a}), TensorError);
  Graph64 g;
  CHECK_THROWS_AS(g.leaf(a, true, "w"), TensorError);
}

TEST_CASE("layer norm is invariant to a constant shift") {
  psim::Rng rng(7);
  Tensor64 gain = rand_tensor({6}, rng, 0.5, 1.5);
  Tensor64 bias = rand_tensor({6}, rng, -0.5, 0.5);
  Tensor64 x = rand_tensor({4, 6}, rng, -2, 2);
  Tensor64 shifted = x;
  for (auto& v : shifted.data) v += 3.25;
  auto y0 = psim::eval_primitive<double>(Op::LayerNorm, {&x, &gain, &bias});
  auto y1 = psim::eval_primitive<double>(Op::LayerNorm, {&shifted, &gain, &bias});
  for (size_t i = 0; i < y0.data.size(); ++i)
    CHECK(y0.data[i] == doctest::Approx(y1.data[i]).epsilon(1e-5));
}

TEST_CASE("backward of sum of squares") {
  Graph64 g;
  int w = g.leaf(t1({1, 2}), true, "w");
  int ww = g.mul(w, w);
  int root = g.sum(ww);
  g.backward(root);
  CHECK(g.grad(w).data == std::vector<double>{2, 4});
}

TEST_CASE("constant root leaves all-zero gradients") {
  Graph64 g;
  int w = g.leaf(t1({1, 2}), true, "w");
  int c = g.leaf(t1({3}), false, "c");
  int root = g.sum(c);
  g.backward(root);
  CHECK(g.grad(w).data == std::vector<double>{0, 0});
}

TEST_CASE("unreached leaves get zero gradients") {
  Graph64 g;
  int w = g.leaf(t1({1, 2}), true, "w");
  int u = g.leaf(t1({5, 5}), true, "unused");
  int root = g.sum(g.mul(w, w));
  g.backward(root);
  CHECK(g.grad(u).data == std::vector<double>{0, 0});
}

TEST_CASE("non-scalar root is rejected") {
  Graph64 g;
  int w = g.leaf(t1({1, 2}), true, "w");
  int y = g.mul(w, w);
  CHECK_THROWS_AS(g.backward(y), TensorError);
}

TEST_CASE("re-evaluating the same graph is bit-identical") {
  psim::Rng rng(3);
  Graph64 g;
  int x = g.leaf(rand_tensor({2, 3, 4}, rng), true, "x");
  int w = g.leaf(rand_tensor({4, 4}, rng), true, "w");
  int gain = g.leaf(rand_tensor({4}, rng, 0.5, 1.5), true, "g");
  int bias = g.leaf(rand_tensor({4}, rng), true, "b");
  int h = g.layer_norm(g.matmul(x, w), gain, bias);
  int sm = g.softmax_lastdim(h, true);
  int root = g.sum(sm);
  std::vector<double> first = g.value(sm).data;
  double root_first = g.value(root).data[0];
  g.recompute_all();
  CHECK(g.value(sm).data == first);
  CHECK(g.value(root).data[0] == root_first);
}

// Finite-difference sweep per primitive on randomized shapes (ranks 1-3).
// The oracle rebuilds the graph from scratch for every probe, so it shares no
// state with backward().

static void run_fd(const testutil::GraphBuilder& build, std::vector<Tensor64> vals,
                   double tol = 1e-4) {
  auto res = fd_oracle(build, std::move(vals));
  CAPTURE(res.worst_leaf);
  CAPTURE(res.worst_elem);
  CHECK(res.max_rel_err < tol);
}

TEST_CASE("fd: matmul variants") {
  psim::Rng rng(101);
  for (int trial = 0; trial < 3; ++trial) {
    int64_t b = 2 + trial % 2, m = 2 + trial, k = 3, n = 2;
    run_fd(
        [](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int w = g.leaf(v[1], true, "w");
          int t = g.leaf(v[2], false, "t");
          return BuiltGraph{g.squared_error(g.matmul(a, w), t), {a, w}};
        },
        {rand_tensor({m, k}, rng), rand_tensor({k, n}, rng), rand_tensor({m, n}, rng)});
    run_fd(
        [](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int w = g.leaf(v[1], true, "w");
          int t = g.leaf(v[2], false, "t");
          return BuiltGraph{g.squared_error(g.matmul(a, w), t), {a, w}};
        },
        {rand_tensor({b, m, k}, rng), rand_tensor({k, n}, rng), rand_tensor({b, m, n}, rng)});
    run_fd(
        [](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int w = g.leaf(v[1], true, "w");
          int t = g.leaf(v[2], false, "t");
          return BuiltGraph{g.squared_error(g.matmul(a, w), t), {a, w}};
        },
        {rand_tensor({b, m, k}, rng), rand_tensor({b, k, n}, rng), rand_tensor({b, m, n}, rng)});
  }
}

TEST_CASE("fd: matmul_nt") {
  psim::Rng rng(102);
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "a");
        int w = g.leaf(v[1], true, "w");
        int t = g.leaf(v[2], false, "t");
        return BuiltGraph{g.squared_error(g.matmul_nt(a, w), t), {a, w}};
      },
      {rand_tensor({3, 4}, rng), rand_tensor({2, 4}, rng), rand_tensor({3, 2}, rng)});
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "a");
        int w = g.leaf(v[1], true, "w");
        int t = g.leaf(v[2], false, "t");
        return BuiltGraph{g.squared_error(g.matmul_nt(a, w), t), {a, w}};
      },
      {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 3, 4}, rng), rand_tensor({2, 3, 3}, rng)});
}

TEST_CASE("fd: add and mul with leading-axis broadcast") {
  psim::Rng rng(103);
  for (bool is_add : {true, false}) {
    run_fd(
        [is_add](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int b = g.leaf(v[1], true, "b");
          int t = g.leaf(v[2], false, "t");
          int y = is_add ? g.add(a, b) : g.mul(a, b);
          return BuiltGraph{g.squared_error(y, t), {a, b}};
        },
        {rand_tensor({2, 3, 4}, rng), rand_tensor({4}, rng), rand_tensor({2, 3, 4}, rng)});
    run_fd(
        [is_add](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int b = g.leaf(v[1], true, "b");
          int t = g.leaf(v[2], false, "t");
          int y = is_add ? g.add(a, b) : g.mul(a, b);
          return BuiltGraph{g.squared_error(y, t), {a, b}};
        },
        {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
  }
}

TEST_CASE("fd: relu away from the kink") {
  psim::Rng rng(104);
  Tensor64 x = rand_tensor({3, 4}, rng);
  for (auto& v : x.data)
    if (std::abs(v) < 0.05) v = 0.1;
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "x");
        int t = g.leaf(v[1], false, "t");
        return BuiltGraph{g.squared_error(g.relu(a), t), {a}};
      },
      {x, rand_tensor({3, 4}, rng)});
}

TEST_CASE("fd: softmax with and without zero slot, including masked diagonal") {
  psim::Rng rng(105);
  for (bool zero : {false, true}) {
    run_fd(
        [zero](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "logits");
          int t = g.leaf(v[1], false, "t");
          return BuiltGraph{g.squared_error(g.softmax_lastdim(a, zero), t), {a}};
        },
        {rand_tensor({2, 4, 4}, rng, -2, 2), rand_tensor({2, 4, 4}, rng)});
  }
  psim::TensorT<uint8_t> diag{{3, 3}};
  for (int64_t i = 0; i < 3; ++i) diag.at({i, i}) = 1;
  run_fd(
      [diag](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "logits");
        int t = g.leaf(v[1], false, "t");
        int m = g.mask_fill(a, diag, -std::numeric_limits<double>::infinity());
        return BuiltGraph{g.squared_error(g.softmax_lastdim(m, true), t), {a}};
      },
      {rand_tensor({2, 3, 3}, rng, -2, 2), rand_tensor({2, 3, 3}, rng)});
}

TEST_CASE("fd: layer norm") {
  psim::Rng rng(106);
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int x = g.leaf(v[0], true, "x");
        int gain = g.leaf(v[1], true, "gain");
        int bias = g.leaf(v[2], true, "bias");
        int t = g.leaf(v[3], false, "t");
        return BuiltGraph{g.squared_error(g.layer_norm(x, gain, bias), t), {x, gain, bias}};
      },
      {rand_tensor({2, 3, 5}, rng, -2, 2), rand_tensor({5}, rng, 0.5, 1.5),
       rand_tensor({5}, rng), rand_tensor({2, 3, 5}, rng)});
}

TEST_CASE("fd: reductions, scale, squared_error, concat, mask_fill") {
  psim::Rng rng(107);
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int x = g.leaf(v[0], true, "x");
        return BuiltGraph{g.mean(g.mul(x, x)), {x}};
      },
      {rand_tensor({4, 3}, rng)});
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int x = g.leaf(v[0], true, "x");
        return BuiltGraph{g.scale(g.sum(x), 2.5), {x}};
      },
      {rand_tensor({7}, rng)});
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "a");
        int b = g.leaf(v[1], true, "b");
        return BuiltGraph{g.squared_error(a, b), {a, b}};
      },
      {rand_tensor({3, 2}, rng), rand_tensor({3, 2}, rng)});
  for (int axis = 0; axis < 3; ++axis) {
    run_fd(
        [axis](Graph64& g, const std::vector<Tensor64>& v) {
          int a = g.leaf(v[0], true, "a");
          int b = g.leaf(v[1], true, "b");
          int t = g.leaf(v[2], false, "t");
          return BuiltGraph{g.squared_error(g.concat(a, b, axis), t), {a, b}};
        },
        {rand_tensor({2, 2, 2}, rng), rand_tensor({2, 2, 2}, rng),
         rand_tensor(axis == 0 ? Shape{4, 2, 2} : axis == 1 ? Shape{2, 4, 2} : Shape{2, 2, 4},
                     rng)});
  }
  psim::TensorT<uint8_t> mask{{2, 3}};
  mask.at({0, 1}) = 1;
  mask.at({1, 2}) = 1;
  run_fd(
      [mask](Graph64& g, const std::vector<Tensor64>& v) {
        int a = g.leaf(v[0], true, "a");
        int t = g.leaf(v[1], false, "t");
        return BuiltGraph{g.squared_error(g.mask_fill(a, mask, 0.75), t), {a}};
      },
      {rand_tensor({4, 2, 3}, rng), rand_tensor({4, 2, 3}, rng)});
}

TEST_CASE("fd: composite pre-norm block") {
  psim::Rng rng(108);
  run_fd(
      [](Graph64& g, const std::vector<Tensor64>& v) {
        int x = g.leaf(v[0], true, "x");
        int gain = g.leaf(v[1], true, "gain");
        int bias = g.leaf(v[2], true, "bias");
        int w1 = g.leaf(v[3], true, "w1");
        int w2 = g.leaf(v[4], true, "w2");
        int t = g.leaf(v[5], false, "t");
        int h = g.layer_norm(x, gain, bias);
        int q = g.matmul(h, w1);
        int att = g.softmax_lastdim(g.matmul_nt(q, q), true);
        int out = g.add(x, g.matmul(g.matmul(att, h), w2));
        return BuiltGraph{g.squared_error(out, t), {x, gain, bias, w1, w2}};
      },
      {rand_tensor({2, 3, 4}, rng), rand_tensor({4}, rng, 0.5, 1.5), rand_tensor({4}, rng),
       rand_tensor({4, 4}, rng), rand_tensor({4, 4}, rng), rand_tensor({2, 3, 4}, rng)},
      2e-4);
}

TEST_CASE("grad_check passes a quadratic tightly") {
  Graph64 g;
  int w = g.leaf(t1({1, 2, -0.5}), true, "w");
  int root = g.sum(g.mul(w, w));
  auto rep = psim::grad_check(g, root, 1e-8);
  INFO(rep.summary());
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-8);
}

TEST_CASE("grad_check flags a corrupted adjoint and names the leaf") {
  Graph64 g;
  int w = g.leaf(t1({1, 2, -0.5}), true, "weights");
  int root = g.sum(g.mul(w, w));
  auto rep = psim::grad_check<double>(g, root, 1e-8, 1e-3, [w](Graph64& gr) {
    gr.mutable_grad(w).data[1] += 0.5;
  });
  CHECK_FALSE(rep.pass);
  CHECK(rep.worst_leaf == "weights");
  CHECK(rep.worst_index == 1);
}

TEST_CASE("eval_primitive and graph path agree") {
  psim::Rng rng(109);
  Tensor64 a = rand_tensor({3, 4}, rng);
  Tensor64 b = rand_tensor({4, 2}, rng);
  auto direct = psim::eval_primitive<double>(Op::MatMul, {&a, &b});
  Graph64 g;
  int ga = g.leaf(a);
  int gb = g.leaf(b);
  int gc = g.matmul(ga, gb);
  CHECK(g.value(gc).data == direct.data);
}
