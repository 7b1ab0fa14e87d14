#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "msuf/core/random.hpp"
#include "msuf/tensor/adamw.hpp"
#include "msuf/tensor/checkpoint.hpp"
#include "msuf/tensor/ops.hpp"
#include "support/gradcheck.hpp"

using namespace msuf;
using namespace msuf::tensor;
using msuf::testing::grad_check;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.normal() * scale;
  return m;
}

}  // namespace

TEST(TensorOps, SoftmaxOfEqualRowIsUniform) {
  auto x = Tensor::constant(Matrix{{3.0, 3.0, 3.0, 3.0}});
  auto p = softmax_rows(x);
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(TensorOps, MatmulIdentity) {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 3, 4);
  auto out = matmul(Tensor::constant(Matrix::identity(3)), Tensor::constant(a));
  EXPECT_EQ(out.value(), a);
}

TEST(TensorOps, LayerNormHandValue) {
  auto x = Tensor::constant(Matrix{{1.0, 2.0, 3.0}});
  auto y = layer_norm(x, Tensor::constant(Matrix{{1, 1, 1}}), Tensor::constant(Matrix{{0, 0, 0}}));
  EXPECT_NEAR(y.at(0, 0), -1.2247, 1e-4);
  EXPECT_NEAR(y.at(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(0, 2), 1.2247, 1e-4);
}

TEST(TensorOps, ShapeMismatchNamesOpAndShapes) {
  auto a = Tensor::constant(Matrix(2, 3));
  auto b = Tensor::constant(Matrix(2, 3));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2x3 vs 2x3"), std::string::npos);
  }
}

TEST(TensorOps, NonFiniteResultThrows) {
  auto a = Tensor::constant(Matrix{{1e200}});
  EXPECT_THROW(mul(a, a), NumericError);
}

TEST(TensorOps, SoftmaxRowsSumToOneAndShiftInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_matrix(rng, 3, 6, 10.0);
    auto p = softmax_rows(Tensor::constant(m));
    Matrix shifted = m;
    for (std::size_t r = 0; r < 3; ++r) {
      const double s = rng.uniform(-100, 100);
      for (double& v : shifted.row(r)) v += s;
    }
    auto q = softmax_rows(Tensor::constant(shifted));
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        total += p.at(r, c);
        EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(TensorOps, CausalSoftmaxMasksFuturePositions) {
  auto p = softmax_rows(Tensor::constant(Matrix(3, 5, 1.0)), std::size_t{2});
  // row 0 sees columns 0..2
  EXPECT_NEAR(p.at(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(p.at(0, 3), 0.0);
  EXPECT_EQ(p.at(0, 4), 0.0);
  EXPECT_NEAR(p.at(2, 4), 0.2, 1e-15);
}

TEST(TensorBackward, QuadraticGradient) {
  auto x = Tensor::parameter(Matrix{{1.0, 2.0}}, "x");
  x.zero_grad();
  backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(TensorBackward, DisconnectedLeafHasZeroGrad) {
  auto x = Tensor::parameter(Matrix{{1.0, 2.0}}, "x");
  auto y = Tensor::parameter(Matrix{{3.0}}, "y");
  x.zero_grad();
  y.zero_grad();
  backward(sum(mul(y, y)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.grad()[0], 6.0);
}

TEST(TensorBackward, NonScalarLossRejected) {
  auto x = Tensor::parameter(Matrix{{1.0, 2.0}}, "x");
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(TensorBackward, RepeatedBackwardIsDeterministic) {
  Rng rng(3);
  auto w = Tensor::parameter(random_matrix(rng, 4, 4), "w");
  auto x = Tensor::constant(random_matrix(rng, 3, 4));
  auto loss = sum(gelu(matmul(x, w)));
  w.zero_grad();
  backward(loss);
  const std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss);
  const std::vector<double> second(w.grad().begin(), w.grad().end());
  EXPECT_EQ(first, second);
}

// One finite-difference check per primitive, then a composed graph.
class PrimitiveGradients : public ::testing::Test {
 protected:
  Rng rng{11};
  Tensor A = Tensor::parameter(random_matrix(rng, 3, 4), "A");
  Tensor B = Tensor::parameter(random_matrix(rng, 4, 5), "B");
  Tensor C = Tensor::parameter(random_matrix(rng, 3, 4), "C");
  Tensor row = Tensor::parameter(random_matrix(rng, 1, 4), "row");
  Tensor probe = Tensor::constant(random_matrix(rng, 3, 4));  // breaks symmetry of plain sums

  Tensor weigh(const Tensor& t) {
    // deterministic non-uniform readout so gradients are not all equal
    Matrix w(t.rows(), t.cols());
    for (std::size_t k = 0; k < w.data.size(); ++k) w.data[k] = std::sin(1.0 + 0.37 * static_cast<double>(k));
    return sum(mul(t, Tensor::constant(w)));
  }
  void expect_ok(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double tol = 1e-4) {
    const auto r = grad_check(f, leaves);
    EXPECT_LT(r.max_rel_error, tol) << r.worst;
    EXPECT_GT(r.checked, 0u);
  }
};

TEST_F(PrimitiveGradients, Matmul) { expect_ok([&] { return weigh(matmul(A, B)); }, {A, B}); }
TEST_F(PrimitiveGradients, MatmulBt) { expect_ok([&] { return weigh(matmul_bt(A, C)); }, {A, C}); }
TEST_F(PrimitiveGradients, Transpose) { expect_ok([&] { return weigh(transpose(A)); }, {A}); }
TEST_F(PrimitiveGradients, AddSubMul) {
  expect_ok([&] { return weigh(mul(add(A, C), sub(A, C))); }, {A, C});
}
TEST_F(PrimitiveGradients, AddBroadcastRow) { expect_ok([&] { return weigh(mul(add(A, row), probe)); }, {A, row}); }
TEST_F(PrimitiveGradients, ConcatAndSlice) {
  expect_ok(
      [&] {
        auto rows = concat_rows({A, C});
        auto cols = concat_cols({slice_cols(rows, 1, 3), slice_cols(rows, 0, 2)});
        return weigh(cols);
      },
      {A, C});
}
TEST_F(PrimitiveGradients, MeanRowsAndMean) {
  expect_ok([&] { return add(weigh(mean_rows(mul(A, C))), mean(mul(A, A))); }, {A, C});
}
TEST_F(PrimitiveGradients, Softmax) { expect_ok([&] { return weigh(softmax_rows(A)); }, {A}); }
TEST_F(PrimitiveGradients, CausalSoftmax) {
  expect_ok([&] { return weigh(softmax_rows(A, std::size_t{1})); }, {A});
}
TEST_F(PrimitiveGradients, LayerNorm) {
  auto gain = Tensor::parameter(random_matrix(rng, 1, 4), "gain");
  auto bias = Tensor::parameter(random_matrix(rng, 1, 4), "bias");
  expect_ok([&] { return weigh(layer_norm(A, gain, bias)); }, {A, gain, bias});
}
TEST_F(PrimitiveGradients, Gelu) { expect_ok([&] { return weigh(gelu(scale(A, 2.0))); }, {A}); }
TEST_F(PrimitiveGradients, EmbeddingLookup) {
  auto table = Tensor::parameter(random_matrix(rng, 6, 4), "table");
  expect_ok([&] { return weigh(embedding_lookup(table, {5, 0, 5})); }, {table});
}
TEST_F(PrimitiveGradients, CrossEntropy) {
  auto logits = Tensor::parameter(random_matrix(rng, 1, 4), "logits");
  expect_ok([&] { return cross_entropy(logits, 2); }, {logits});
}
TEST_F(PrimitiveGradients, ComposedAttentionBlock) {
  auto wq = Tensor::parameter(random_matrix(rng, 4, 4, 0.5), "wq");
  auto wk = Tensor::parameter(random_matrix(rng, 4, 4, 0.5), "wk");
  auto wv = Tensor::parameter(random_matrix(rng, 4, 4, 0.5), "wv");
  auto gain = Tensor::parameter(Matrix(1, 4, 1.0), "gain");
  auto bias = Tensor::parameter(Matrix(1, 4, 0.0), "bias");
  expect_ok(
      [&] {
        auto x = layer_norm(A, gain, bias);
        auto att = softmax_rows(scale(matmul_bt(matmul(x, wq), matmul(x, wk)), 0.5), std::size_t{0});
        auto h = add(A, gelu(matmul(att, matmul(x, wv))));
        return cross_entropy(mean_rows(h), 1);
      },
      {A, wq, wk, wv, gain, bias});
}

TEST(TensorFuzz, FiniteInputsWithinRangeStayFinite) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix m(2, 3);
    for (double& v : m.data) v = rng.uniform(-1e6, 1e6);
    auto x = Tensor::constant(m);
    auto g = Tensor::constant(Matrix(1, 3, 1.0));
    auto b = Tensor::constant(Matrix(1, 3, 0.0));
    EXPECT_NO_THROW({
      softmax_rows(x);
      layer_norm(x, g, b);
      gelu(x);
      cross_entropy(slice_rows(x, 0, 1), 1);
      mean_rows(x);
      transpose(x);
      matmul_bt(x, x);
    });
  }
}

TEST(AdamW, ZeroGradNoDecayIsFixedPoint) {
  auto p = Tensor::parameter(Matrix{{0.3, -1.2}}, "p");
  AdamW opt({p}, {.lr = 0.1});
  p.zero_grad();
  opt.step();
  EXPECT_EQ(p.data()[0], 0.3);
  EXPECT_EQ(p.data()[1], -1.2);
}

TEST(AdamW, FirstStepHandValue) {
  auto p = Tensor::parameter(Matrix{{0.0}}, "p");
  AdamW opt({p}, {.lr = 0.1});
  p.zero_grad();
  backward(sum(p));  // g = 1
  opt.step();
  // m_hat = 1, v_hat = 1: delta = 0.1 / (1 + 1e-8)
  EXPECT_DOUBLE_EQ(p.data()[0], -0.1 / (1.0 + 1e-8));
  EXPECT_NEAR(p.data()[0], -0.0999999990, 1e-12);
}

TEST(AdamW, DecoupledDecayWithZeroGrad) {
  auto p = Tensor::parameter(Matrix{{2.0}}, "p");
  AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.01});
  p.zero_grad();
  opt.step();
  EXPECT_DOUBLE_EQ(p.data()[0], 2.0 - 0.1 * 0.01 * 2.0);
}

TEST(AdamW, MissingGradientRejected) {
  auto p = Tensor::parameter(Matrix{{2.0}}, "p");
  AdamW opt({p}, {});
  EXPECT_THROW(opt.step(), std::logic_error);
}

TEST(Checkpoint, RoundTripPreservesArraysAndFlags) {
  Checkpoint ck;
  ck.frozen = true;
  ck.meta["kind"] = "unit";
  ck.arrays.push_back({"a.w", Matrix{{1.5, -2.0}, {3.0, 1e-300}}, true});
  ck.arrays.push_back({"b", Matrix{{0.1}}, false});
  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(back.frozen);
  EXPECT_EQ(back.meta["kind"], "unit");
  ASSERT_EQ(back.arrays.size(), 2u);
  EXPECT_EQ(back.at("a.w"), ck.arrays[0].value);
  EXPECT_TRUE(back.arrays[0].frozen);
  EXPECT_FALSE(back.arrays[1].frozen);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptInputRejected) {
  EXPECT_THROW(deserialize_checkpoint("not a checkpoint at all"), DataError);
  Checkpoint ck;
  ck.arrays.push_back({"x", Matrix{{1.0, 2.0}}, false});
  auto bytes = serialize_checkpoint(ck);
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(deserialize_checkpoint(bytes), DataError);
}
