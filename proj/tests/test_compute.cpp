// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fd_oracle.hpp"
#include "vibvit/ops.hpp"
#include "vibvit/tape.hpp"

using namespace vibvit;
using vibvit::testing::central_difference;
using vibvit::testing::random_tensor;
using vibvit::testing::relative_error;
using D = double;
using Builder = std::function<Var<D>(std::vector<Var<D>>&)>;

namespace {

// Contract the op output with fixed random weights so every output element
// contributes a distinct sensitivity.
double contracted(const Builder& build, const std::vector<Tensor<D>>& inputs, const Tensor<D>& weights) {
    Tape<D> tape;
    std::vector<Var<D>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    Var<D> y = build(vars);
    double s = 0;
    for (std::size_t i = 0; i < y.value().size(); ++i) s += y.value()[i] * weights[i];
    return s;
}

// Max relative error between tape and finite-difference gradients over all inputs.
double gradient_error(const Builder& build, const std::vector<Tensor<D>>& inputs, Rng& rng) {
    Tape<D> tape;
    std::vector<Var<D>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    Var<D> y = build(vars);
    Tensor<D> w = random_tensor(y.value().shape(), rng);
    Var<D> loss = ops::sum(ops::mul(y, tape.constant(w)));
    tape.backward(loss);
    double worst = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto f = [&](const Tensor<D>& xk) {
            auto in = inputs;
            in[k] = xk;
            return contracted(build, in, w);
        };
        Tensor<D> fd = central_difference(f, inputs[k], 1e-5);
        worst = std::max(worst, relative_error(tape.grad(vars[k]), fd));
    }
    return worst;
}

void check_op(const char* name, const Builder& build, const std::vector<Shape>& shapes, double lo = -1.0,
              double hi = 1.0, int trials = 100) {
    Rng rng(stream_seed(7, {std::hash<std::string>{}(name)}));
    double worst = 0;
    for (int t = 0; t < trials; ++t) {
        std::vector<Tensor<D>> inputs;
        for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng, lo, hi));
        worst = std::max(worst, gradient_error(build, inputs, rng));
    }
    EXPECT_LT(worst, 1e-4) << name;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tape<D> tape;
    Tensor<D> eye(Shape{3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1;
    Rng rng(1);
    Tensor<D> b = random_tensor({3, 4}, rng);
    auto y = ops::matmul(tape.constant(eye), tape.constant(b));
    EXPECT_EQ(y.value(), b);
}

TEST(Matmul, HandEvaluatedProduct) {
    Tape<D> tape;
    auto a = tape.constant(Tensor<D>({2, 2}, {1, 2, 3, 4}));
    auto b = tape.constant(Tensor<D>({2, 1}, {1, 1}));
    auto y = ops::matmul(a, b);
    EXPECT_EQ(y.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 3);
    EXPECT_DOUBLE_EQ(y.value()[1], 7);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    Tape<D> tape;
    auto a = tape.constant(Tensor<D>({2, 3}));
    auto b = tape.constant(Tensor<D>({2, 3}));
    EXPECT_THROW(ops::matmul(a, b), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    Rng rng(3);
    Tensor<D> A = random_tensor({3, 4}, rng), B = random_tensor({4, 2}, rng);
    Tape<D> tape;
    auto a = tape.leaf(A);
    auto loss = ops::sum(ops::matmul(a, tape.constant(B)));
    tape.backward(loss);
    auto f = [&](const Tensor<D>& x) {
        Tape<D> t;
        return ops::sum(ops::matmul(t.constant(x), t.constant(B))).value().item();
    };
    EXPECT_LT(relative_error(tape.grad(a), central_difference(f, A)), 1e-4);
}

TEST(Softmax, ConstantVectorIsUniform) {
    Tape<D> tape;
    auto y = ops::softmax(tape.constant(Tensor<D>({4}, 2.5)), 0);
    for (double v : y.value().data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, ClosedForm) {
    Tape<D> tape;
    auto y = ops::softmax(tape.constant(Tensor<D>({2}, {0.0, std::log(3.0)})), 0);
    EXPECT_NEAR(y.value()[0], 0.25, 1e-12);
    EXPECT_NEAR(y.value()[1], 0.75, 1e-12);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        Tensor<D> x = random_tensor({3, 5, 4}, rng, -50, 50);
        Tensor<D> xs = x;
        const double c = rng.uniform(-100, 100);
        for (auto& v : xs.data()) v += c;
        for (std::size_t axis = 0; axis < 3; ++axis) {
            Tape<D> tape;
            auto y = ops::softmax(tape.constant(x), axis).value();
            auto ys = ops::softmax(tape.constant(xs), axis).value();
            for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ys[i], 1e-12);
            // sums along axis
            std::size_t outer = 1, inner = 1, n = x.dim(axis);
            for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
            for (std::size_t i = axis + 1; i < 3; ++i) inner *= x.dim(i);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    double s = 0;
                    for (std::size_t j = 0; j < n; ++j) s += y[(o * n + j) * inner + in];
                    EXPECT_NEAR(s, 1.0, 1e-6);
                }
        }
    }
}

TEST(Softmax, FloatInputsStayNormalized) {
    Rng rng(12);
    Tape<float> tape;
    Tensor<float> x(Shape{8, 64});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-80, 80));
    auto y = ops::softmax(tape.constant(x), 1).value();
    for (std::size_t r = 0; r < 8; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 64; ++j) s += y.at(r, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Softmax, EmptyAxisRejected) {
    Tape<D> tape;
    EXPECT_THROW(ops::softmax(tape.constant(Tensor<D>({2, 0})), 1), DimensionError);
    EXPECT_THROW(ops::softmax(tape.constant(Tensor<D>({2, 3})), 2), DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    Tape<D> tape;
    auto y = ops::layer_norm(tape.constant(Tensor<D>({2, 5}, 3.0)), tape.constant(Tensor<D>({5}, 1.0)),
                             tape.constant(Tensor<D>({5}, 0.0)));
    for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, MeanEqualsBiasUnderUniformGain) {
    Rng rng(4);
    Tape<D> tape;
    Tensor<D> bias({6}, 0.7);
    auto y = ops::layer_norm(tape.constant(random_tensor({4, 6}, rng)), tape.constant(Tensor<D>({6}, 2.0)),
                             tape.constant(bias));
    for (std::size_t r = 0; r < 4; ++r) {
        double m = 0;
        for (std::size_t j = 0; j < 6; ++j) m += y.value().at(r, j);
        EXPECT_NEAR(m / 6, 0.7, 1e-12);
    }
}

TEST(LayerNorm, GainShapeMismatchRejected) {
    Tape<D> tape;
    EXPECT_THROW(ops::layer_norm(tape.constant(Tensor<D>({2, 5})), tape.constant(Tensor<D>({4}, 1.0)),
                                 tape.constant(Tensor<D>({5}))),
                 DimensionError);
}

TEST(Gelu, ZeroAndAsymptote) {
    EXPECT_EQ(ops::gelu_scalar(0.0), 0.0);
    EXPECT_NEAR(ops::gelu_scalar(10.0), 10.0, 1e-4);
    EXPECT_NEAR(ops::gelu_scalar(-10.0), 0.0, 1e-4);
}

TEST(Backward, SumGivesOnes) {
    Tape<D> tape;
    auto x = tape.leaf(Tensor<D>({3}, {1, -2, 5}));
    tape.backward(ops::sum(x));
    const auto grad = tape.grad(x);
    for (double g : grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareHandDerivative) {
    Tape<D> tape;
    auto x = tape.leaf(Tensor<D>({2}, {1, 2}));
    tape.backward(ops::sum(ops::mul(x, x)));
    EXPECT_EQ(tape.grad(x)[0], 2.0);
    EXPECT_EQ(tape.grad(x)[1], 4.0);
}

TEST(Backward, NonScalarLossRejected) {
    Tape<D> tape;
    auto x = tape.leaf(Tensor<D>({2}, {1, 2}));
    EXPECT_THROW(tape.backward(ops::mul(x, x)), UsageError);
}

TEST(Backward, SharedSubexpressionMatchesUnsharedGraph) {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Tensor<D> X = random_tensor({3, 4}, rng);
        Tensor<D> W = random_tensor({4, 4}, rng);
        Tape<D> shared;
        auto xs = shared.leaf(X);
        auto h = ops::gelu(ops::matmul(xs, shared.constant(W)));
        shared.backward(ops::sum(ops::add(ops::mul(h, h), h)));

        Tape<D> unshared;
        auto xu = unshared.leaf(X);
        auto h1 = ops::gelu(ops::matmul(xu, unshared.constant(W)));
        auto h2 = ops::gelu(ops::matmul(xu, unshared.constant(W)));
        auto h3 = ops::gelu(ops::matmul(xu, unshared.constant(W)));
        unshared.backward(ops::sum(ops::add(ops::mul(h1, h2), h3)));
        EXPECT_LT(relative_error(shared.grad(xs), unshared.grad(xu)), 1e-14);
    }
}

TEST(Backward, ParameterGradientsAccumulateAcrossPasses) {
    Parameter<D> p("w", Tensor<D>({2}, {1.0, 3.0}), false);
    p.zero_grad();
    for (int pass = 0; pass < 2; ++pass) {
        Tape<D> tape;
        auto w = tape.param(p);
        tape.backward(ops::sum(ops::mul(w, w)));
        tape.accumulate_param_grads();
    }
    EXPECT_EQ(p.grad[0], 4.0);
    EXPECT_EQ(p.grad[1], 12.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
    Tape<D> tape;
    auto c = tape.constant(Tensor<D>({2}, 1.0));
    auto x = tape.leaf(Tensor<D>({2}, 2.0));
    tape.backward(ops::sum(ops::mul(c, x)));
    EXPECT_FALSE(tape.has_grad(c));
    EXPECT_TRUE(tape.has_grad(x));
}

// Finite-difference agreement for every differentiable primitive, 100 random inputs each.
TEST(Gradients, MatmulBatched) {
    check_op("matmul", [](auto& v) { return ops::matmul(v[0], v[1]); }, {{2, 3, 4}, {4, 5}});
}
TEST(Gradients, Bmm) {
    check_op("bmm", [](auto& v) { return ops::bmm(v[0], v[1]); }, {{2, 3, 4}, {2, 4, 5}});
}
TEST(Gradients, BmmTransposed) {
    check_op("bmm_t", [](auto& v) { return ops::bmm(v[0], v[1], true); }, {{2, 3, 4}, {2, 5, 4}});
}
TEST(Gradients, AddSubMulScale) {
    check_op("arith", [](auto& v) { return ops::scale(ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1])), 1.7); },
             {{3, 4}, {3, 4}});
}
TEST(Gradients, Exp) {
    check_op("exp", [](auto& v) { return ops::exp(v[0]); }, {{7}});
}
TEST(Gradients, ClampInterior) {
    check_op("clamp", [](auto& v) { return ops::clamp(v[0], -5.0, 5.0); }, {{7}});
}
TEST(Gradients, Gelu) {
    check_op("gelu", [](auto& v) { return ops::gelu(v[0]); }, {{9}}, -4, 4);
}
TEST(Gradients, SoftmaxEachAxis) {
    check_op("softmax0", [](auto& v) { return ops::softmax(v[0], 0); }, {{3, 4}}, -3, 3);
    check_op("softmax1", [](auto& v) { return ops::softmax(v[0], 1); }, {{3, 4}}, -3, 3);
}
TEST(Gradients, LayerNorm) {
    check_op("layer_norm", [](auto& v) { return ops::layer_norm(v[0], v[1], v[2], 1e-6); }, {{3, 5}, {5}, {5}});
}
TEST(Gradients, AddBias) {
    check_op("add_bias", [](auto& v) { return ops::add_bias(v[0], v[1]); }, {{2, 3, 4}, {4}});
}
TEST(Gradients, AddGroupBias) {
    check_op("add_group_bias", [](auto& v) { return ops::add_group_bias(v[0], v[1]); }, {{2, 3, 4}, {2, 4}});
}
TEST(Gradients, ReshapePermute) {
    check_op("permute", [](auto& v) { return ops::permute(ops::reshape(v[0], {2, 3, 2, 2}), {1, 3, 0, 2}); },
             {{4, 6}});
}
TEST(Gradients, StackAndSlice) {
    check_op("stack", [](auto& v) { return ops::slice_last(ops::stack<D>({v[0], v[1], v[0]}), 1, 3); },
             {{2, 4}, {2, 4}});
}
TEST(Gradients, MeanAxis) {
    check_op("mean_axis", [](auto& v) { return ops::mean_axis(v[0], 1); }, {{2, 3, 4}});
}
TEST(Gradients, CrossEntropy) {
    static const std::vector<int> labels{2, 0, 3};
    check_op("cross_entropy", [](auto& v) { return ops::cross_entropy<D>(v[0], labels); }, {{3, 4}}, -3, 3);
}
TEST(Gradients, GaussianKl) {
    check_op("gaussian_kl", [](auto& v) { return ops::gaussian_kl(v[0], v[1]); }, {{6}, {6}}, -2, 2);
}

TEST(Permute, MatchesIndexFormula) {
    Rng rng(9);
    Tensor<D> x = random_tensor({2, 3, 4}, rng);
    Tape<D> tape;
    auto y = ops::permute(tape.constant(x), {2, 0, 1}).value();
    ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[(c * 2 + a) * 3 + b], x[(a * 3 + b) * 4 + c]);
}

TEST(Tensor, ShapeInvariant) {
    EXPECT_THROW(Tensor<D>({2, 3}, std::vector<D>(5)), DimensionError);
    Tensor<D> t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_THROW(t.reshaped({4}), DimensionError);
}
