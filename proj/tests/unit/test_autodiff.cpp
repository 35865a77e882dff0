#include "dvne/autodiff.hpp"

#include <gtest/gtest.h>

#include <random>

namespace dvne::ad {
namespace {

// Scalar function of a parameter vector evaluated with or without taping.
using Builder = std::function<Var(Tape&, const ParameterSet&)>;

ParameterSet make_params(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    ParameterSet p;
    p.add_block("x", 1, static_cast<Eigen::Index>(n));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : p.values()) v = u(rng);
    return p;
}

std::vector<double> fd(const Builder& f, ParameterSet& params, double step = 1e-5) {
    const std::vector<double> x(params.values().begin(), params.values().end());
    return finite_difference_gradient(
        [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), params.values().begin());
            Tape t(GradMode::kNoGrad);
            const double out = f(t, params).scalar();
            std::copy(x.begin(), x.end(), params.values().begin());
            return out;
        },
        x, step);
}

void expect_grad_matches(const Builder& f, ParameterSet& params, double tol = 1e-4) {
    Tape tape;
    const Var out = f(tape, params);
    const std::vector<double> g = tape.backward(out);
    const std::vector<double> ref = fd(f, params);
    ASSERT_EQ(g.size(), ref.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double scale = std::max({std::abs(g[i]), std::abs(ref[i]), 1e-3});
        EXPECT_LE(std::abs(g[i] - ref[i]) / scale, tol) << "coordinate " << i;
    }
}

TEST(Tape, SquarePrimalAndGradient) {
    Tape tape;
    const Var x = tape.variable(Tensor::Constant(1, 1, 3.0));
    const Var y = x * x;
    EXPECT_EQ(y.scalar(), 9.0);
    tape.backward(y);
    EXPECT_EQ(tape.grad(x)(0, 0), 6.0);
}

TEST(Tape, SinTimesY) {
    Tape tape;
    const Var x = tape.variable(Tensor::Constant(1, 1, 0.0));
    const Var y = tape.variable(Tensor::Constant(1, 1, 2.0));
    tape.backward(sin(x) * y);
    EXPECT_EQ(tape.grad(x)(0, 0), 2.0);
    EXPECT_EQ(tape.grad(y)(0, 0), 0.0);
}

TEST(Tape, EmptyComputation) {
    Tape tape;
    EXPECT_EQ(tape.num_nodes(), 0u);
    ParameterSet p = make_params(3, 1);
    const Var c = tape.scalar_constant(1.0);
    EXPECT_TRUE(tape.backward(c).empty());
}

TEST(Tape, SecondBackwardIsStale) {
    Tape tape;
    const Var x = tape.variable(Tensor::Constant(1, 1, 1.0));
    const Var y = exp(x);
    tape.backward(y);
    EXPECT_THROW(tape.backward(y), StaleTape);
}

TEST(Tape, UnregisteredOperation) {
    Tape tape;
    const Var x = tape.variable(Tensor::Constant(1, 1, 1.0));
    EXPECT_THROW(tape.apply("erf", {x}), UnsupportedOperation);
    EXPECT_TRUE(Tape::is_registered("reciprocal_norm"));
    EXPECT_NEAR(tape.apply("exp", {x}).scalar(), std::exp(1.0), 0.0);
}

TEST(Tape, DiscardWithoutBackwardLeavesGradientsUntouched) {
    ParameterSet p = make_params(4, 2);
    p.zero_grad();
    {
        Tape tape;
        const Var x = tape.parameter(p, 0);
        (void)sum(x * x);
    }
    for (double g : p.gradient()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, FrozenParameterIsConstant) {
    ParameterSet p = make_params(3, 3);
    Tape tape;
    const Var x = tape.parameter(p, 0, false);
    const std::vector<double> g = tape.backward(sum(x * x));
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Tape, ForwardMatchesUntaped) {
    ParameterSet p = make_params(20, 4, 0.2, 1.5);
    const Builder f = [](Tape& t, const ParameterSet& params) {
        const Var x = t.parameter(params, 0);
        const Var a = slice_cols(x, 0, 10);
        const Var b = slice_cols(x, 10, 10);
        Var y = exp(a) * sin(b) + cos(a) / sqrt(b) - maximum(a, b) * reciprocal_norm(a);
        y = y + tanh(a) * sigmoid(b) + softplus(a - b) + log(b) * square(a);
        return sum(y);
    };
    Tape taped;
    Tape plain(GradMode::kNoGrad);
    EXPECT_EQ(f(taped, p).scalar(), f(plain, p).scalar());
    expect_grad_matches(f, p);
}

TEST(Tape, SumOfGradientsIsGradientOfSum) {
    ParameterSet p = make_params(5, 5);
    auto grad_of = [&](const Builder& f) {
        Tape t;
        return t.backward(f(t, p));
    };
    const Builder f1 = [](Tape& t, const ParameterSet& ps) { return sum(sin(t.parameter(ps, 0))); };
    const Builder f2 = [](Tape& t, const ParameterSet& ps) { return sum(square(t.parameter(ps, 0))); };
    const Builder f12 = [](Tape& t, const ParameterSet& ps) {
        const Var x = t.parameter(ps, 0);
        return sum(sin(x)) + sum(square(x));
    };
    const auto g1 = grad_of(f1);
    const auto g2 = grad_of(f2);
    const auto g12 = grad_of(f12);
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g12[i], g1[i] + g2[i]);
}

TEST(Tape, MatrixPrimitivesMatchFiniteDifferences) {
    ParameterSet p;
    p.add_block("x", 3, 4);
    p.add_block("w", 5, 4);
    p.add_block("b", 1, 5);
    p.add_block("m", 5, 2);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : p.values()) v = u(rng);
    const Builder f = [](Tape& t, const ParameterSet& ps) {
        const Var x = t.parameter(ps, 0);
        const Var h = tanh(linear(x, t.parameter(ps, 1), t.parameter(ps, 2)));
        const Var m = matmul(h, t.parameter(ps, 3));
        const Var pe = positional_encoding(slice_cols(x, 0, 3), 2);
        const std::vector<Var> parts = {m, pe};
        const Var cat = concat_cols(parts);
        const Var g = gather_rows(cat, {2, -1, 0, 0});
        return mean(square(reshape(g, 2, 28))) + sum(row_sum(h) * reciprocal_norm(m));
    };
    expect_grad_matches(f, p);
}

TEST(Tape, BroadcastingGradients) {
    ParameterSet p;
    p.add_block("a", 4, 3);
    p.add_block("row", 1, 3);
    p.add_block("col", 4, 1);
    p.add_block("s", 1, 1);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (double& v : p.values()) v = u(rng);
    const Builder f = [](Tape& t, const ParameterSet& ps) {
        const Var a = t.parameter(ps, 0);
        const Var r = t.parameter(ps, 1);
        const Var c = t.parameter(ps, 2);
        const Var s = t.parameter(ps, 3);
        return sum((a * r + c) / s - r / a + c * s);
    };
    expect_grad_matches(f, p);
}

// Every elementwise primitive against finite differences at random points.
TEST(Tape, ElementwisePrimitiveSweep) {
    const std::vector<std::string> unary = {"neg", "exp", "log", "sin", "cos", "sqrt", "tanh", "sigmoid", "softplus", "square"};
    const std::vector<std::string> binary = {"add", "sub", "mul", "div", "max"};
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        ParameterSet p = make_params(8, rng(), 0.1, 2.0);
        for (const auto& op : unary) {
            const Builder f = [&op](Tape& t, const ParameterSet& ps) { return sum(t.apply(op, {t.parameter(ps, 0)})); };
            expect_grad_matches(f, p);
        }
        for (const auto& op : binary) {
            const Builder f = [&op](Tape& t, const ParameterSet& ps) {
                const Var x = t.parameter(ps, 0);
                return sum(t.apply(op, {slice_cols(x, 0, 4), slice_cols(x, 4, 4)}));
            };
            expect_grad_matches(f, p);
        }
    }
}

TEST(Tape, MaximumTieChoosesFirst) {
    Tape tape;
    const Var a = tape.variable(Tensor::Constant(1, 1, 2.0));
    const Var b = tape.variable(Tensor::Constant(1, 1, 2.0));
    tape.backward(maximum(a, b));
    EXPECT_EQ(tape.grad(a)(0, 0), 1.0);
    EXPECT_EQ(tape.grad(b)(0, 0), 0.0);
}

TEST(Tape, ReciprocalNormOfZeroRow) {
    Tape tape;
    const Var a = tape.variable(Tensor::Zero(2, 3));
    const Var r = reciprocal_norm(a);
    EXPECT_EQ(r.value()(0, 0), 0.0);
    tape.backward(sum(r));
    EXPECT_EQ(tape.grad(a).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Tape, ShapeMismatchRejected) {
    Tape tape;
    const Var a = tape.variable(Tensor::Zero(2, 3));
    const Var b = tape.variable(Tensor::Zero(3, 2));
    EXPECT_THROW(a + b, ShapeMismatch);
}

TEST(FiniteDifference, Oracles) {
    const std::vector<double> x = {0.7};
    EXPECT_NEAR(finite_difference_gradient([](std::span<const double> v) { return v[0]; }, x, 1e-5)[0], 1.0, 1e-9);
    const std::vector<double> y = {0.1, 0.2, 0.3};
    for (double g : finite_difference_gradient([](std::span<const double>) { return 4.2; }, y, 1e-5)) {
        EXPECT_NEAR(g, 0.0, 1e-9);
    }
    Eigen::Matrix3d a;
    a << 2, 0.5, 0.1, 0.5, 3, -0.2, 0.1, -0.2, 1;
    const Eigen::Vector3d xv(0.3, -0.4, 0.9);
    const std::vector<double> xs = {xv[0], xv[1], xv[2]};
    const auto g = finite_difference_gradient(
        [&](std::span<const double> v) {
            const Eigen::Vector3d z(v[0], v[1], v[2]);
            return z.dot(a * z);
        },
        xs, 1e-5);
    const Eigen::Vector3d expect = 2.0 * a * xv;
    for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(g[static_cast<std::size_t>(i)] - expect[i]) / std::abs(expect[i]), 1e-6);
}

TEST(ParameterSet, DuplicateBlockRejected) {
    ParameterSet p;
    p.add_block("a", 1, 1);
    EXPECT_THROW(p.add_block("a", 2, 2), InvalidArgument);
}

}  // namespace
}  // namespace dvne::ad
