#include <gtest/gtest.h>

#include <random>

#include "ovcos/autograd.hpp"
#include "ovcos/nn.hpp"
#include "ovcos/objectives.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace ovcos;
using gradcheck::random_matrix;

namespace {

// scalar readout <f(x), R> with a fixed random R
ag::Var readout(const ag::Var& y, const Matrix& r) { return ag::sum_all(ag::mul(y, ag::constant(r))); }

struct OpCase {
    const char* name;
    std::function<ag::Var(const ag::Var&, const ag::Var&)> fn;
    Eigen::Index ar, ac, br, bc;
    double shift = 0.0; // keeps log/div inputs away from zero
};

} // namespace

TEST(Autograd, ElementaryOpsMatchFiniteDifferences)
{
    const std::vector<OpCase> cases = {
        {"add", [](auto& a, auto& b) { return ag::add(a, b); }, 4, 3, 4, 3},
        {"sub", [](auto& a, auto& b) { return ag::sub(a, b); }, 4, 3, 4, 3},
        {"mul", [](auto& a, auto& b) { return ag::mul(a, b); }, 4, 3, 4, 3},
        {"div", [](auto& a, auto& b) { return ag::div(a, b); }, 4, 3, 4, 3, 3.0},
        {"add_row", [](auto& a, auto& b) { return ag::add_row(a, b); }, 5, 3, 1, 3},
        {"mul_row", [](auto& a, auto& b) { return ag::mul_row(a, b); }, 5, 3, 1, 3},
        {"mul_col", [](auto& a, auto& b) { return ag::mul_col(a, b); }, 5, 3, 5, 1},
        {"mul_scalar", [](auto& a, auto& b) { return ag::mul_scalar(a, b); }, 3, 3, 1, 1},
        {"matmul", [](auto& a, auto& b) { return ag::matmul(a, b); }, 4, 5, 5, 3},
        {"concat", [](auto& a, auto& b) { return ag::concat_cols({a, b, a}); }, 4, 2, 4, 3},
        {"sigmoid", [](auto& a, auto&) { return ag::sigmoid(a); }, 4, 3, 1, 1},
        {"relu", [](auto& a, auto&) { return ag::relu(a); }, 4, 3, 1, 1},
        {"exp", [](auto& a, auto&) { return ag::exp(a); }, 4, 3, 1, 1},
        {"log", [](auto& a, auto&) { return ag::log(a); }, 4, 3, 1, 1, 3.0},
        {"abs", [](auto& a, auto&) { return ag::abs(a); }, 4, 3, 1, 1},
        {"square", [](auto& a, auto&) { return ag::square(a); }, 4, 3, 1, 1},
        {"reciprocal", [](auto& a, auto&) { return ag::reciprocal(a); }, 4, 3, 1, 1, 3.0},
        {"clamp", [](auto& a, auto&) { return ag::clamp(a, -0.5, 0.5); }, 6, 3, 1, 1},
        {"sum_rows", [](auto& a, auto&) { return ag::sum_rows(a); }, 4, 3, 1, 1},
        {"mean_rows", [](auto& a, auto&) { return ag::mean_rows(a); }, 4, 3, 1, 1},
        {"max_rows", [](auto& a, auto&) { return ag::max_rows(a); }, 4, 5, 1, 1},
        {"transpose", [](auto& a, auto&) { return ag::transpose(a); }, 4, 3, 1, 1},
        {"softmax", [](auto& a, auto&) { return ag::softmax_rows(a); }, 4, 6, 1, 1},
        {"slice", [](auto& a, auto&) { return ag::slice_cols(a, 1, 3); }, 4, 6, 1, 1},
        {"resize_up", [](auto& a, auto&) { return ag::resize(a, 3, 4, 7, 5); }, 12, 2, 1, 1},
        {"resize_down", [](auto& a, auto&) { return ag::resize(a, 8, 6, 3, 4); }, 48, 2, 1, 1},
        {"resize_area", [](auto& a, auto&) { return ag::resize_area(a, 8, 6, 2, 3); }, 48, 2, 1, 1},
        {"im2col", [](auto& a, auto&) { return ag::im2col3x3(a, 3, 4); }, 12, 2, 1, 1},
        {"filter", [](auto& a, auto&) {
             Matrix k(3, 5);
             k << 1, 2, 3, 4, 5, 0, -1, 2, 1, 0, 0.5, 0.5, 0.25, 1, -2;
             return ag::filter(a, 5, 6, k);
         }, 30, 2, 1, 1},
    };
    std::mt19937_64 rng(17);
    for (const auto& op : cases) {
        ag::Var a = ag::parameter(random_matrix(rng, op.ar, op.ac));
        ag::Var b = ag::parameter(random_matrix(rng, op.br, op.bc));
        if (op.shift != 0.0) {
            a.mutable_value() = a.value().array().abs() + op.shift;
            b.mutable_value() = b.value().array().abs() + op.shift;
        }
        ag::Var probe = op.fn(a, b);
        const Matrix r = random_matrix(rng, probe.rows(), probe.cols());
        const auto res = gradcheck::check({{"a", a}, {"b", b}}, [&] { return readout(op.fn(a, b), r); });
        EXPECT_LT(res.max_relative_error, 1e-6) << op.name << " worst input " << res.worst_input;
    }
}

TEST(Autograd, LayerNormGradients)
{
    std::mt19937_64 rng(4);
    ag::Var x = ag::parameter(random_matrix(rng, 6, 8));
    ag::Var g = ag::parameter(random_matrix(rng, 1, 8));
    ag::Var b = ag::parameter(random_matrix(rng, 1, 8));
    const Matrix r = random_matrix(rng, 6, 8);
    const auto res = gradcheck::check({{"x", x}, {"gamma", g}, {"beta", b}},
                                      [&] { return readout(ag::layer_norm(x, g, b), r); });
    EXPECT_LT(res.max_relative_error, 1e-6) << res.worst_input;
}

TEST(Autograd, AttentionMatchesNaiveOracle)
{
    std::mt19937_64 rng(8);
    for (int heads : {1, 2, 4}) {
        // more query rows than one block so blocking is exercised
        const Matrix q = random_matrix(rng, 150, 8), k = random_matrix(rng, 9, 8), v = random_matrix(rng, 9, 8);
        const Matrix got = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), heads).value();
        const Matrix want = oracle::attention(q, k, v, heads);
        EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12) << "heads " << heads;
    }
}

TEST(Autograd, AttentionGradients)
{
    std::mt19937_64 rng(9);
    ag::Var q = ag::parameter(random_matrix(rng, 70, 8));
    ag::Var k = ag::parameter(random_matrix(rng, 5, 8));
    ag::Var v = ag::parameter(random_matrix(rng, 5, 8));
    const Matrix r = random_matrix(rng, 70, 8);
    const auto res = gradcheck::check({{"q", q}, {"k", k}, {"v", v}},
                                      [&] { return readout(ag::attention(q, k, v, 2), r); });
    EXPECT_LT(res.max_relative_error, 1e-6) << res.worst_input;
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls)
{
    ag::Var x = ag::parameter(Matrix::Constant(2, 2, 3.0));
    ag::backward(ag::sum_all(x));
    ag::backward(ag::sum_all(ag::scale(x, 2.0)));
    EXPECT_TRUE(x.grad().isApproxToConstant(3.0));
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, NoGradGuardRecordsNothing)
{
    ag::Var x = ag::parameter(Matrix::Ones(2, 2));
    ag::NoGradGuard guard;
    ag::Var y = ag::mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Autograd, ShapeErrorsThrow)
{
    ag::Var a = ag::constant(Matrix::Ones(2, 3));
    ag::Var b = ag::constant(Matrix::Ones(3, 2));
    EXPECT_THROW(ag::add(a, b), InvalidInput);
    EXPECT_THROW(ag::attention(a, a, a, 2), InvalidInput);
    EXPECT_THROW(ag::filter(a, 2, 2, Matrix::Ones(3, 3)), InvalidInput);
}

TEST(Ssim, MatchesPixelwiseOracle)
{
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto [h, w] : std::vector<std::pair<int, int>>{{5, 7}, {16, 16}, {13, 9}}) {
        Map x(h, w), y(h, w);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = u(rng);
            y[i] = 0.6 * x[i] + 0.4 * u(rng);
        }
        const double got = objectives::ssim(ag::constant(map_to_column(x)), ag::constant(map_to_column(y)), h, w).item();
        EXPECT_NEAR(got, oracle::ssim(x, y), 1e-12);
        EXPECT_NEAR(objectives::ssim(ag::constant(map_to_column(x)), ag::constant(map_to_column(x)), h, w).item(), 1.0,
                    1e-12);
    }
}

TEST(ParameterStore, DuplicateNamesAndHash)
{
    nn::ParameterStore s;
    s.add("a", Matrix::Ones(2, 2));
    EXPECT_THROW(s.add("a", Matrix::Ones(1, 1)), InvalidInput);
    const auto h0 = s.hash();
    ag::Var v = s.get("a");
    v.mutable_value()(0, 0) = 2.0;
    EXPECT_NE(s.hash(), h0);
    EXPECT_EQ(s.scalar_count(), 4u);
}

TEST(Autograd, ResizeAreaMatchesImageBoxFilter)
{
    std::mt19937_64 rng(17);
    Map m(8, 6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : m.values()) v = u(rng);
    const Matrix got = ag::resize_area(ag::constant(map_to_column(m)), 8, 6, 4, 2).value();
    EXPECT_LT((got - map_to_column(resize_area(m, 4, 2))).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(ag::resize_area(ag::constant(map_to_column(m)), 8, 6, 3, 2), InvalidInput);
}
