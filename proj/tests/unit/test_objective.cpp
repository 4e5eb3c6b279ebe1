#include "finemorphs/objective.hpp"
#include "finemorphs/preprocess.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace finemorphs;
using fmtest::random_instance;

TEST(Objective, ZeroControlsHaveNoRunningCost)
{
    auto in = random_instance(1, 7, 4, 3, 2, 3);
    for (auto& c : in.params.controls)
        for (auto& a : c.a) a.setZero();
    const auto fw = forward_pass(in.spec, in.params, in.x, in.n_anchor);
    EXPECT_EQ(evaluate(in.spec, in.params, fw, in.y, 1.0).running, 0.0);
}

TEST(Objective, SingleAnchorRunningCost)
{
    Matrix z0(1, 1), a(1, 1);
    z0 << -2.5;
    a << 0.75;
    EXPECT_EQ(integrate_flow({0.5, 1}, ControlField{{a}}, z0, false).running_cost, 0.75 * 0.75);
}

TEST(Objective, BreakdownSumsToTotal)
{
    const auto in = random_instance(2, 8, 5, 2, 2, 4);
    const auto fw = forward_pass(in.spec, in.params, in.x, in.n_anchor);
    const auto b = evaluate(in.spec, in.params, fw, in.y, in.sigma_sq);
    EXPECT_EQ(b.total, b.running + b.affine + b.endpoint);
    EXPECT_EQ(b.affine, affine_cost(in.spec, in.params));
    EXPECT_GT(b.running, 0.0);
    const auto again = evaluate(in.spec, in.params, fw, in.y, in.sigma_sq);
    EXPECT_EQ(b.total, again.total);
}

TEST(Objective, RunningCostInvariantUnderAnchorPermutation)
{
    const auto in = random_instance(3, 6, 6, 2, 1, 3);
    const auto& spec = in.spec;
    const std::vector<Eigen::Index> perm{3, 1, 5, 0, 4, 2};
    auto p2 = in.params;
    for (auto& c : p2.controls)
        for (auto& a : c.a) a = take_rows(a, perm);
    const auto fw1 = forward_pass(spec, in.params, in.x, 6);
    const auto fw2 = forward_pass(spec, p2, take_rows(in.x, perm), 6);
    EXPECT_NEAR(fw1.running[0], fw2.running[0], 1e-12 * std::abs(fw1.running[0]));
}

TEST(Objective, EndpointCostDecreasesWithBetterPrediction)
{
    Matrix out(3, 1), y(3, 1);
    out << 0.0, 1.0, 2.0;
    y << 0.5, 1.0, 1.0;
    const double before = endpoint_cost(out, y, 0, 2.0);
    EXPECT_EQ(before, (0.25 + 0.0 + 1.0) / 2.0);
    out(2, 0) = 1.5;
    EXPECT_LT(endpoint_cost(out, y, 0, 2.0), before);
    EXPECT_THROW(endpoint_cost(out, y, 0, 0.0), ValidationError);
}

TEST(Objective, EndpointIgnoresDroppedColumns)
{
    Matrix out(2, 2), y(2, 1);
    out << 1.0, 100.0, 2.0, -50.0;
    y << 1.0, 2.0;
    EXPECT_EQ(endpoint_cost(out, y, 1, 1.0), 0.0);
}

TEST(TrainMse, Examples)
{
    Matrix y(2, 1);
    y << 1.0, 2.0;
    EXPECT_EQ(train_mse(y, 0, y, {Vector::Zero(1), Vector::Ones(1)}), 0.0);

    const Matrix zero_out = Matrix::Zero(4, 1);
    const Matrix fives = Matrix::Constant(4, 1, 5.0);
    EXPECT_EQ(train_mse(zero_out, 0, fives, {Vector::Constant(1, 5.0), Vector::Constant(1, 2.0)}), 0.0);

    Matrix one(1, 1), three(1, 1);
    one << 1.0;
    three << 3.0;
    EXPECT_EQ(train_mse(three, 0, one, {Vector::Zero(1), Vector::Ones(1)}), 4.0);
}
