#include "finemorphs/trainer.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace finemorphs;
using fmtest::random_matrix;

namespace {

struct Toy {
    Matrix x, y;
};

Toy sine_data(int n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Toy t{Matrix(n, 1), Matrix(n, 1)};
    for (int i = 0; i < n; ++i) {
        t.x(i, 0) = u(rng);
        t.y(i, 0) = std::sin(3.0 * t.x(i, 0));
    }
    return t;
}

double affine_mse(const Toy& t)
{
    SequenceOverrides ov;
    ov.pad = 0;
    const auto spec = parse_sequence("A", 1, 1, ov);
    TrainConfig cfg;
    return train(spec, t.x, t.y, cfg).report.final_train_mse;
}

} // namespace

TEST(Train, LinearDataPureAffineMatchesRidgeOracle)
{
    std::mt19937_64 rng(1);
    const int n = 400;
    const Matrix x = random_matrix(n, 3, rng);
    Matrix w(3, 1);
    w << 0.8, -0.5, 0.3;
    const Matrix y = x * w;
    SequenceOverrides ov;
    ov.pad = 0;
    const auto spec = parse_sequence("A", 3, 1, ov);
    const auto model = train(spec, x, y, {});
    EXPECT_LT(model.report.final_train_mse, 1e-6);

    // closed form on standardized data with effective penalty lambda * sigma^2
    const auto s = standardize(x, y, Matrix(0, 3), 0, 0).train;
    const Eigen::MatrixXd xc = s.x.rowwise() - s.x.colwise().mean();
    const Eigen::MatrixXd yc = s.y.rowwise() - s.y.colwise().mean();
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += spec.lambda * model.sigma_sq;
    const Eigen::MatrixXd m_ref = gram.ldlt().solve(xc.transpose() * yc).transpose();
    EXPECT_LT((model.params.affines[0].M - m_ref).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Train, SineWaveAdaBeatsAffine)
{
    const auto t = sine_data(60, 2);
    const auto spec = parse_sequence("ADA", 1, 1);
    TrainConfig cfg;
    cfg.rng_seed = 3;
    const auto model = train(spec, t.x, t.y, cfg);
    EXPECT_LT(model.report.final_train_mse, 0.05);
    EXPECT_LT(model.report.final_train_mse, affine_mse(t));
}

TEST(Train, OneSigmaLoopMeansTwoMinimizeCalls)
{
    const auto t = sine_data(30, 4);
    TrainConfig cfg;
    cfg.max_sigma_loops = 1;
    cfg.optimizer.max_iters = 30;
    const auto m = train(parse_sequence("ADA", 1, 1), t.x, t.y, cfg);
    EXPECT_EQ(m.report.minimize_calls, 2);
    EXPECT_EQ(m.report.loops.size(), 2u);
}

TEST(Train, SigmaDecreasesGeometricallyUntilLoopsRunOut)
{
    // a line cannot fit a parabola, so every loop misses the target
    std::mt19937_64 rng(5);
    const Matrix x = random_matrix(40, 1, rng);
    const Matrix y = x.array().square().matrix() * 10.0;
    TrainConfig cfg;
    cfg.max_sigma_loops = 4;
    const auto m = train(parse_sequence("A", 1, 1, {.pad = 0}), x, y, cfg);
    ASSERT_EQ(m.report.loops.size(), 5u);
    EXPECT_EQ(m.report.loops[0].sigma_sq, m.report.sigma_sq_init);
    for (std::size_t i = 1; i < 4; ++i) {
        EXPECT_LT(m.report.loops[i].sigma_sq, m.report.loops[i - 1].sigma_sq);
        EXPECT_EQ(m.report.loops[i].sigma_sq, 0.5 * m.report.loops[i - 1].sigma_sq);
    }
    // the final loop reuses the last sigma after one more halving
    EXPECT_EQ(m.report.loops[4].sigma_sq, 0.5 * m.report.loops[3].sigma_sq);
    EXPECT_EQ(m.sigma_sq, m.report.loops[4].sigma_sq);
    EXPECT_EQ(m.report.sigma_schedule, "geometric");
}

TEST(Train, StopsOnFirstLoopWhenTargetMet)
{
    std::mt19937_64 rng(6);
    const Matrix x = random_matrix(50, 2, rng);
    Matrix w(2, 1);
    w << 1.0, -2.0;
    const auto m = train(parse_sequence("A", 2, 1, {.pad = 0}), x, x * w, {});
    EXPECT_LT(m.report.sigma_mse_sq, 1e-20);
    EXPECT_EQ(m.report.sigma_sq_init, std::sqrt(50.0) * 0.01);
    EXPECT_EQ(m.report.loops.size(), 2u);
    EXPECT_EQ(m.report.loops[0].sigma_sq, m.report.loops[1].sigma_sq);
}

TEST(Train, Reproducible)
{
    const auto t = sine_data(24, 7);
    TrainConfig cfg;
    cfg.rng_seed = 9;
    cfg.max_sigma_loops = 2;
    cfg.optimizer.max_iters = 40;
    const auto spec = parse_sequence("ADA", 1, 1);
    const auto a = train(spec, t.x, t.y, cfg);
    const auto b = train(spec, t.x, t.y, cfg);
    EXPECT_TRUE(a.params == b.params);
    EXPECT_EQ(a.sigma_sq, b.sigma_sq);
}

TEST(Train, SubsetAnchors)
{
    const auto t = sine_data(40, 8);
    TrainConfig cfg;
    cfg.n_subset = 12;
    cfg.max_sigma_loops = 1;
    cfg.optimizer.max_iters = 50;
    const auto m = train(parse_sequence("ADA", 1, 1), t.x, t.y, cfg);
    EXPECT_EQ(m.n_anchor, 12);
    EXPECT_EQ(m.params.controls[0].a[0].rows(), 12);
    EXPECT_EQ(m.cache.z[0][0].rows(), 12);
}

TEST(Train, FixedSigmaRunsOnce)
{
    const auto t = sine_data(20, 9);
    TrainConfig cfg;
    cfg.fixed_sigma_sq = 0.25;
    cfg.optimizer.max_iters = 20;
    const auto m = train(parse_sequence("ADA", 1, 1), t.x, t.y, cfg);
    EXPECT_EQ(m.report.minimize_calls, 1);
    EXPECT_EQ(m.sigma_sq, 0.25);
}

TEST(Train, ProgressLines)
{
    const auto t = sine_data(20, 10);
    std::ostringstream log;
    TrainConfig cfg;
    cfg.max_sigma_loops = 1;
    cfg.optimizer.max_iters = 5;
    cfg.progress = &log;
    train(parse_sequence("ADA", 1, 1), t.x, t.y, cfg);
    const auto s = log.str();
    EXPECT_NE(s.find("phase=sigma loop=1 sigma_sq="), std::string::npos);
    EXPECT_NE(s.find("phase=final loop=2"), std::string::npos);
    EXPECT_NE(s.find("train_mse="), std::string::npos);
}

TEST(Train, Errors)
{
    const auto t = sine_data(9, 11);
    EXPECT_THROW(train(parse_sequence("ADA", 1, 1), t.x, t.y, {}), ValidationError);
    const auto u = sine_data(20, 12);
    TrainConfig cfg;
    cfg.n_subset = 21;
    EXPECT_THROW(train(parse_sequence("ADA", 1, 1), u.x, u.y, cfg), ValidationError);
    cfg = {};
    cfg.sigma_decay = 1.0;
    EXPECT_THROW(train(parse_sequence("ADA", 1, 1), u.x, u.y, cfg), ValidationError);
    EXPECT_THROW(train(parse_sequence("ADA", 2, 1), u.x, u.y, {}), ValidationError);
}

TEST(WarmStart, IdentityCopy)
{
    const auto in = fmtest::random_instance(13, 6, 4, 2, 2, 3);
    const auto p = warm_start(in.params);
    EXPECT_TRUE(p == in.params);
    for (std::size_t i = 0; i < p.affines.size(); ++i) {
        EXPECT_EQ(p.affines[i].M, in.params.affines[i].M);
        EXPECT_EQ(p.affines[i].b, in.params.affines[i].b);
    }
    for (std::size_t i = 0; i < p.controls.size(); ++i)
        for (std::size_t t = 0; t < p.controls[i].a.size(); ++t)
            EXPECT_EQ(p.controls[i].a[t], in.params.controls[i].a[t]);
}
