#include "finemorphs/predictor.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace finemorphs;
using fmtest::random_matrix;

namespace {

struct Data {
    Matrix x, y;
};

Data wave(int n, int dx, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Data d{random_matrix(n, dx, rng), Matrix(n, 1)};
    for (int i = 0; i < n; ++i) d.y(i, 0) = std::sin(2.0 * d.x(i, 0)) + 0.5 * d.x.row(i).sum();
    return d;
}

TrainedModel quick_model(const Data& d, const std::string& name, int n_subset = 0,
                         std::optional<double> sigma = std::nullopt)
{
    TrainConfig cfg;
    cfg.max_sigma_loops = 1;
    cfg.optimizer.max_iters = 40;
    cfg.n_subset = n_subset;
    cfg.fixed_sigma_sq = sigma;
    cfg.rng_seed = 4;
    return train(parse_sequence(name, static_cast<int>(d.x.cols()), 1), d.x, d.y, cfg);
}

TrainedModel zero_control_model(const Data& d)
{
    auto m = quick_model(d, "ADA");
    for (auto& c : m.params.controls)
        for (auto& a : c.a) a.setZero();
    const Matrix x = model_inputs(m, d.x);
    m.cache = extract_cache(forward_pass(m.spec, m.params, x, m.n_anchor));
    return m;
}

} // namespace

TEST(Rmse, Examples)
{
    Matrix p(2, 1), t(2, 1);
    p << 1.0, 2.0;
    EXPECT_EQ(rmse(p, p), 0.0);
    t << 0.0, 3.0;
    EXPECT_EQ(rmse(p, t), 1.0);
    Matrix a(1, 2), b = Matrix::Zero(1, 2);
    a << 3.0, 4.0;
    EXPECT_EQ(rmse(a, b), 5.0);
    EXPECT_THROW(rmse(Matrix(0, 1), Matrix(0, 1)), ValidationError);
    EXPECT_THROW(rmse(a, p), ValidationError);
}

TEST(Predict, TrainingPointsReproduceTrainingOutputs)
{
    // s = 0 so the training inputs carry no pad noise; all points are anchors
    const auto d = wave(25, 2, 1);
    TrainConfig cfg;
    cfg.max_sigma_loops = 1;
    cfg.optimizer.max_iters = 40;
    const auto m = train(parse_sequence("ADA", 2, 1, {.pad = 0}), d.x, d.y, cfg);
    ASSERT_EQ(m.n_anchor, 25);
    const Matrix trained_out = apply_affine(m.params.affines[1], m.cache.z[0].back());
    const Matrix expect = m.stats.unapply_y(trained_out);
    EXPECT_LT((predict(m, d.x).predictions - expect).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Predict, PureAffineModel)
{
    const auto d = wave(30, 3, 2);
    SequenceOverrides ov;
    ov.pad = 0;
    TrainConfig cfg;
    cfg.optimizer.max_iters = 50;
    const auto m = train(parse_sequence("A", 3, 1, ov), d.x, d.y, cfg);
    std::mt19937_64 rng(3);
    const Matrix tx = random_matrix(7, 3, rng);
    Matrix lin = m.stats.apply_x(tx) * m.params.affines[0].M.transpose();
    lin.rowwise() += m.params.affines[0].b.transpose();
    EXPECT_LT((predict(m, tx).predictions - m.stats.unapply_y(lin)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Predict, ZeroControlsIsAffineComposition)
{
    const auto d = wave(20, 2, 5);
    const auto m = zero_control_model(d);
    std::mt19937_64 rng(6);
    const Matrix tx = random_matrix(6, 2, rng);
    const Matrix z = apply_affine(m.params.affines[1], apply_affine(m.params.affines[0], model_inputs(m, tx)));
    EXPECT_EQ(predict(m, tx).predictions, m.stats.unapply_y(z));
}

TEST(Predict, DeterministicAndSquaredErrors)
{
    const auto d = wave(20, 2, 7);
    const auto m = quick_model(d, "ADA", 8);
    const auto a = predict(m, d.x, &d.y);
    const auto b = predict(m, d.x, &d.y);
    EXPECT_EQ(a.predictions, b.predictions);
    ASSERT_TRUE(a.rmse.has_value());
    double s = 0.0;
    for (double e : a.squared_err) s += e;
    EXPECT_DOUBLE_EQ(*a.rmse, std::sqrt(s / 20.0));
    EXPECT_THROW(predict(m, Matrix::Zero(3, 3)), ValidationError);
}

TEST(Predict, RmseScalesWithResponseUnits)
{
    const auto d = wave(25, 2, 8);
    Data scaled = d;
    scaled.y *= 4.0;
    const auto a = quick_model(d, "ADA", 0, 0.5);
    const auto b = quick_model(scaled, "ADA", 0, 0.5);
    std::mt19937_64 rng(9);
    const auto t = wave(10, 2, 10);
    const Matrix ty = 4.0 * t.y;
    const double ra = *predict(a, t.x, &t.y).rmse;
    const double rb = *predict(b, t.x, &ty).rmse;
    EXPECT_NEAR(rb, 4.0 * ra, 1e-10 * rb);
}

TEST(VerifyCache, DetectsCorruption)
{
    const auto d = wave(20, 2, 11);
    auto m = quick_model(d, "ADADA", 6);
    EXPECT_NO_THROW(verify_cache(m));
    auto bad = m;
    bad.cache.z[0][3](1, 0) += 1e-3;
    EXPECT_THROW(verify_cache(bad), ValidationError);
    bad = m;
    bad.cache.z[1].pop_back();
    EXPECT_THROW(verify_cache(bad), ValidationError);
    bad = m;
    bad.cache.z[1][0](0, 0) += 1e-3;
    EXPECT_THROW(verify_cache(bad), ValidationError);
}

TEST(Pca, AxisAlignedCloudRecoversCoordinates)
{
    std::mt19937_64 rng(12);
    Matrix s = random_matrix(200, 3, rng);
    s.col(0) *= 5.0;
    s.col(1) *= 2.0;
    s.col(2) *= 0.5;
    s.rowwise() -= s.colwise().mean();
    const auto p = pca_project(s);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(std::abs(p.axes(c, c)), 1.0, 1e-2);
        const double sign = p.axes(c, c) > 0 ? 1.0 : -1.0;
        EXPECT_LT((p.scores.col(c) - sign * s.col(c)).cwiseAbs().maxCoeff(), 0.2);
    }
}

TEST(Pca, MatchesSvdOracle)
{
    std::mt19937_64 rng(13);
    Matrix s = random_matrix(60, 5, rng) * random_matrix(5, 5, rng);
    const auto p = pca_project(s);
    const Eigen::MatrixXd c = s.rowwise() - s.colwise().mean();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinV);
    const Eigen::MatrixXd v = svd.matrixV().leftCols(3);
    const Eigen::MatrixXd recon_ref = c * v * v.transpose();
    const Eigen::MatrixXd recon = p.scores * p.axes.transpose();
    EXPECT_LT((recon - recon_ref).cwiseAbs().maxCoeff(), 1e-8);
    for (int j = 0; j < 3; ++j) {
        EXPECT_NEAR(p.variances[j], svd.singularValues()[j] * svd.singularValues()[j] / 60.0, 1e-9);
        Eigen::Index imax;
        p.axes.col(j).cwiseAbs().maxCoeff(&imax);
        EXPECT_GT(p.axes(imax, j), 0.0);
    }
}

TEST(ExportPca, ZeroControlsGiveConstantSnapshots)
{
    const auto d = wave(20, 3, 14);
    const auto m = zero_control_model(d);
    const auto tab = export_pca_snapshots(m, d.x, d.y, 1, {0.0, 0.2, 0.4, 0.6, 0.8, 1.0});
    ASSERT_EQ(tab.scores.size(), 6u);
    EXPECT_EQ(tab.components, 3);
    for (const auto& s : tab.scores) EXPECT_EQ(s, tab.scores.front());
    EXPECT_EQ(tab.grid_index, (std::vector<int>{0, 2, 4, 6, 8, 10}));
}

TEST(ExportPca, CsvSchemaAndLowDimensionNote)
{
    const auto d = wave(15, 1, 15);
    const auto m = quick_model(d, "ADA");
    const auto tab = export_pca_snapshots(m, d.x, d.y, 1, {0.0, 0.53, 1.0});
    EXPECT_EQ(tab.components, 2);
    EXPECT_FALSE(tab.note.empty());
    EXPECT_EQ(tab.grid_index[1], 5);
    EXPECT_EQ(tab.times[1], 0.5);
    std::ostringstream os;
    write_snapshot_csv(os, tab);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "t,index,pc1,pc2,pc3,y1");
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5) << line;
    }
    EXPECT_EQ(rows, 45);
}

TEST(ExportPca, Errors)
{
    const auto d = wave(15, 1, 16);
    const auto m = quick_model(d, "ADA");
    EXPECT_THROW(export_pca_snapshots(m, d.x, d.y, 2, {0.0}), ValidationError);
    EXPECT_THROW(export_pca_snapshots(m, d.x, d.y, 1, {1.5}), ValidationError);
    EXPECT_THROW(export_pca_snapshots(m, d.x, d.y, 1, {}), ValidationError);
}
