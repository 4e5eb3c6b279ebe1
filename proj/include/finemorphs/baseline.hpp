#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/preprocess.hpp"

namespace finemorphs {

/// Ridge regression on standardized data with an unpenalized intercept.
struct RidgeModel {
    Eigen::MatrixXd M; // d_Y x d_X, standardized units
    Vector b;          // d_Y
    double lambda = 1.0;
    Standardization stats;
};

/// Solves min ||Y - X M^T - 1 b^T||^2 + lambda ||M||^2 on the standardized data.
inline RidgeModel fit_ridge(const Matrix& train_x, const Matrix& train_y, double lambda)
{
    require(train_x.rows() >= 1 && train_x.rows() == train_y.rows(), "fit_ridge: bad shapes");
    require(std::isfinite(lambda) && lambda >= 0.0, "fit_ridge: lambda must be >= 0");
    RidgeModel rm;
    rm.lambda = lambda;
    if (train_x.rows() >= 2) {
        rm.stats = standardize(train_x, train_y, Matrix(0, train_x.cols()), 0, 0).train.stats;
    } else {
        rm.stats.mu_x = train_x.row(0).transpose();
        rm.stats.sigma_x = Vector::Ones(train_x.cols());
        rm.stats.mu_y = train_y.row(0).transpose();
        rm.stats.sigma_y = Vector::Ones(train_y.cols());
    }
    const Eigen::MatrixXd xs = rm.stats.apply_x(train_x);
    const Eigen::MatrixXd ys = rm.stats.apply_y(train_y);
    // centre again so the intercept decouples exactly even after rounding
    const Eigen::RowVectorXd mx = xs.colwise().mean();
    const Eigen::RowVectorXd my = ys.colwise().mean();
    const Eigen::MatrixXd xc = xs.rowwise() - mx;
    const Eigen::MatrixXd yc = ys.rowwise() - my;
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += lambda;
    const Eigen::MatrixXd rhs = xc.transpose() * yc;
    Eigen::MatrixXd mt;
    if (lambda > 0.0)
        mt = gram.ldlt().solve(rhs);
    else
        mt = gram.completeOrthogonalDecomposition().solve(rhs);
    rm.M = mt.transpose();
    rm.b = (my - mx * mt).transpose();
    return rm;
}

inline Matrix predict_ridge(const RidgeModel& rm, const Matrix& test_x)
{
    require(test_x.cols() == rm.M.cols(), "predict_ridge: predictor dimension mismatch");
    Matrix ys = rm.stats.apply_x(test_x) * rm.M.transpose();
    ys.rowwise() += rm.b.transpose();
    return rm.stats.unapply_y(ys);
}

} // namespace finemorphs
