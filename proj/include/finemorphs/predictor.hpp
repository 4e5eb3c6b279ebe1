#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/flow.hpp"
#include "finemorphs/trainer.hpp"

#include <Eigen/Eigenvalues>

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace finemorphs {

struct PredictionResult {
    Matrix predictions;              // N_test x d_Y, original units
    std::optional<double> rmse;      // when targets were supplied
    std::vector<double> squared_err; // per point ||y - prediction||^2, when targets were supplied
};

/// sqrt of the mean over points of the squared Euclidean error.
inline double rmse(const Matrix& predictions, const Matrix& targets)
{
    require(predictions.rows() > 0, "rmse: empty test set");
    require(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(),
            "rmse: prediction/target shape mismatch");
    return std::sqrt((predictions - targets).squaredNorm() /
                     static_cast<double>(predictions.rows()));
}

/// Re-evolves the cached anchors from each module's first cached state and checks that the
/// cache matches the parameters and that consecutive D modules are linked by the affine maps
/// between them.
inline void verify_cache(const TrainedModel& model, double tol = 1e-9)
{
    const auto& spec = model.spec;
    const auto& cache = model.cache;
    check_params(spec, model.params, model.n_anchor);
    require(static_cast<int>(cache.z.size()) == spec.num_diffeo(),
            "corrupted trajectory cache: wrong number of D modules");
    std::optional<Matrix> carried; // anchors leaving the previous D module
    for (const auto& m : spec.modules) {
        if (m.is_affine()) {
            if (carried) *carried = apply_affine(model.params.affines[static_cast<std::size_t>(m.slot)], *carried);
            continue;
        }
        const auto& z = cache.z[static_cast<std::size_t>(m.slot)];
        require(static_cast<int>(z.size()) == m.steps + 1,
                "corrupted trajectory cache: wrong number of time points");
        for (const auto& zi : z)
            require(zi.rows() == model.n_anchor && zi.cols() == m.in_dim && zi.allFinite(),
                    "corrupted trajectory cache: bad anchor state shape");
        if (carried)
            require((*carried - z.front()).cwiseAbs().maxCoeff() <= tol,
                    "corrupted trajectory cache: modules are not linked");
        const auto r = integrate_flow(m.kernel, model.params.controls[static_cast<std::size_t>(m.slot)],
                                      z.front(), true);
        for (std::size_t i = 0; i < z.size(); ++i)
            require((r.trajectory[i] - z[i]).cwiseAbs().maxCoeff() <= tol,
                    "corrupted trajectory cache: states do not follow the controls");
        carried = r.output;
    }
}

/// Standardized, zero-padded model inputs for raw predictors.
inline Matrix model_inputs(const TrainedModel& model, const Matrix& x_raw)
{
    require(x_raw.cols() == model.spec.d_x,
            "predict: expected " + std::to_string(model.spec.d_x) + " predictor columns, got " +
                std::to_string(x_raw.cols()));
    return pad_columns(model.stats.apply_x(x_raw), model.stats.pad);
}

inline PredictionResult predict(const TrainedModel& model, const Matrix& x_raw,
                                const Matrix* targets = nullptr)
{
    const Matrix out =
        propagate_passengers(model.spec, model.params, model.cache, model_inputs(model, x_raw));
    PredictionResult res;
    res.predictions = model.stats.unapply_y(drop_columns(out, model.spec.drop));
    if (targets) {
        require(targets->rows() == x_raw.rows() && targets->cols() == model.spec.d_y,
                "predict: target shape mismatch");
        res.rmse = rmse(res.predictions, *targets);
        res.squared_err.resize(static_cast<std::size_t>(targets->rows()));
        for (Eigen::Index k = 0; k < targets->rows(); ++k)
            res.squared_err[static_cast<std::size_t>(k)] =
                (targets->row(k) - res.predictions.row(k)).squaredNorm();
    }
    return res;
}

// ------------------------------------------------------------------ PCA snapshots

struct PcaProjection {
    Matrix scores;       // N x c, c = min(3, d)
    Eigen::MatrixXd axes; // d x c, unit columns, largest-magnitude loading positive
    Vector variances;    // c leading eigenvalues of the (1/N) covariance
};

/// Principal components of a centred point cloud.
inline PcaProjection pca_project(const Matrix& states, int max_components = 3)
{
    require(states.rows() >= 1 && states.cols() >= 1, "pca_project: empty states");
    const Eigen::MatrixXd centred = states.rowwise() - states.colwise().mean();
    const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(states.rows());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const auto d = static_cast<int>(states.cols());
    const int c = std::min(max_components, d);
    PcaProjection p;
    p.axes.resize(d, c);
    p.variances.resize(c);
    for (int j = 0; j < c; ++j) {
        // eigenvalues come in ascending order
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - j);
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v[imax] < 0.0) v = -v;
        p.axes.col(j) = v;
        p.variances[j] = es.eigenvalues()[d - 1 - j];
    }
    p.scores = centred * p.axes;
    return p;
}

struct SnapshotTable {
    int module = 0;          // 1-based D module index
    int components = 0;      // principal components available (min(3, d_q))
    std::vector<double> times;
    std::vector<int> grid_index;
    std::vector<Matrix> scores; // per time, N x components
    Matrix responses;           // N x d_Y (original units), empty when not supplied
    std::string note;
};

/// States of `x_raw` inside D module `module` (1-based) at the grid points nearest to `times`,
/// projected on their own top three principal components.
inline SnapshotTable export_pca_snapshots(const TrainedModel& model, const Matrix& x_raw,
                                          const Matrix& y_raw, int module,
                                          const std::vector<double>& times)
{
    const auto& spec = model.spec;
    require(module >= 1 && module <= spec.num_diffeo(),
            "export_pca_snapshots: module must name a D module in 1.." +
                std::to_string(spec.num_diffeo()));
    require(y_raw.rows() == 0 || y_raw.rows() == x_raw.rows(),
            "export_pca_snapshots: response rows do not match predictors");
    require(!times.empty(), "export_pca_snapshots: no times requested");

    Matrix z = model_inputs(model, x_raw);
    std::vector<Matrix> traj;
    int steps = 0;
    for (const auto& m : spec.modules) {
        const auto slot = static_cast<std::size_t>(m.slot);
        if (m.is_affine()) {
            z = apply_affine(model.params.affines[slot], z);
            continue;
        }
        const auto& ctrl = model.params.controls[slot];
        if (m.slot + 1 == module) {
            steps = m.steps;
            transport_passengers(m.kernel, ctrl, model.cache.z[slot], std::move(z), m.slot, &traj);
            break;
        }
        z = transport_passengers(m.kernel, ctrl, model.cache.z[slot], std::move(z));
    }

    SnapshotTable tab;
    tab.module = module;
    tab.responses = y_raw;
    for (double t : times) {
        require(std::isfinite(t) && t >= 0.0 && t <= 1.0, "export_pca_snapshots: times must lie in [0, 1]");
        const int i = static_cast<int>(std::lround(t * steps));
        const auto p = pca_project(traj[static_cast<std::size_t>(i)]);
        tab.components = static_cast<int>(p.scores.cols());
        tab.times.push_back(static_cast<double>(i) / steps);
        tab.grid_index.push_back(i);
        tab.scores.push_back(p.scores);
    }
    if (tab.components < 3)
        tab.note = "module dimension " + std::to_string(tab.components) +
                   " < 3: missing components written as 0";
    return tab;
}

inline void write_snapshot_csv(std::ostream& os, const SnapshotTable& tab)
{
    os << "t,index,pc1,pc2,pc3";
    for (Eigen::Index j = 0; j < tab.responses.cols(); ++j) os << ",y" << (j + 1);
    os << '\n';
    os.precision(17);
    for (std::size_t s = 0; s < tab.times.size(); ++s) {
        const auto& sc = tab.scores[s];
        for (Eigen::Index k = 0; k < sc.rows(); ++k) {
            os << tab.times[s] << ',' << k;
            for (Eigen::Index c = 0; c < 3; ++c) os << ',' << (c < sc.cols() ? sc(k, c) : 0.0);
            for (Eigen::Index j = 0; j < tab.responses.cols(); ++j) os << ',' << tab.responses(k, j);
            os << '\n';
        }
    }
}

} // namespace finemorphs
