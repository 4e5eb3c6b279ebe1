#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/flow.hpp"
#include "finemorphs/sequence.hpp"

namespace finemorphs {

struct ObjectiveBreakdown {
    double running = 0.0;  // deformation energy summed over D modules
    double affine = 0.0;   // lambda * sum U_q
    double endpoint = 0.0; // (1/sigma^2) sum_k ||y_k - pi_r(output_k)||^2
    double total = 0.0;
};

/// Per-response standardization (population convention).
struct ResponseScaling {
    Vector mean;
    Vector scale;
};

inline Matrix drop_columns(const Matrix& x, int r) { return x.leftCols(x.cols() - r); }

inline double endpoint_cost(const Matrix& outputs, const Matrix& targets, int drop,
                            double sigma_sq)
{
    require(sigma_sq > 0.0 && std::isfinite(sigma_sq), "sigma^2 must be positive and finite");
    require(outputs.rows() == targets.rows() && outputs.cols() - drop == targets.cols(),
            "endpoint_cost: outputs and targets disagree in shape");
    double s = 0.0;
    for (Eigen::Index k = 0; k < targets.rows(); ++k)
        s += (targets.row(k) - outputs.row(k).head(targets.cols())).squaredNorm();
    return s / sigma_sq;
}

/// Discretized objective from an already computed forward pass.
inline ObjectiveBreakdown evaluate(const SequenceSpec& spec, const ModelParams& params,
                                   const ForwardStates& fw, const Matrix& targets,
                                   double sigma_sq)
{
    ObjectiveBreakdown b;
    for (double r : fw.running) b.running += r;
    b.affine = affine_cost(spec, params);
    b.endpoint = endpoint_cost(fw.outputs(), targets, spec.drop, sigma_sq);
    b.total = b.running + b.affine + b.endpoint;
    return b;
}

/// Mean squared error in original response units: standardized outputs are mapped back with
/// scale * out + mean before comparing with the raw responses.
inline double train_mse(const Matrix& outputs, int drop, const Matrix& raw_targets,
                        const ResponseScaling& scaling)
{
    require(outputs.rows() == raw_targets.rows() && outputs.rows() > 0,
            "train_mse: row count mismatch");
    const Eigen::Index dy = raw_targets.cols();
    require(outputs.cols() - drop == dy && scaling.mean.size() == dy && scaling.scale.size() == dy,
            "train_mse: response dimension mismatch");
    double s = 0.0;
    for (Eigen::Index k = 0; k < outputs.rows(); ++k) {
        for (Eigen::Index j = 0; j < dy; ++j) {
            const double pred = scaling.scale[j] * outputs(k, j) + scaling.mean[j];
            const double e = raw_targets(k, j) - pred;
            s += e * e;
        }
    }
    return s / static_cast<double>(outputs.rows());
}

} // namespace finemorphs
