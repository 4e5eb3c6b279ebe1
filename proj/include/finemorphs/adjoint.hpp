#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/flow.hpp"
#include "finemorphs/objective.hpp"
#include "finemorphs/sequence.hpp"

#include <string>
#include <vector>

namespace finemorphs {

/// Costates use the backpropagation convention p = -dG/d(state).
struct CostateBundle {
    std::vector<std::vector<Matrix>> p; // per D slot, i = 0..T, all N points
    std::vector<Matrix> boundary;       // boundary[q] pairs with ForwardStates::boundary[q]
};

/// True gradients dG/d(theta), shaped like ModelParams.
struct GradientBundle {
    std::vector<ControlField> d_controls;
    std::vector<Eigen::MatrixXd> d_M;
    std::vector<Vector> d_b;
};

/// rho_k = (2 / sigma^2) iota_r(y_k - pi_r(output_k)).
inline Matrix endpoint_costate(const Matrix& outputs, const Matrix& targets, int drop,
                               double sigma_sq)
{
    require(sigma_sq > 0.0 && std::isfinite(sigma_sq), "sigma^2 must be positive and finite");
    require(outputs.rows() == targets.rows() && outputs.cols() - drop == targets.cols(),
            "endpoint_costate: shape mismatch");
    Matrix rho = Matrix::Zero(outputs.rows(), outputs.cols());
    const double w = 2.0 / sigma_sq;
    rho.leftCols(targets.cols()) = w * (targets - outputs.leftCols(targets.cols()));
    return rho;
}

namespace detail {

/// Pairwise kernel values and gradient scales between all points (rows) and anchors (cols).
struct PairTables {
    Matrix value;
    Matrix slope;
};

inline PairTables pair_tables(const KernelConfig& kernel, const Matrix& z, Eigen::Index n_anchor)
{
    const double inv_h = 1.0 / kernel.width;
    const double inv_h2 = inv_h * inv_h;
    const int d = kernel.dim;
    PairTables t{Matrix(z.rows(), n_anchor), Matrix(z.rows(), n_anchor)};
#pragma omp parallel for schedule(static)
    for (Eigen::Index k = 0; k < z.rows(); ++k) {
        for (Eigen::Index l = 0; l < n_anchor; ++l) {
            const auto kp = kernel_pair(inv_h, inv_h2, z.row(k).data(), z.row(l).data(), d);
            t.value(k, l) = kp.value;
            t.slope(k, l) = kp.slope;
        }
    }
    return t;
}

/// One reverse Euler step of the discrete adjoint. Given p_next = p(i+1), states z(i),
/// and controls a(i), returns p(i) and writes dG/da(i) into grad_a.
inline Matrix adjoint_step(const KernelConfig& kernel, const Matrix& z, const Matrix& a,
                           const Matrix& p_next, double dt, Matrix& grad_a)
{
    const Eigen::Index n = z.rows();
    const Eigen::Index ns = a.rows();
    const int d = kernel.dim;
    const PairTables t = pair_tables(kernel, z, ns);

    Matrix p = p_next;
#pragma omp parallel for schedule(static)
    for (Eigen::Index k = 0; k < n; ++k) {
        const double* zk = z.row(k).data();
        const double* pk = p_next.row(k).data();
        Vector acc = Vector::Zero(d);
        if (k < ns) {
            const double* ak = a.row(k).data();
            for (Eigen::Index l = 0; l < n; ++l) {
                const double* zl = z.row(l).data();
                const double* pl = p_next.row(l).data();
                double s, c;
                if (l < ns) {
                    const double* al = a.row(l).data();
                    s = t.slope(k, l);
                    c = dot(pk, al, d) + dot(ak, pl, d) - 2.0 * dot(ak, al, d);
                } else {
                    s = t.slope(l, k);
                    c = dot(ak, pl, d);
                }
                for (int j = 0; j < d; ++j) acc[j] += (zk[j] - zl[j]) * s * c;
            }
        } else {
            for (Eigen::Index l = 0; l < ns; ++l) {
                const double* zl = z.row(l).data();
                const double s = t.slope(k, l);
                const double c = dot(pk, a.row(l).data(), d);
                for (int j = 0; j < d; ++j) acc[j] += (zk[j] - zl[j]) * s * c;
            }
        }
        for (int j = 0; j < d; ++j) p(k, j) = pk[j] + dt * acc[j];
    }

    grad_a.resize(ns, d);
#pragma omp parallel for schedule(static)
    for (Eigen::Index l = 0; l < ns; ++l) {
        Vector sa = Vector::Zero(d);
        Vector sp = Vector::Zero(d);
        for (Eigen::Index k = 0; k < ns; ++k) {
            const double w = t.value(l, k);
            for (int j = 0; j < d; ++j) sa[j] += w * a(k, j);
        }
        for (Eigen::Index k = 0; k < n; ++k) {
            const double w = t.value(k, l);
            for (int j = 0; j < d; ++j) sp[j] += w * p_next(k, j);
        }
        for (int j = 0; j < d; ++j) grad_a(l, j) = dt * (2.0 * sa[j] - sp[j]);
    }
    return p;
}

} // namespace detail

/// Exact reverse-mode derivative of the discretized objective through the whole chain.
inline std::pair<CostateBundle, GradientBundle>
backward_pass(const SequenceSpec& spec, const ModelParams& params, const ForwardStates& fw,
              const Matrix& targets, double sigma_sq)
{
    require(fw.boundary.size() == spec.modules.size() + 1, "backward_pass: forward states missing");
    require(fw.traj.size() == params.controls.size(), "backward_pass: trajectories missing");
    CostateBundle cs;
    GradientBundle gb;
    cs.boundary.resize(spec.modules.size() + 1);
    cs.p.resize(params.controls.size());
    gb.d_controls.resize(params.controls.size());
    gb.d_M.resize(params.affines.size());
    gb.d_b.resize(params.affines.size());
    const auto cost_grad = affine_cost_gradient(spec, params);

    Matrix c = endpoint_costate(fw.outputs(), targets, spec.drop, sigma_sq);
    cs.boundary.back() = c;
    for (std::size_t qq = spec.modules.size(); qq-- > 0;) {
        const auto& m = spec.modules[qq];
        const auto slot = static_cast<std::size_t>(m.slot);
        const Matrix& input = fw.boundary[qq];
        if (m.is_affine()) {
            const auto& ap = params.affines[slot];
            gb.d_M[slot] = cost_grad[slot] - c.transpose() * input;
            gb.d_b[slot] = -c.colwise().sum().transpose();
            c = c * ap.M;
        } else {
            const auto& traj = fw.traj[slot];
            const auto& ctrl = params.controls[slot];
            const int steps = m.steps;
            const double dt = 1.0 / steps;
            auto& p = cs.p[slot];
            p.assign(static_cast<std::size_t>(steps) + 1, Matrix());
            p[static_cast<std::size_t>(steps)] = c;
            auto& ga = gb.d_controls[slot].a;
            ga.assign(static_cast<std::size_t>(steps), Matrix());
            for (int i = steps - 1; i >= 0; --i) {
                const auto iu = static_cast<std::size_t>(i);
                p[iu] = detail::adjoint_step(m.kernel, traj[iu], ctrl.a[iu], p[iu + 1], dt, ga[iu]);
            }
            c = p.front();
        }
        if (!c.allFinite())
            throw NumericalError("non-finite costate at module " + std::to_string(qq));
        cs.boundary[qq] = c;
    }
    return {std::move(cs), std::move(gb)};
}

struct ValueAndGradient {
    ObjectiveBreakdown value;
    GradientBundle gradient;
};

/// Forward pass, objective, and backward pass sharing one trajectory computation.
inline ValueAndGradient full_gradient(const SequenceSpec& spec, const ModelParams& params,
                                      const Matrix& inputs, const Matrix& targets, int n_anchor,
                                      double sigma_sq)
{
    const ForwardStates fw = forward_pass(spec, params, inputs, n_anchor);
    ValueAndGradient out;
    out.value = evaluate(spec, params, fw, targets, sigma_sq);
    out.gradient = backward_pass(spec, params, fw, targets, sigma_sq).second;
    return out;
}

} // namespace finemorphs
