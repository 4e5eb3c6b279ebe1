#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/kernels.hpp"
#include "finemorphs/sequence.hpp"

#include <string>
#include <vector>

namespace finemorphs {

/// Anchor states z[i] (N_S x d, i = 0..T) for every D module, indexed by control slot.
/// This is everything prediction needs besides the parameters.
struct TrajectoryCache {
    std::vector<std::vector<Matrix>> z;
};

/// Output of one D module integration.
struct FlowResult {
    std::vector<Matrix> trajectory; // all points, i = 0..T (only when requested)
    Matrix output;                  // states at t = 1
    double running_cost = 0.0;      // (1/T) sum_i sum_{k,l < N_S} a_k^T K_kl a_l
};

/// Everything the backward sweep needs from one forward pass.
struct ForwardStates {
    std::vector<Matrix> boundary;              // boundary[q] = input of module q; back() = output
    std::vector<std::vector<Matrix>> traj;     // per D slot, full trajectories (all N points)
    std::vector<double> running;               // per D slot
    int n_anchor = 0;

    const Matrix& outputs() const { return boundary.back(); }
};

namespace detail {

inline void check_finite_step(const Matrix& z, int module, int step)
{
    if (!z.allFinite())
        throw NumericalError("non-finite state in D module " + std::to_string(module) +
                             " after step " + std::to_string(step + 1) +
                             " (flow diverged; try a smaller step size or larger sigma)");
}

/// v_k = sum_{l < n_anchor} K(z_k, z_l) a_l for the first n_rows points, with
/// anchors taken from the same matrix.
inline Matrix self_field(const KernelConfig& kernel, const Matrix& z, Eigen::Index n_anchor,
                         const Matrix& a)
{
    const int d = kernel.dim;
    const double inv_h = 1.0 / kernel.width;
    const Eigen::Index n = z.rows();
    Matrix v = Matrix::Zero(n, d);
#pragma omp parallel for schedule(static)
    for (Eigen::Index k = 0; k < n; ++k) {
        const double* zk = z.row(k).data();
        double* vk = v.row(k).data();
        for (Eigen::Index l = 0; l < n_anchor; ++l) {
            const double w = matern_profile(
                std::sqrt(squared_distance(zk, z.row(l).data(), d)) * inv_h);
            const double* al = a.row(l).data();
            for (int j = 0; j < d; ++j) vk[j] += w * al[j];
        }
    }
    return v;
}

inline double dot(const double* x, const double* y, int d) noexcept
{
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x[j] * y[j];
    return s;
}

} // namespace detail

/// Forward Euler flow of one D module. The first controls.a[i].rows() rows of `states`
/// are anchors; the rest are passengers moved by the anchor-generated field.
inline FlowResult integrate_flow(const KernelConfig& kernel, const ControlField& controls,
                                 Matrix states, bool keep_trajectory, int module_index = 0)
{
    require(!controls.a.empty(), "integrate_flow: no time steps");
    const Eigen::Index n_anchor = controls.a.front().rows();
    require(n_anchor >= 1 && n_anchor <= states.rows(), "integrate_flow: bad anchor count");
    require(states.cols() == kernel.dim, "integrate_flow: state dimension mismatch");
    const int steps = static_cast<int>(controls.a.size());
    const double dt = 1.0 / steps;
    const int d = kernel.dim;

    FlowResult res;
    if (keep_trajectory) res.trajectory.reserve(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i < steps; ++i) {
        const Matrix& a = controls.a[static_cast<std::size_t>(i)];
        require(a.rows() == n_anchor && a.cols() == d, "integrate_flow: control shape mismatch");
        if (keep_trajectory) res.trajectory.push_back(states);
        const Matrix v = detail::self_field(kernel, states, n_anchor, a);
        double run = 0.0;
        for (Eigen::Index k = 0; k < n_anchor; ++k)
            run += detail::dot(a.row(k).data(), v.row(k).data(), d);
        res.running_cost += dt * run;
        for (Eigen::Index k = 0; k < states.rows(); ++k)
            for (int j = 0; j < d; ++j) states(k, j) = states(k, j) + dt * v(k, j);
        detail::check_finite_step(states, module_index, i);
    }
    if (keep_trajectory) res.trajectory.push_back(states);
    res.output = std::move(states);
    return res;
}

/// Moves passengers through a D module whose anchor trajectory is already known.
/// Anchors are not re-evolved. When `record` is given it receives the passenger states at
/// every time point (T + 1 entries).
inline Matrix transport_passengers(const KernelConfig& kernel, const ControlField& controls,
                                   const std::vector<Matrix>& anchor_traj, Matrix passengers,
                                   int module_index = 0, std::vector<Matrix>* record = nullptr)
{
    const int steps = static_cast<int>(controls.a.size());
    require(static_cast<int>(anchor_traj.size()) == steps + 1,
            "transport_passengers: cached trajectory length does not match controls");
    require(passengers.cols() == kernel.dim, "transport_passengers: dimension mismatch");
    const double dt = 1.0 / steps;
    const int d = kernel.dim;
    if (record) record->assign(1, passengers);
    for (int i = 0; i < steps; ++i) {
        const auto& a = controls.a[static_cast<std::size_t>(i)];
        const Matrix v = gram_apply(kernel, passengers, anchor_traj[static_cast<std::size_t>(i)], a);
        for (Eigen::Index k = 0; k < passengers.rows(); ++k)
            for (int j = 0; j < d; ++j) passengers(k, j) = passengers(k, j) + dt * v(k, j);
        detail::check_finite_step(passengers, module_index, i);
        if (record) record->push_back(passengers);
    }
    return passengers;
}

struct ModuleFlowOutput {
    std::vector<Matrix> anchor_trajectory; // i = 0..T, N_S rows each
    Matrix anchors_out;
    Matrix passengers_out;
};

/// One D module on separate anchor and passenger sets.
inline ModuleFlowOutput flow_module(const KernelConfig& kernel, const ControlField& controls,
                                    const Matrix& anchors_in, const Matrix& passengers_in)
{
    require(!controls.a.empty() && anchors_in.rows() == controls.a.front().rows(),
            "flow_module: anchor count must equal the control field's second axis");
    require(passengers_in.rows() == 0 || passengers_in.cols() == anchors_in.cols(),
            "flow_module: passenger dimension mismatch");
    auto anchors = integrate_flow(kernel, controls, anchors_in, true);
    ModuleFlowOutput out;
    out.passengers_out = passengers_in.rows() > 0
                             ? transport_passengers(kernel, controls, anchors.trajectory,
                                                    passengers_in)
                             : Matrix(0, anchors_in.cols());
    out.anchors_out = std::move(anchors.output);
    out.anchor_trajectory = std::move(anchors.trajectory);
    return out;
}

inline Matrix apply_affine(const AffineParams& ap, const Matrix& x)
{
    Matrix out = x * ap.M.transpose();
    out.rowwise() += ap.b.transpose();
    return out;
}

/// Pads s extra zero columns (iota_s).
inline Matrix pad_columns(const Matrix& x, int s)
{
    Matrix out = Matrix::Zero(x.rows(), x.cols() + s);
    out.leftCols(x.cols()) = x;
    return out;
}

/// Runs the whole chain. inputs are already padded to d_X + s and the first n_anchor
/// rows are the anchors.
inline ForwardStates forward_pass(const SequenceSpec& spec, const ModelParams& params,
                                  const Matrix& inputs, int n_anchor)
{
    require(inputs.cols() == spec.input_dim(), "forward_pass: inputs must have d_X + s columns");
    require(n_anchor >= 1 && n_anchor <= inputs.rows(), "forward_pass: bad anchor count");
    check_params(spec, params, n_anchor);
    ForwardStates fw;
    fw.n_anchor = n_anchor;
    fw.boundary.reserve(spec.modules.size() + 1);
    fw.boundary.push_back(inputs);
    fw.traj.resize(params.controls.size());
    fw.running.assign(params.controls.size(), 0.0);
    for (std::size_t q = 0; q < spec.modules.size(); ++q) {
        const auto& m = spec.modules[q];
        const auto slot = static_cast<std::size_t>(m.slot);
        if (m.is_affine()) {
            fw.boundary.push_back(apply_affine(params.affines[slot], fw.boundary.back()));
        } else {
            auto r = integrate_flow(m.kernel, params.controls[slot], fw.boundary.back(), true,
                                    static_cast<int>(q));
            fw.running[slot] = r.running_cost;
            fw.traj[slot] = std::move(r.trajectory);
            fw.boundary.push_back(std::move(r.output));
        }
    }
    return fw;
}

/// Anchor rows of every D module trajectory.
inline TrajectoryCache extract_cache(const ForwardStates& fw)
{
    TrajectoryCache c;
    c.z.reserve(fw.traj.size());
    for (const auto& tr : fw.traj) {
        std::vector<Matrix> rows;
        rows.reserve(tr.size());
        for (const auto& z : tr) rows.push_back(z.topRows(fw.n_anchor));
        c.z.push_back(std::move(rows));
    }
    return c;
}

/// Propagates new points through a trained chain as passengers of the cached anchors.
inline Matrix propagate_passengers(const SequenceSpec& spec, const ModelParams& params,
                                   const TrajectoryCache& cache, Matrix x_padded)
{
    require(x_padded.cols() == spec.input_dim(),
            "propagate_passengers: inputs must have d_X + s columns");
    require(cache.z.size() == params.controls.size(), "trajectory cache does not match model");
    for (std::size_t q = 0; q < spec.modules.size(); ++q) {
        const auto& m = spec.modules[q];
        const auto slot = static_cast<std::size_t>(m.slot);
        if (m.is_affine())
            x_padded = apply_affine(params.affines[slot], x_padded);
        else
            x_padded = transport_passengers(m.kernel, params.controls[slot], cache.z[slot],
                                            std::move(x_padded), static_cast<int>(q));
    }
    return x_padded;
}

} // namespace finemorphs
