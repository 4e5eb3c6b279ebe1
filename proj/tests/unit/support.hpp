#pragma once

#include "finemorphs/adjoint.hpp"
#include "finemorphs/optimizer.hpp"
#include "finemorphs/sequence.hpp"

#include <random>
#include <string>

namespace fmtest {

using finemorphs::Matrix;
using finemorphs::Vector;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                            double scale = 1.0)
{
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

/// A small problem with every parameter randomized.
struct Instance {
    finemorphs::SequenceSpec spec;
    finemorphs::ModelParams params;
    Matrix x;
    Matrix y;
    int n_anchor = 0;
    double sigma_sq = 1.0;
};

/// `d` is the D module dimension, `m` the number of D modules: (AD)^m A wiring.
inline Instance random_instance(std::uint64_t seed, int n, int n_anchor, int d, int m, int steps,
                                int d_y = 1, int drop = 0)
{
    std::mt19937_64 rng(seed);
    std::string name;
    for (int q = 0; q < m; ++q) name += "AD";
    name += "A";
    finemorphs::SequenceOverrides ov;
    ov.pad = 1;
    ov.drop = drop;
    ov.dims = {d};
    ov.steps = {steps};
    ov.lambda = 0.7;
    ov.identity_inner_affines = true;
    Instance in;
    in.spec = finemorphs::parse_sequence(name, 2, d_y, ov);
    in.n_anchor = n_anchor;
    in.params = finemorphs::init_params(in.spec, n_anchor, seed);
    for (auto& a : in.params.affines) {
        a.M = random_matrix(a.M.rows(), a.M.cols(), rng, 0.6);
        a.b = random_matrix(a.b.size(), 1, rng, 0.3);
    }
    for (auto& c : in.params.controls)
        for (auto& a : c.a) a = random_matrix(a.rows(), a.cols(), rng, 0.4);
    in.x = finemorphs::pad_columns(random_matrix(n, 2, rng), 1);
    in.y = random_matrix(n, d_y, rng);
    in.sigma_sq = 0.8;
    return in;
}

inline double objective_at(const Instance& in, const finemorphs::ModelParams& p)
{
    return finemorphs::full_gradient(in.spec, p, in.x, in.y, in.n_anchor, in.sigma_sq).value.total;
}

/// Worst relative error of the analytic gradient against central differences, over every
/// coordinate. Entries much smaller than the gradient's largest entry are compared against
/// that scale instead of their own magnitude.
inline double worst_fd_error(const Instance& in, double step = 1e-5)
{
    using namespace finemorphs;
    const auto L = make_layout(in.spec, in.n_anchor);
    const Vector x0 = flatten(in.spec, L, in.params);
    const auto vg = full_gradient(in.spec, in.params, in.x, in.y, in.n_anchor, in.sigma_sq);
    const Vector g = flatten_gradient(in.spec, L, vg.gradient);
    const double floor = 1e-3 * std::max(1.0, g.cwiseAbs().maxCoeff());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
        Vector xp = x0, xm = x0;
        xp[i] += step;
        xm[i] -= step;
        const double fp = objective_at(in, unflatten(in.spec, L, xp, in.params));
        const double fm = objective_at(in, unflatten(in.spec, L, xm, in.params));
        const double fd = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(fd), std::abs(g[i]), floor});
        worst = std::max(worst, std::abs(fd - g[i]) / denom);
    }
    return worst;
}

/// All-anchor costate recursion written from the optimal-case formula:
/// p(i)_k = p(i+1)_k + dt sum_l grad1 K(z_k, z_l) (p_k.a_l + a_k.p_l - 2 a_k.a_l),
/// dG/da(i)_l = dt (2 sum_k K_lk a_k - sum_k K_kl p(i+1)_k).
struct OptimalStep {
    Matrix p;
    Matrix grad;
};

inline double dotd(const double* x, const double* y, int d)
{
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += x[j] * y[j];
    return s;
}

inline OptimalStep optimal_step(const finemorphs::KernelConfig& k, const Matrix& z, const Matrix& a,
                                const Matrix& pn, double dt)
{
    const Eigen::Index n = z.rows();
    const int d = k.dim;
    const double ih = 1.0 / k.width;
    Matrix val(n, n), slope(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c) {
            const auto kp = finemorphs::detail::kernel_pair(ih, ih * ih, z.row(r).data(), z.row(c).data(), d);
            val(r, c) = kp.value;
            slope(r, c) = kp.slope;
        }
    OptimalStep out{pn, Matrix(n, d)};
    for (Eigen::Index kk = 0; kk < n; ++kk) {
        Vector acc = Vector::Zero(d);
        for (Eigen::Index l = 0; l < n; ++l) {
            const double c = dotd(pn.row(kk).data(), a.row(l).data(), d) +
                             dotd(a.row(kk).data(), pn.row(l).data(), d) -
                             2.0 * dotd(a.row(kk).data(), a.row(l).data(), d);
            for (int j = 0; j < d; ++j) acc[j] += (z(kk, j) - z(l, j)) * slope(kk, l) * c;
        }
        for (int j = 0; j < d; ++j) out.p(kk, j) = pn(kk, j) + dt * acc[j];
    }
    for (Eigen::Index l = 0; l < n; ++l) {
        Vector sa = Vector::Zero(d), sp = Vector::Zero(d);
        for (Eigen::Index kk = 0; kk < n; ++kk)
            for (int j = 0; j < d; ++j) sa[j] += val(l, kk) * a(kk, j);
        for (Eigen::Index kk = 0; kk < n; ++kk)
            for (int j = 0; j < d; ++j) sp[j] += val(kk, l) * pn(kk, j);
        for (int j = 0; j < d; ++j) out.grad(l, j) = dt * (2.0 * sa[j] - sp[j]);
    }
    return out;
}

} // namespace fmtest
