#pragma once

#include "finemorphs/common.hpp"

#include <span>

namespace finemorphs {

/// Width and state dimension of a matrix-valued kernel k(|y-x|/h) * I_d.
struct KernelConfig {
    double width = 0.5;
    int dim = 1;

    void validate() const
    {
        require(std::isfinite(width) && width > 0.0, "kernel width must be positive and finite");
        require(dim >= 1, "kernel dimension must be >= 1");
    }
};

namespace detail {

inline double matern_profile(double u) noexcept
{
    return (1.0 + u + 0.4 * u * u + u * u * u / 15.0) * std::exp(-u);
}

inline double squared_distance(const double* x, const double* y, int d) noexcept
{
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double diff = y[j] - x[j];
        s += diff * diff;
    }
    return s;
}

/// Kernel value and first-argument gradient scale at one pair, sharing a single exp.
/// The gradient is (x - y) * slope, with slope = k'(u) / (u h^2) written out so that
/// small u does not cancel.
struct KernelPair {
    double value;
    double slope;
};

inline KernelPair kernel_pair(double inv_width, double inv_width_sq, const double* x,
                              const double* y, int d) noexcept
{
    const double u = std::sqrt(squared_distance(x, y, d)) * inv_width;
    const double e = std::exp(-u);
    return {(1.0 + u + 0.4 * u * u + u * u * u / 15.0) * e,
            -(0.2 + 0.2 * u + u * u / 15.0) * e * inv_width_sq};
}

} // namespace detail

/// Scalar Matern profile k(u) = (1 + u + 0.4u^2 + u^3/15) e^{-u}.
inline double matern_scalar(double u)
{
    if (!std::isfinite(u) || u < 0.0)
        throw ValidationError("matern_scalar: argument must be finite and non-negative");
    return detail::matern_profile(u);
}

inline double kernel_eval(const KernelConfig& cfg, std::span<const double> x,
                          std::span<const double> y)
{
    require(x.size() == y.size() && static_cast<int>(x.size()) == cfg.dim,
            "kernel_eval: dimension mismatch");
    const double u =
        std::sqrt(detail::squared_distance(x.data(), y.data(), cfg.dim)) * (1.0 / cfg.width);
    return detail::matern_profile(u);
}

/// Gradient of k(|y-x|/h) with respect to x. Exactly zero at x == y.
inline Vector kernel_grad1(const KernelConfig& cfg, std::span<const double> x,
                           std::span<const double> y)
{
    require(x.size() == y.size() && static_cast<int>(x.size()) == cfg.dim,
            "kernel_grad1: dimension mismatch");
    const double inv_h = 1.0 / cfg.width;
    const auto kp = detail::kernel_pair(inv_h, inv_h * inv_h, x.data(), y.data(), cfg.dim);
    Vector g(cfg.dim);
    for (int j = 0; j < cfg.dim; ++j) g[j] = (x[j] - y[j]) * kp.slope;
    return g;
}

/// Evaluates v(t_k) = sum_l k(|anchor_l - t_k| / h) coeff_l at every target.
/// Rows are independent; within a row anchors are summed in ascending order.
inline Matrix gram_apply(const KernelConfig& cfg, const Matrix& targets, const Matrix& anchors,
                         const Matrix& coeffs)
{
    require(anchors.rows() > 0, "gram_apply: no anchors");
    require(anchors.rows() == coeffs.rows(), "gram_apply: anchors/coeffs count mismatch");
    require(targets.cols() == cfg.dim && anchors.cols() == cfg.dim && coeffs.cols() == cfg.dim,
            "gram_apply: dimension mismatch");
    const int d = cfg.dim;
    const Eigen::Index n_targets = targets.rows();
    const Eigen::Index n_anchors = anchors.rows();
    const double inv_h = 1.0 / cfg.width;
    Matrix out = Matrix::Zero(n_targets, d);
#pragma omp parallel for schedule(static)
    for (Eigen::Index k = 0; k < n_targets; ++k) {
        const double* tk = targets.row(k).data();
        double* ok = out.row(k).data();
        for (Eigen::Index l = 0; l < n_anchors; ++l) {
            const double u =
                std::sqrt(detail::squared_distance(tk, anchors.row(l).data(), d)) * inv_h;
            const double w = detail::matern_profile(u);
            const double* cl = coeffs.row(l).data();
            for (int j = 0; j < d; ++j) ok[j] += w * cl[j];
        }
    }
    return out;
}

} // namespace finemorphs
