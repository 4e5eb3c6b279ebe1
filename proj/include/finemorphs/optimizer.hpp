#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/sequence.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace finemorphs {

// ------------------------------------------------------------------ flat parameter layout

enum class ParamClass { AffineM, AffineB, Control };

struct FlatSegment {
    int module = 0;   // index into SequenceSpec::modules
    ParamClass cls = ParamClass::AffineM;
    int step = 0;     // time index for controls
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
};

struct FlatLayout {
    std::vector<FlatSegment> segments;
    Eigen::Index total = 0;
};

/// Module order, then M (row-major), b for affines and a(0), ..., a(T-1) (row-major) for
/// D modules.
inline FlatLayout make_layout(const SequenceSpec& spec, int n_subset)
{
    FlatLayout L;
    auto add = [&](int q, ParamClass c, int step, Eigen::Index size) {
        L.segments.push_back({q, c, step, L.total, size});
        L.total += size;
    };
    for (std::size_t q = 0; q < spec.modules.size(); ++q) {
        const auto& m = spec.modules[q];
        const int qi = static_cast<int>(q);
        if (m.is_affine()) {
            add(qi, ParamClass::AffineM, 0, static_cast<Eigen::Index>(m.out_dim) * m.in_dim);
            add(qi, ParamClass::AffineB, 0, m.out_dim);
        } else {
            for (int i = 0; i < m.steps; ++i)
                add(qi, ParamClass::Control, i, static_cast<Eigen::Index>(n_subset) * m.in_dim);
        }
    }
    return L;
}

namespace detail {

template <class Params, class Fn>
void walk_layout(const SequenceSpec& spec, const FlatLayout& L, Params& p, Fn&& fn)
{
    for (const auto& seg : L.segments) {
        const auto& m = spec.modules[static_cast<std::size_t>(seg.module)];
        const auto slot = static_cast<std::size_t>(m.slot);
        switch (seg.cls) {
        case ParamClass::AffineM: {
            auto& M = p.affines[slot].M;
            require(M.size() == seg.size, "flat layout does not match affine M shape");
            Eigen::Index o = seg.offset;
            for (Eigen::Index r = 0; r < M.rows(); ++r)
                for (Eigen::Index c = 0; c < M.cols(); ++c) fn(o++, M(r, c));
            break;
        }
        case ParamClass::AffineB: {
            auto& b = p.affines[slot].b;
            require(b.size() == seg.size, "flat layout does not match affine b shape");
            for (Eigen::Index j = 0; j < b.size(); ++j) fn(seg.offset + j, b[j]);
            break;
        }
        case ParamClass::Control: {
            auto& a = p.controls[slot].a[static_cast<std::size_t>(seg.step)];
            require(a.size() == seg.size, "flat layout does not match control shape");
            for (Eigen::Index j = 0; j < a.size(); ++j) fn(seg.offset + j, a.data()[j]);
            break;
        }
        }
    }
}

} // namespace detail

inline Vector flatten(const SequenceSpec& spec, const FlatLayout& L, const ModelParams& p)
{
    Vector v(L.total);
    detail::walk_layout(spec, L, p, [&](Eigen::Index i, const double& x) { v[i] = x; });
    return v;
}

/// `shape` supplies the container shapes; its values are overwritten.
inline ModelParams unflatten(const SequenceSpec& spec, const FlatLayout& L, const Vector& v,
                             ModelParams shape)
{
    require(v.size() == L.total, "flat vector length does not match layout");
    detail::walk_layout(spec, L, shape, [&](Eigen::Index i, double& x) { x = v[i]; });
    return shape;
}

/// Gradient bundles share the ModelParams layout.
template <class Bundle>
Vector flatten_gradient(const SequenceSpec& spec, const FlatLayout& L, const Bundle& g)
{
    ModelParams tmp;
    tmp.affines.resize(g.d_M.size());
    for (std::size_t i = 0; i < g.d_M.size(); ++i) tmp.affines[i] = {g.d_M[i], g.d_b[i]};
    tmp.controls = g.d_controls;
    return flatten(spec, L, tmp);
}

// ------------------------------------------------------------------ L-BFGS

struct OptimizerConfig {
    int memory = 10;
    int max_iters = 5000;
    double grad_tol = 1e-6;
    double obj_rel_tol = 1e-10;
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.9;
    int max_linesearch = 40;

    void validate() const
    {
        require(memory >= 1, "optimizer memory must be >= 1");
        require(max_iters >= 0, "max_iters must be >= 0");
        require(grad_tol > 0.0 && obj_rel_tol > 0.0, "optimizer tolerances must be > 0");
        require(0.0 < wolfe_c1 && wolfe_c1 < wolfe_c2 && wolfe_c2 < 1.0,
                "Wolfe constants must satisfy 0 < c1 < c2 < 1");
        require(max_linesearch >= 1, "max_linesearch must be >= 1");
    }
};

enum class StopReason { GradientTolerance, ObjectiveTolerance, MaxIterations, LineSearchFailed };

inline const char* to_string(StopReason r)
{
    switch (r) {
    case StopReason::GradientTolerance: return "gradient_tolerance";
    case StopReason::ObjectiveTolerance: return "objective_tolerance";
    case StopReason::MaxIterations: return "max_iterations";
    case StopReason::LineSearchFailed: return "line_search_failed";
    }
    return "unknown";
}

struct OptimizerReport {
    int iterations = 0;
    int f_evals = 0;
    StopReason reason = StopReason::MaxIterations;
    std::vector<double> values; // objective at x0 and after every accepted step
    int wolfe_violations = 0;   // accepted steps failing either strong Wolfe inequality
};

struct MinimizeResult {
    Vector x;
    double value = 0.0;
    Vector gradient;
    OptimizerReport report;
};

/// Objective callback: returns f(x) and writes the gradient.
using Objective = std::function<double(const Vector& x, Vector& grad)>;

namespace detail {

struct LinePoint {
    double step = 0.0;
    double f = 0.0;
    double df = 0.0;
    Vector x;
    Vector g;
};

// Minimizer of the cubic matching (a, fa, da) and (b, fb, db); NaN if it does not exist.
inline double cubic_min(double a, double fa, double da, double b, double fb, double db)
{
    const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
    const double disc = d1 * d1 - da * db;
    if (!(disc >= 0.0)) return std::numeric_limits<double>::quiet_NaN();
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double denom = db - da + 2.0 * d2;
    if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return b - (b - a) * (db + d2 - d1) / denom;
}

class StrongWolfeSearch {
public:
    StrongWolfeSearch(const Objective& f, const OptimizerConfig& cfg, int& f_evals)
        : f_(f), cfg_(cfg), f_evals_(f_evals)
    {
    }

    /// Returns true with `out` set to a strong Wolfe point, or false if the budget ran out.
    bool search(const Vector& x0, double f0, const Vector& dir, double df0, double step0,
                LinePoint& out)
    {
        f0_ = f0;
        df0_ = df0;
        x0_ = &x0;
        dir_ = &dir;
        evals_ = 0;

        LinePoint prev{0.0, f0, df0, {}, {}};
        double step = step0;
        bool first = true;
        while (evals_ < cfg_.max_linesearch) {
            LinePoint cur = eval(step);
            if (!armijo(cur) || (!first && cur.f >= prev.f)) return zoom(prev, cur, out);
            if (std::abs(cur.df) <= -cfg_.wolfe_c2 * df0_) {
                out = std::move(cur);
                return true;
            }
            if (cur.df >= 0.0) return zoom(cur, prev, out);
            prev = std::move(cur);
            step *= 2.0;
            first = false;
        }
        return false;
    }

private:
    bool armijo(const LinePoint& p) const
    {
        return std::isfinite(p.f) && p.f <= f0_ + cfg_.wolfe_c1 * p.step * df0_;
    }

    LinePoint eval(double step)
    {
        ++evals_;
        ++f_evals_;
        LinePoint p;
        p.step = step;
        p.x = *x0_ + step * *dir_;
        p.g.resize(p.x.size());
        try {
            p.f = f_(p.x, p.g);
        } catch (const NumericalError&) {
            p.f = std::numeric_limits<double>::infinity();
        }
        if (!std::isfinite(p.f) || !p.g.allFinite()) {
            p.f = std::numeric_limits<double>::infinity();
            p.df = std::numeric_limits<double>::quiet_NaN();
        } else {
            p.df = p.g.dot(*dir_);
        }
        return p;
    }

    bool zoom(LinePoint lo, LinePoint hi, LinePoint& out)
    {
        while (evals_ < cfg_.max_linesearch) {
            const double a = lo.step, b = hi.step;
            const double lo_b = std::min(a, b), hi_b = std::max(a, b);
            const double margin = 0.1 * (hi_b - lo_b);
            double step = std::numeric_limits<double>::quiet_NaN();
            if (std::isfinite(hi.f) && std::isfinite(hi.df))
                step = cubic_min(a, lo.f, lo.df, b, hi.f, hi.df);
            if (!(step >= lo_b + margin && step <= hi_b - margin)) step = 0.5 * (a + b);
            if (step == a || step == b) return false;

            LinePoint cur = eval(step);
            if (!armijo(cur) || cur.f >= lo.f) {
                hi = std::move(cur);
            } else {
                if (std::abs(cur.df) <= -cfg_.wolfe_c2 * df0_) {
                    out = std::move(cur);
                    return true;
                }
                if (cur.df * (hi.step - lo.step) >= 0.0) hi = std::move(lo);
                lo = std::move(cur);
            }
        }
        return false;
    }

    const Objective& f_;
    const OptimizerConfig& cfg_;
    int& f_evals_;
    double f0_ = 0.0, df0_ = 0.0;
    const Vector* x0_ = nullptr;
    const Vector* dir_ = nullptr;
    int evals_ = 0;
};

} // namespace detail

/// L-BFGS with a strong Wolfe line search. Accepted iterates never increase f.
inline MinimizeResult minimize(const Objective& f, const Vector& x0, const OptimizerConfig& cfg,
                               const std::function<void(int, double)>& on_iter = {})
{
    cfg.validate();
    require(x0.allFinite(), "minimize: initial point is not finite");
    MinimizeResult res;
    res.x = x0;
    res.gradient.resize(x0.size());
    res.value = f(res.x, res.gradient);
    res.report.f_evals = 1;
    if (!std::isfinite(res.value) || !res.gradient.allFinite())
        throw NumericalError("minimize: objective or gradient is not finite at the initial point");
    res.report.values.push_back(res.value);

    auto sup = [](const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };
    if (sup(res.gradient) < cfg.grad_tol) {
        res.report.reason = StopReason::GradientTolerance;
        return res;
    }

    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;
    detail::StrongWolfeSearch ls(f, cfg, res.report.f_evals);

    while (true) {
        if (res.report.iterations >= cfg.max_iters) {
            res.report.reason = StopReason::MaxIterations;
            break;
        }
        // two-loop recursion
        Vector dir = -res.gradient;
        if (s_hist.empty()) {
            dir /= res.gradient.norm();
        } else {
            std::vector<double> alpha(s_hist.size());
            for (std::size_t j = s_hist.size(); j-- > 0;) {
                alpha[j] = rho_hist[j] * s_hist[j].dot(dir);
                dir -= alpha[j] * y_hist[j];
            }
            dir *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            for (std::size_t j = 0; j < s_hist.size(); ++j) {
                const double beta = rho_hist[j] * y_hist[j].dot(dir);
                dir += (alpha[j] - beta) * s_hist[j];
            }
        }
        double df0 = res.gradient.dot(dir);
        if (!(df0 < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -res.gradient / res.gradient.norm();
            df0 = res.gradient.dot(dir);
        }

        detail::LinePoint next;
        if (!ls.search(res.x, res.value, dir, df0, 1.0, next)) {
            res.report.reason = StopReason::LineSearchFailed;
            break;
        }
        const bool sufficient = next.f <= res.value + cfg.wolfe_c1 * next.step * df0;
        const bool curvature = std::abs(next.df) <= -cfg.wolfe_c2 * df0;
        if (!sufficient || !curvature) ++res.report.wolfe_violations;

        Vector s = next.x - res.x;
        Vector y = next.g - res.gradient;
        const double sy = s.dot(y);
        const double f_prev = res.value;
        res.x = std::move(next.x);
        res.gradient = std::move(next.g);
        res.value = next.f;
        ++res.report.iterations;
        res.report.values.push_back(res.value);
        if (on_iter) on_iter(res.report.iterations, res.value);

        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (static_cast<int>(s_hist.size()) == cfg.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            rho_hist.push_back(1.0 / sy);
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
        }

        if (sup(res.gradient) < cfg.grad_tol) {
            res.report.reason = StopReason::GradientTolerance;
            break;
        }
        const double scale = std::max({std::abs(f_prev), std::abs(res.value), 1.0});
        if ((f_prev - res.value) / scale <= cfg.obj_rel_tol) {
            res.report.reason = StopReason::ObjectiveTolerance;
            break;
        }
    }
    return res;
}

} // namespace finemorphs
