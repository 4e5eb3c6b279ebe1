#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/flow.hpp"
#include "finemorphs/objective.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace finemorphs {

/// Standard deviations divide by N.
inline constexpr const char* kVarianceConvention = "population";

struct Standardization {
    Vector mu_x, sigma_x;
    Vector mu_y, sigma_y;
    int pad = 0;

    Matrix apply_x(const Matrix& x) const
    {
        require(x.cols() == mu_x.size(), "predictor dimension mismatch: expected " +
                                             std::to_string(mu_x.size()) + " columns, got " +
                                             std::to_string(x.cols()));
        Matrix out = x;
        out.rowwise() -= mu_x.transpose();
        out.array().rowwise() /= sigma_x.transpose().array();
        return out;
    }
    Matrix apply_y(const Matrix& y) const
    {
        require(y.cols() == mu_y.size(), "response dimension mismatch");
        Matrix out = y;
        out.rowwise() -= mu_y.transpose();
        out.array().rowwise() /= sigma_y.transpose().array();
        return out;
    }
    Matrix unapply_y(const Matrix& ys) const
    {
        require(ys.cols() == mu_y.size(), "response dimension mismatch");
        Matrix out = ys;
        out.array().rowwise() *= sigma_y.transpose().array();
        out.rowwise() += mu_y.transpose();
        return out;
    }
    ResponseScaling response_scaling() const { return {mu_y, sigma_y}; }
};

struct StandardizedDataset {
    Matrix x;         // N x (d_X + s): standardized predictors followed by pad columns
    Matrix y;         // N x d_Y standardized responses
    Matrix raw_y;     // N x d_Y original responses
    Standardization stats;

    Eigen::Index size() const { return x.rows(); }
    Matrix unpadded_x() const { return x.leftCols(x.cols() - stats.pad); }
};

namespace detail {

inline void column_stats(const Matrix& m, Vector& mean, Vector& sd)
{
    const double n = static_cast<double>(m.rows());
    mean = m.colwise().mean().transpose();
    sd.resize(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        sd[j] = std::sqrt((m.col(j).array() - mean[j]).square().sum() / n);
}

} // namespace detail

struct StandardizeResult {
    StandardizedDataset train;
    Matrix test_x; // standardized with train statistics, zero pads
};

/// Train pads are N(0, 0.01^2) draws; test pads are exact zeros. Constant predictor
/// columns keep sigma = 1 so that they standardize to zero.
inline StandardizeResult standardize(const Matrix& train_x, const Matrix& train_y,
                                     const Matrix& test_x, int s, std::uint64_t seed)
{
    require(train_x.rows() >= 2, "standardize: need at least 2 training rows");
    require(train_x.rows() == train_y.rows(), "standardize: predictor/response row mismatch");
    require(test_x.rows() == 0 || test_x.cols() == train_x.cols(),
            "standardize: test predictor dimension mismatch");
    require(s >= 0, "standardize: pad count must be >= 0");
    require(train_x.allFinite() && train_y.allFinite() && test_x.allFinite(),
            "standardize: data contains non-finite values");

    Standardization st;
    st.pad = s;
    detail::column_stats(train_x, st.mu_x, st.sigma_x);
    detail::column_stats(train_y, st.mu_y, st.sigma_y);
    for (Eigen::Index j = 0; j < st.sigma_x.size(); ++j)
        if (!(st.sigma_x[j] > 0.0)) st.sigma_x[j] = 1.0;
    for (Eigen::Index j = 0; j < st.sigma_y.size(); ++j)
        if (!(st.sigma_y[j] > 0.0))
            throw ValidationError("response column " + std::to_string(j) +
                                  " is constant; targets are degenerate");

    StandardizeResult out;
    out.train.stats = st;
    out.train.raw_y = train_y;
    out.train.y = st.apply_y(train_y);
    out.train.x = pad_columns(st.apply_x(train_x), s);
    if (s > 0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, 0.01);
        for (Eigen::Index k = 0; k < out.train.x.rows(); ++k)
            for (int j = 0; j < s; ++j) out.train.x(k, train_x.cols() + j) = noise(rng);
    }
    out.test_x = pad_columns(test_x.rows() ? st.apply_x(test_x) : Matrix(0, train_x.cols()), s);
    return out;
}

struct SigmaEstimate {
    double sigma_mse_sq = 0.0; // local-linear residual variance
    double sigma_sq_init = 0.0;
    int neighbors = 0;
};

inline int neighbor_count(int n, int d_x) { return std::min(2 * d_x + 1, n / 5); }

/// Indices of the k nearest neighbours of row i (self excluded; ties by lower index).
inline std::vector<Eigen::Index> nearest_neighbors(const Matrix& x, Eigen::Index i, int k)
{
    std::vector<std::pair<double, Eigen::Index>> dist;
    dist.reserve(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index j = 0; j < x.rows(); ++j)
        if (j != i) dist.emplace_back((x.row(j) - x.row(i)).squaredNorm(), j);
    const auto kk = static_cast<std::size_t>(k);
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    std::vector<Eigen::Index> out(kk);
    for (std::size_t j = 0; j < kk; ++j) out[j] = dist[j].second;
    return out;
}

/// Local linear regressions without intercept on the k nearest neighbours of every point.
/// x must be the unpadded standardized predictors.
inline SigmaEstimate estimate_sigma(const Matrix& x, const Matrix& y)
{
    require(x.rows() == y.rows(), "estimate_sigma: row mismatch");
    const auto n = static_cast<int>(x.rows());
    const int k = neighbor_count(n, static_cast<int>(x.cols()));
    if (k < 1)
        throw ValidationError("estimate_sigma: dataset too small (N = " + std::to_string(n) +
                              " gives k < 1)");
    const auto dy = y.cols();
    std::vector<double> per_point(static_cast<std::size_t>(n), 0.0);
#pragma omp parallel for schedule(dynamic, 16)
    for (int i = 0; i < n; ++i) {
        const auto nb = nearest_neighbors(x, i, k);
        Eigen::MatrixXd dx(k, x.cols()), dyv(k, dy);
        for (int j = 0; j < k; ++j) {
            dx.row(j) = x.row(nb[static_cast<std::size_t>(j)]) - x.row(i);
            dyv.row(j) = y.row(nb[static_cast<std::size_t>(j)]) - y.row(i);
        }
        // g^T solves dx * g^T = dyv in the least-norm least-squares sense.
        const Eigen::MatrixXd gt = dx.completeOrthogonalDecomposition().solve(dyv);
        per_point[static_cast<std::size_t>(i)] = (dyv - dx * gt).squaredNorm();
    }
    double total = 0.0;
    for (double v : per_point) total += v;
    SigmaEstimate est;
    est.neighbors = k;
    est.sigma_mse_sq = total / (static_cast<double>(n) * k * static_cast<double>(dy));
    est.sigma_sq_init =
        std::sqrt(static_cast<double>(n)) * std::max(std::sqrt(est.sigma_mse_sq) / 2.0, 0.01);
    return est;
}

/// k-means++ seeding: first index uniform, then proportional to squared distance to the
/// nearest chosen index. Never repeats an index.
inline std::vector<Eigen::Index> select_subset(const Matrix& x, int n_subset, std::uint64_t seed)
{
    const Eigen::Index n = x.rows();
    require(n_subset >= 1, "select_subset: N_S must be >= 1");
    require(n_subset <= n, "select_subset: N_S = " + std::to_string(n_subset) +
                               " exceeds the number of points " + std::to_string(n));
    std::mt19937_64 rng(seed);
    std::vector<Eigen::Index> chosen;
    chosen.reserve(static_cast<std::size_t>(n_subset));
    std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<char> used(static_cast<std::size_t>(n), 0);

    auto take = [&](Eigen::Index c) {
        chosen.push_back(c);
        used[static_cast<std::size_t>(c)] = 1;
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto ju = static_cast<std::size_t>(j);
            d2[ju] = used[ju] ? 0.0 : std::min(d2[ju], (x.row(j) - x.row(c)).squaredNorm());
        }
    };
    take(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
    while (static_cast<int>(chosen.size()) < n_subset) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        Eigen::Index pick = -1;
        if (total > 0.0) {
            const double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                const auto ju = static_cast<std::size_t>(j);
                if (used[ju] || d2[ju] <= 0.0) continue;
                acc += d2[ju];
                pick = j;
                if (acc > r) break;
            }
        }
        if (pick < 0) {
            // remaining points coincide with chosen ones: uniform over the unused indices
            std::vector<Eigen::Index> rest;
            for (Eigen::Index j = 0; j < n; ++j)
                if (!used[static_cast<std::size_t>(j)]) rest.push_back(j);
            pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
        }
        take(pick);
    }
    return chosen;
}

/// Anchor indices first (in selection order), then the remaining rows in original order.
inline std::vector<Eigen::Index> anchor_first_order(Eigen::Index n,
                                                    const std::vector<Eigen::Index>& anchors)
{
    std::vector<char> is_anchor(static_cast<std::size_t>(n), 0);
    std::vector<Eigen::Index> order(anchors);
    for (auto a : anchors) is_anchor[static_cast<std::size_t>(a)] = 1;
    for (Eigen::Index j = 0; j < n; ++j)
        if (!is_anchor[static_cast<std::size_t>(j)]) order.push_back(j);
    return order;
}

inline Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& idx)
{
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

enum class SplitKind { Standard, Gap };

struct Split {
    std::vector<Eigen::Index> train;
    std::vector<Eigen::Index> test;
};

struct SplitSet {
    SplitKind kind = SplitKind::Standard;
    std::uint64_t seed = 0;
    std::vector<Split> splits;
};

/// Standard: `count` seeded shuffles with round(N/10) test rows each.
/// Gap: one split per predictor column, test = ranks [floor(N/3), floor(2N/3)) of that column.
inline SplitSet make_splits(Eigen::Index n, SplitKind kind, int count, const Matrix& x,
                            std::uint64_t seed)
{
    SplitSet set;
    set.kind = kind;
    set.seed = seed;
    if (kind == SplitKind::Standard) {
        require(n >= 2, "make_splits: need at least 2 rows");
        require(count >= 1, "make_splits: count must be >= 1");
        const auto n_test = static_cast<Eigen::Index>(std::llround(static_cast<double>(n) / 10.0));
        std::mt19937_64 rng(seed);
        for (int c = 0; c < count; ++c) {
            std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), Eigen::Index{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            Split s;
            s.test.assign(perm.begin(), perm.begin() + n_test);
            s.train.assign(perm.begin() + n_test, perm.end());
            std::sort(s.test.begin(), s.test.end());
            std::sort(s.train.begin(), s.train.end());
            set.splits.push_back(std::move(s));
        }
    } else {
        require(n >= 3, "make_splits: gap splits need at least 3 rows");
        require(x.rows() == n && x.cols() >= 1, "make_splits: gap splits need the predictors");
        const Eigen::Index lo = n / 3, hi = (2 * n) / 3;
        for (Eigen::Index dim = 0; dim < x.cols(); ++dim) {
            std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), Eigen::Index{0});
            std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
                return x(a, dim) < x(b, dim);
            });
            Split s;
            for (Eigen::Index r = 0; r < n; ++r)
                (r >= lo && r < hi ? s.test : s.train).push_back(order[static_cast<std::size_t>(r)]);
            std::sort(s.test.begin(), s.test.end());
            std::sort(s.train.begin(), s.train.end());
            set.splits.push_back(std::move(s));
        }
    }
    return set;
}

} // namespace finemorphs
