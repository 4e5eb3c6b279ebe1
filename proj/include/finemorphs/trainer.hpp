#pragma once

#include "finemorphs/adjoint.hpp"
#include "finemorphs/common.hpp"
#include "finemorphs/flow.hpp"
#include "finemorphs/objective.hpp"
#include "finemorphs/optimizer.hpp"
#include "finemorphs/preprocess.hpp"
#include "finemorphs/sequence.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace finemorphs {

struct TrainConfig {
    int max_sigma_loops = 20;
    double sigma_decay = 0.5; // multiplier applied to sigma^2 after an unsuccessful loop
    OptimizerConfig optimizer{};
    std::uint64_t rng_seed = 0;
    int n_subset = 0; // 0: use the spec's value; if that is 0 too, every training point
    /// Skips the sigma search and trains once at this sigma^2.
    std::optional<double> fixed_sigma_sq;
    /// Progress lines (key=value pairs) go here when non-null.
    std::ostream* progress = nullptr;

    void validate() const
    {
        require(max_sigma_loops >= 1, "max_sigma_loops must be >= 1");
        require(sigma_decay > 0.0 && sigma_decay < 1.0, "sigma_decay must lie in (0, 1)");
        require(n_subset >= 0, "n_subset must be >= 0");
        require(!fixed_sigma_sq || *fixed_sigma_sq > 0.0, "fixed sigma^2 must be > 0");
        optimizer.validate();
    }
};

struct LoopRecord {
    double sigma_sq = 0.0;
    double train_mse = 0.0;
    ObjectiveBreakdown objective;
    int iterations = 0;
    StopReason reason = StopReason::MaxIterations;
};

struct TrainingReport {
    double sigma_mse_sq = 0.0;
    double sigma_sq_init = 0.0;
    double mse_target = 0.0;
    std::vector<LoopRecord> loops; // sigma loops followed by the final loop
    int minimize_calls = 0;
    double final_train_mse = 0.0;
    ObjectiveBreakdown final_objective;
    std::string sigma_schedule = "geometric";
};

struct TrainedModel {
    SequenceSpec spec;
    ModelParams params;
    TrajectoryCache cache;
    Standardization stats;
    int n_anchor = 0;
    double sigma_sq = 0.0;
    std::uint64_t seed = 0;
    TrainingReport report;
};

/// Named step for carrying parameters from one sigma loop into the next.
inline ModelParams warm_start(const ModelParams& prev) { return prev; }

/// Problem data in training order (anchors first).
struct TrainingData {
    Matrix x;     // standardized, padded
    Matrix y;     // standardized
    Matrix raw_y; // original units
    int n_anchor = 0;
};

struct MinimizeOutcome {
    ModelParams params;
    OptimizerReport report;
};

/// Minimizes the discretized objective at fixed sigma^2, starting from `start`.
inline MinimizeOutcome minimize_objective(const SequenceSpec& spec, const TrainingData& data,
                                          const ModelParams& start, double sigma_sq,
                                          const OptimizerConfig& cfg)
{
    const FlatLayout layout = make_layout(spec, data.n_anchor);
    const Objective f = [&](const Vector& v, Vector& grad) {
        const ModelParams p = unflatten(spec, layout, v, start);
        const auto vg = full_gradient(spec, p, data.x, data.y, data.n_anchor, sigma_sq);
        grad = flatten_gradient(spec, layout, vg.gradient);
        return vg.value.total;
    };
    auto res = minimize(f, flatten(spec, layout, start), cfg);
    return {unflatten(spec, layout, res.x, start), std::move(res.report)};
}

namespace detail {

inline void log_loop(std::ostream* out, const char* phase, std::size_t index, const LoopRecord& r,
                     double target)
{
    if (!out) return;
    *out << "phase=" << phase << " loop=" << index << " sigma_sq=" << r.sigma_sq
         << " running=" << r.objective.running << " affine=" << r.objective.affine
         << " endpoint=" << r.objective.endpoint << " total=" << r.objective.total
         << " train_mse=" << r.train_mse << " target=" << target
         << " iterations=" << r.iterations << " reason=" << to_string(r.reason) << '\n';
}

} // namespace detail

/// standardize -> estimate sigma -> select anchors -> init -> sigma loops -> final loop.
inline TrainedModel train(const SequenceSpec& spec, const Matrix& train_x_raw,
                          const Matrix& train_y_raw, const TrainConfig& cfg)
{
    cfg.validate();
    spec.validate();
    require(train_x_raw.cols() == spec.d_x, "train: predictor columns do not match d_X");
    require(train_y_raw.cols() == spec.d_y, "train: response columns do not match d_Y");
    require(train_x_raw.rows() >= 10, "train: need at least 10 training rows");

    const auto stdz = standardize(train_x_raw, train_y_raw, Matrix(0, spec.d_x), spec.pad,
                                  cfg.rng_seed);
    const auto& ds = stdz.train;
    const auto n = static_cast<int>(ds.size());

    TrainedModel model;
    model.spec = spec;
    model.stats = ds.stats;
    model.seed = cfg.rng_seed;

    const auto sig = estimate_sigma(ds.unpadded_x(), ds.y);
    auto& rep = model.report;
    rep.sigma_mse_sq = sig.sigma_mse_sq;
    rep.sigma_sq_init = sig.sigma_sq_init;
    rep.mse_target = std::max(sig.sigma_mse_sq, 0.01);
    if (cfg.progress)
        *cfg.progress << "phase=sigma sigma_mse_sq=" << sig.sigma_mse_sq
                      << " sigma_sq_init=" << sig.sigma_sq_init << " neighbors=" << sig.neighbors
                      << " variance=" << kVarianceConvention << '\n';

    int n_anchor = cfg.n_subset ? cfg.n_subset : (spec.n_subset ? spec.n_subset : n);
    require(n_anchor >= 1 && n_anchor <= n,
            "n_subset = " + std::to_string(n_anchor) + " must lie in [1, N = " +
                std::to_string(n) + "]");
    if (spec.num_diffeo() == 0) n_anchor = n;
    model.n_anchor = n_anchor;

    TrainingData data;
    data.n_anchor = n_anchor;
    if (n_anchor < n) {
        const auto order = anchor_first_order(n, select_subset(ds.x, n_anchor, cfg.rng_seed));
        data.x = take_rows(ds.x, order);
        data.y = take_rows(ds.y, order);
        data.raw_y = take_rows(ds.raw_y, order);
    } else {
        data.x = ds.x;
        data.y = ds.y;
        data.raw_y = ds.raw_y;
    }

    ModelParams params = init_params(spec, n_anchor, cfg.rng_seed);
    const auto scaling = ds.stats.response_scaling();

    auto run_loop = [&](double sigma_sq) {
        auto out = minimize_objective(spec, data, params, sigma_sq, cfg.optimizer);
        ++rep.minimize_calls;
        params = warm_start(out.params);
        const auto fw = forward_pass(spec, params, data.x, n_anchor);
        LoopRecord r;
        r.sigma_sq = sigma_sq;
        r.objective = evaluate(spec, params, fw, data.y, sigma_sq);
        r.train_mse = train_mse(fw.outputs(), spec.drop, data.raw_y, scaling);
        r.iterations = out.report.iterations;
        r.reason = out.report.reason;
        return r;
    };

    double sigma_sq = cfg.fixed_sigma_sq.value_or(sig.sigma_sq_init);
    if (!cfg.fixed_sigma_sq) {
        for (int loop = 0; loop < cfg.max_sigma_loops; ++loop) {
            const LoopRecord r = run_loop(sigma_sq);
            rep.loops.push_back(r);
            detail::log_loop(cfg.progress, "sigma", rep.loops.size(), r, rep.mse_target);
            if (r.train_mse < rep.mse_target) break;
            sigma_sq *= cfg.sigma_decay;
        }
    }
    const LoopRecord final_loop = run_loop(sigma_sq);
    rep.loops.push_back(final_loop);
    detail::log_loop(cfg.progress, "final", rep.loops.size(), final_loop, rep.mse_target);

    const auto fw = forward_pass(spec, params, data.x, n_anchor);
    model.cache = extract_cache(fw);
    model.params = std::move(params);
    model.sigma_sq = sigma_sq;
    rep.final_train_mse = final_loop.train_mse;
    rep.final_objective = final_loop.objective;
    return model;
}

} // namespace finemorphs
