#pragma once

#include "finemorphs/baseline.hpp"
#include "finemorphs/common.hpp"
#include "finemorphs/io.hpp"
#include "finemorphs/predictor.hpp"
#include "finemorphs/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace finemorphs::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumerical = 3;

/// Runs `body` and maps the library's exceptions to exit codes.
inline int guarded(const std::function<void()>& body, std::ostream& err)
{
    try {
        body();
        return kExitOk;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

/// Caps OpenMP threads from FINEMORPHS_THREADS when set.
inline void apply_thread_env()
{
    const char* v = std::getenv("FINEMORPHS_THREADS");
    if (!v || !*v) return;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ValidationError("FINEMORPHS_THREADS must be a positive integer");
#ifdef _OPENMP
    omp_set_num_threads(static_cast<int>(n));
#endif
}

/// Writes through a temporary file so a failed command leaves nothing behind.
inline void write_atomically(const fs::path& path, const std::function<void(std::ostream&)>& fill)
{
    const fs::path tmp = path.string() + ".tmp";
    try {
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw ValidationError(path.string() + ": cannot open for writing");
            fill(out);
            if (!out) throw ValidationError(path.string() + ": write failed");
        }
        fs::rename(tmp, path);
    } catch (...) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw;
    }
}

inline SequenceSpec resolve_spec(const RunConfig& rc, int d_x, std::ostream& err)
{
    auto spec = parse_sequence(rc.sequence, d_x, rc.d_y, rc.overrides);
    for (const auto& w : spec.warnings) err << "warning: " << w << '\n';
    return spec;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
    fs::path config;
    fs::path data;
    fs::path out;
    bool verbose = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err)
{
    return guarded(
        [&] {
            apply_thread_env();
            RunConfig rc = load_run_config(a.config);
            const auto ds = split_xy(read_csv(a.data), rc.d_y, a.data.string());
            const auto spec = resolve_spec(rc, static_cast<int>(ds.x.cols()), err);
            if (a.verbose) rc.trainer.progress = &err;
            const auto model = train(spec, ds.x, ds.y, rc.trainer);
            write_atomically(a.out, [&](std::ostream& os) { os << model_to_json(model).dump() << '\n'; });
            out << "sequence=" << spec.name << " n_train=" << ds.x.rows()
                << " n_anchor=" << model.n_anchor << " sigma_sq=" << model.sigma_sq
                << " loops=" << model.report.loops.size()
                << " train_mse=" << model.report.final_train_mse << '\n';
        },
        err);
}

// ------------------------------------------------------------------ predict

struct PredictArgs {
    fs::path model;
    fs::path data;
    fs::path out;
    std::optional<fs::path> targets;
};

inline std::vector<std::string> response_header(int d_y)
{
    std::vector<std::string> h;
    for (int j = 1; j <= d_y; ++j) h.push_back("y" + std::to_string(j));
    return h;
}

/// Predictor CSV with d_X columns, or d_X + d_Y columns whose trailing ones are used as targets.
inline int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err)
{
    return guarded(
        [&] {
            apply_thread_env();
            const auto model = load_model(a.model);
            verify_cache(model);
            Matrix x = read_csv(a.data);
            std::optional<Matrix> targets;
            if (x.cols() == model.spec.d_x + model.spec.d_y) {
                targets = x.rightCols(model.spec.d_y);
                x = Matrix(x.leftCols(model.spec.d_x));
            } else if (x.cols() != model.spec.d_x) {
                throw ValidationError(a.data.string() + ": expected " +
                                      std::to_string(model.spec.d_x) + " predictor columns, got " +
                                      std::to_string(x.cols()));
            }
            if (a.targets) {
                targets = read_csv(*a.targets);
                if (targets->cols() != model.spec.d_y || targets->rows() != x.rows())
                    throw ValidationError(a.targets->string() + ": expected " +
                                          std::to_string(x.rows()) + " rows of " +
                                          std::to_string(model.spec.d_y) + " responses");
            }
            const auto res = predict(model, x, targets ? &*targets : nullptr);
            write_atomically(a.out, [&](std::ostream& os) {
                write_csv(os, res.predictions, response_header(model.spec.d_y));
            });
            if (res.rmse) out << "rmse=" << std::setprecision(17) << *res.rmse << '\n';
        },
        err);
}

// ------------------------------------------------------------------ gen-splits

struct GenSplitsArgs {
    fs::path data;
    std::string kind = "standard";
    int count = 20;
    std::uint64_t seed = 0;
    fs::path out;
    int d_y = 1;
};

inline std::string split_file_name(std::size_t i)
{
    std::ostringstream s;
    s << "split_" << std::setw(3) << std::setfill('0') << i << ".txt";
    return s.str();
}

inline int cmd_gen_splits(const GenSplitsArgs& a, std::ostream& out, std::ostream& err)
{
    return guarded(
        [&] {
            SplitKind kind;
            if (a.kind == "standard") kind = SplitKind::Standard;
            else if (a.kind == "gap") kind = SplitKind::Gap;
            else throw ValidationError("--kind must be standard or gap, got '" + a.kind + "'");
            if (a.count < 1) throw ValidationError("--count must be >= 1");
            const auto ds = split_xy(read_csv(a.data), a.d_y, a.data.string());
            const auto set = make_splits(ds.x.rows(), kind, a.count, ds.x, a.seed);
            fs::create_directories(a.out);
            for (std::size_t i = 0; i < set.splits.size(); ++i)
                write_atomically(a.out / split_file_name(i),
                                 [&](std::ostream& os) { write_split(os, set.splits[i]); });
            out << "wrote " << set.splits.size() << " " << a.kind << " splits to " << a.out.string()
                << '\n';
        },
        err);
}

// ------------------------------------------------------------------ benchmark

struct SplitSummary {
    double mean = 0.0;
    std::optional<double> stderr_mean; // absent for a single split
    std::size_t n = 0;
};

/// Mean and standard error of the mean (sample standard deviation / sqrt(n)).
inline SplitSummary summarize(const std::vector<double>& values)
{
    require(!values.empty(), "summarize: no values");
    SplitSummary s;
    s.n = values.size();
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stderr_mean = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

inline void write_summary_line(std::ostream& os, const std::string& name, const SplitSummary& s)
{
    os << name << ',' << std::setprecision(10) << s.mean << ',';
    if (s.stderr_mean) os << *s.stderr_mean;
    else os << "NA";
    os << ',' << s.n << '\n';
}

struct BenchmarkArgs {
    fs::path data;
    fs::path splits;
    fs::path config;
    std::optional<std::string> baseline;
    int parallel_splits = 1;
    std::optional<std::string> name;
    bool verbose = false;
};

struct BenchmarkResult {
    std::vector<double> model_rmse;
    std::vector<double> baseline_rmse;
};

inline BenchmarkResult run_benchmark(const RunConfig& rc, const SequenceSpec& spec,
                                     const Dataset& ds, const std::vector<Split>& splits,
                                     bool ridge, int parallel, std::ostream* progress)
{
    BenchmarkResult r;
    r.model_rmse.assign(splits.size(), 0.0);
    if (ridge) r.baseline_rmse.assign(splits.size(), 0.0);
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    std::exception_ptr failure;

    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= splits.size()) return;
            try {
                const Matrix trx = take_rows(ds.x, splits[i].train);
                const Matrix try_ = take_rows(ds.y, splits[i].train);
                const Matrix tex = take_rows(ds.x, splits[i].test);
                const Matrix tey = take_rows(ds.y, splits[i].test);
                TrainConfig tc = rc.trainer;
                tc.rng_seed = rc.seed + i;
                tc.progress = nullptr;
                const auto model = train(spec, trx, try_, tc);
                r.model_rmse[i] = *predict(model, tex, &tey).rmse;
                if (ridge)
                    r.baseline_rmse[i] = rmse(predict_ridge(fit_ridge(trx, try_, spec.lambda), tex), tey);
                if (progress) {
                    std::lock_guard lk(log_mutex);
                    *progress << "split=" << i << " rmse=" << r.model_rmse[i];
                    if (ridge) *progress << " ridge_rmse=" << r.baseline_rmse[i];
                    *progress << " loops=" << model.report.loops.size() << '\n';
                }
            } catch (...) {
                std::lock_guard lk(log_mutex);
                if (!failure) failure = std::current_exception();
                next = splits.size();
                return;
            }
        }
    };
    const int k = std::max(1, std::min<int>(parallel, static_cast<int>(splits.size())));
    if (k == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < k; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return r;
}

inline int cmd_benchmark(const BenchmarkArgs& a, std::ostream& out, std::ostream& err)
{
    return guarded(
        [&] {
            apply_thread_env();
            if (a.parallel_splits < 1) throw ValidationError("--parallel-splits must be >= 1");
            const bool ridge = a.baseline.has_value();
            if (ridge && *a.baseline != "ridge")
                throw ValidationError("--baseline must be 'ridge', got '" + *a.baseline + "'");
            const RunConfig rc = load_run_config(a.config);
            const auto ds = split_xy(read_csv(a.data), rc.d_y, a.data.string());
            const auto spec = resolve_spec(rc, static_cast<int>(ds.x.cols()), err);
            std::vector<Split> splits;
            for (const auto& f : list_split_files(a.splits)) splits.push_back(read_split(f, ds.x.rows()));

            const auto res = run_benchmark(rc, spec, ds, splits, ridge, a.parallel_splits,
                                           a.verbose ? &err : nullptr);
            const std::string stem = a.name.value_or(a.data.stem().string());
            out << "name,mean,stderr,n_splits\n";
            write_summary_line(out, stem + "/" + spec.name, summarize(res.model_rmse));
            if (ridge) write_summary_line(out, stem + "/ridge", summarize(res.baseline_rmse));
        },
        err);
}

// ------------------------------------------------------------------ export-pca

struct ExportPcaArgs {
    fs::path model;
    fs::path data;
    int module = 1;
    std::vector<double> times;
    fs::path out;
};

/// Data CSV with d_X columns, or d_X + d_Y columns whose responses are copied to the output.
inline int cmd_export_pca(const ExportPcaArgs& a, std::ostream& out, std::ostream& err)
{
    return guarded(
        [&] {
            apply_thread_env();
            const auto model = load_model(a.model);
            verify_cache(model);
            const Matrix m = read_csv(a.data);
            Matrix x, y(0, 0);
            if (m.cols() == model.spec.d_x + model.spec.d_y) {
                x = m.leftCols(model.spec.d_x);
                y = m.rightCols(model.spec.d_y);
            } else if (m.cols() == model.spec.d_x) {
                x = m;
            } else {
                throw ValidationError(a.data.string() + ": expected " +
                                      std::to_string(model.spec.d_x) + " or " +
                                      std::to_string(model.spec.d_x + model.spec.d_y) + " columns");
            }
            const auto tab = export_pca_snapshots(model, x, y, a.module, a.times);
            write_atomically(a.out, [&](std::ostream& os) { write_snapshot_csv(os, tab); });
            if (!tab.note.empty()) err << "note: " << tab.note << '\n';
            out << "wrote " << tab.times.size() << " snapshots of D module " << a.module << " to "
                << a.out.string() << '\n';
        },
        err);
}

} // namespace finemorphs::cli
