#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/preprocess.hpp"
#include "finemorphs/sequence.hpp"
#include "finemorphs/trainer.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace finemorphs {

using json = nlohmann::json;

// ------------------------------------------------------------------ CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    for (auto& s : cells) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }
    return cells;
}

inline bool parse_number(const std::string& s, double& out)
{
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

} // namespace detail

/// Numeric CSV with an optional header line. Rows with non-numeric cells are rejected.
inline Matrix read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError(path.string() + ": cannot open file");
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = detail::split_csv_line(line);
        std::vector<double> vals(cells.size());
        bool ok = true;
        for (std::size_t j = 0; j < cells.size() && ok; ++j) ok = detail::parse_number(cells[j], vals[j]);
        if (!ok) {
            if (rows.empty() && width == 0) {
                width = cells.size(); // header
                continue;
            }
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": non-numeric or non-finite cell");
        }
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                  std::to_string(width) + " columns, got " +
                                  std::to_string(cells.size()));
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw ValidationError(path.string() + ": no data rows");
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < width; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

inline void write_csv(std::ostream& os, const Matrix& m, const std::vector<std::string>& header)
{
    for (std::size_t j = 0; j < header.size(); ++j) os << (j ? "," : "") << header[j];
    if (!header.empty()) os << '\n';
    os.precision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
        os << '\n';
    }
}

struct Dataset {
    Matrix x;
    Matrix y;
};

/// Splits the last d_y columns off as responses.
inline Dataset split_xy(const Matrix& m, int d_y, const std::string& source)
{
    if (d_y < 1 || m.cols() <= d_y)
        throw ValidationError(source + ": needs more than d_Y = " + std::to_string(d_y) +
                              " columns, found " + std::to_string(m.cols()));
    return {m.leftCols(m.cols() - d_y), m.rightCols(d_y)};
}

// ------------------------------------------------------------------ split files

/// One file per split: a line `train`, its indices, a line `test`, its indices.
inline void write_split(std::ostream& os, const Split& s)
{
    os << "train\n";
    for (auto i : s.train) os << i << '\n';
    os << "test\n";
    for (auto i : s.test) os << i << '\n';
}

inline Split read_split(const std::filesystem::path& path, Eigen::Index n_rows)
{
    std::ifstream in(path);
    if (!in) throw ValidationError(path.string() + ": cannot open split file");
    Split s;
    std::vector<Eigen::Index>* cur = nullptr;
    std::string line;
    std::size_t lineno = 0;
    std::set<Eigen::Index> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "train") { cur = &s.train; continue; }
        if (line == "test") { cur = &s.test; continue; }
        long long v = -1;
        const auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
        if (!cur || ec != std::errc() || ptr != line.data() + line.size() || v < 0 || v >= n_rows)
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": invalid split entry '" + line + "'");
        if (!seen.insert(v).second)
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": index listed twice");
        cur->push_back(static_cast<Eigen::Index>(v));
    }
    if (s.train.empty() || s.test.empty())
        throw ValidationError(path.string() + ": split needs non-empty train and test sections");
    return s;
}

inline std::vector<std::filesystem::path> list_split_files(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir))
        throw ValidationError(dir.string() + ": split directory does not exist");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError(dir.string() + ": no split files (*.txt)");
    return files;
}

// ------------------------------------------------------------------ run config

struct RunConfig {
    std::string sequence = "ADA";
    SequenceOverrides overrides;
    int d_y = 1;
    std::uint64_t seed = 0;
    TrainConfig trainer;
};

namespace detail {

template <class T>
T get_field(const json& j, const std::string& key, const std::string& ctx)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(ctx + ": field '" + key + "' has the wrong type");
    }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& ctx)
{
    if (!j.is_object()) throw ValidationError(ctx + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* n : known) ok = ok || k == n;
        if (!ok) throw ValidationError(ctx + ": unknown field '" + k + "'");
    }
}

template <class T>
std::vector<T> scalar_or_list(const json& j, const std::string& key, const std::string& ctx)
{
    if (!j.contains(key)) return {};
    if (j.at(key).is_array()) return get_field<std::vector<T>>(j, key, ctx);
    return {get_field<T>(j, key, ctx)};
}

} // namespace detail

/// Parses and validates a JSON run configuration. `ctx` names the source in diagnostics.
inline RunConfig parse_run_config(const json& j, const std::string& ctx = "config")
{
    using detail::get_field;
    detail::reject_unknown(j,
                           {"sequence", "s", "r", "lambda", "dims", "widths", "steps", "schedule",
                            "identity_inner_affines", "n_subset", "seed", "d_y", "optimizer",
                            "trainer"},
                           ctx);
    RunConfig rc;
    if (j.contains("sequence")) rc.sequence = get_field<std::string>(j, "sequence", ctx);
    auto& ov = rc.overrides;
    if (j.contains("s")) ov.pad = get_field<int>(j, "s", ctx);
    if (j.contains("r")) ov.drop = get_field<int>(j, "r", ctx);
    if (j.contains("lambda")) ov.lambda = get_field<double>(j, "lambda", ctx);
    if (j.contains("n_subset")) {
        ov.n_subset = get_field<int>(j, "n_subset", ctx);
        if (*ov.n_subset < 0) throw ValidationError(ctx + ": field 'n_subset' must be >= 0");
    }
    ov.dims = detail::scalar_or_list<int>(j, "dims", ctx);
    ov.widths = detail::scalar_or_list<double>(j, "widths", ctx);
    ov.steps = detail::scalar_or_list<int>(j, "steps", ctx);
    for (double w : ov.widths)
        if (!(w > 0.0)) throw ValidationError(ctx + ": field 'widths' must be positive");
    for (int t : ov.steps)
        if (t < 1) throw ValidationError(ctx + ": field 'steps' must be >= 1");
    if (j.contains("schedule")) {
        const auto s = get_field<std::string>(j, "schedule", ctx);
        if (s == "none") ov.schedule = WidthSchedule::None;
        else if (s == "up") ov.schedule = WidthSchedule::Up;
        else if (s == "down") ov.schedule = WidthSchedule::Down;
        else throw ValidationError(ctx + ": field 'schedule' must be none, up or down");
    }
    if (j.contains("identity_inner_affines"))
        ov.identity_inner_affines = get_field<bool>(j, "identity_inner_affines", ctx);
    if (j.contains("seed")) {
        const auto s = get_field<long long>(j, "seed", ctx);
        if (s < 0) throw ValidationError(ctx + ": field 'seed' must be >= 0");
        rc.seed = static_cast<std::uint64_t>(s);
    }
    if (j.contains("d_y")) rc.d_y = get_field<int>(j, "d_y", ctx);
    if (rc.d_y < 1) throw ValidationError(ctx + ": field 'd_y' must be >= 1");

    auto& oc = rc.trainer.optimizer;
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        const std::string c = ctx + ".optimizer";
        detail::reject_unknown(o,
                               {"memory", "max_iters", "grad_tol", "obj_rel_tol", "wolfe_c1",
                                "wolfe_c2", "max_linesearch"},
                               c);
        if (o.contains("memory")) oc.memory = get_field<int>(o, "memory", c);
        if (o.contains("max_iters")) oc.max_iters = get_field<int>(o, "max_iters", c);
        if (o.contains("grad_tol")) oc.grad_tol = get_field<double>(o, "grad_tol", c);
        if (o.contains("obj_rel_tol")) oc.obj_rel_tol = get_field<double>(o, "obj_rel_tol", c);
        if (o.contains("wolfe_c1")) oc.wolfe_c1 = get_field<double>(o, "wolfe_c1", c);
        if (o.contains("wolfe_c2")) oc.wolfe_c2 = get_field<double>(o, "wolfe_c2", c);
        if (o.contains("max_linesearch"))
            oc.max_linesearch = get_field<int>(o, "max_linesearch", c);
    }
    if (j.contains("trainer")) {
        const auto& t = j.at("trainer");
        const std::string c = ctx + ".trainer";
        detail::reject_unknown(t, {"max_sigma_loops", "sigma_decay"}, c);
        if (t.contains("max_sigma_loops"))
            rc.trainer.max_sigma_loops = get_field<int>(t, "max_sigma_loops", c);
        if (t.contains("sigma_decay"))
            rc.trainer.sigma_decay = get_field<double>(t, "sigma_decay", c);
    }
    rc.trainer.rng_seed = rc.seed;
    try {
        rc.trainer.validate();
        // grammar check without data dimensions
        (void)detail::parse_module_letters(rc.sequence);
    } catch (const ValidationError& e) {
        throw ValidationError(ctx + ": " + e.what());
    }
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError(path.string() + ": cannot open config file");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": invalid JSON: " + e.what());
    }
    return parse_run_config(j, path.string());
}

// ------------------------------------------------------------------ model file

inline constexpr int kModelFormatVersion = 1;

namespace detail {

template <class M>
json encode_matrix(const M& m)
{
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    return json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

inline Matrix decode_matrix(const json& j, const std::string& ctx)
{
    try {
        const auto shape = j.at("shape").get<std::vector<long long>>();
        const auto data = j.at("data").get<std::vector<double>>();
        if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 ||
            static_cast<long long>(data.size()) != shape[0] * shape[1])
            throw ValidationError(ctx + ": array shape does not match its data");
        Matrix m(shape[0], shape[1]);
        for (long long i = 0; i < shape[0] * shape[1]; ++i) m.data()[i] = data[static_cast<std::size_t>(i)];
        return m;
    } catch (const json::exception&) {
        throw ValidationError(ctx + ": malformed array");
    }
}

inline json encode_vector(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector decode_vector(const json& j, const std::string& ctx)
{
    try {
        const auto d = j.get<std::vector<double>>();
        return Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
    } catch (const json::exception&) {
        throw ValidationError(ctx + ": malformed vector");
    }
}

} // namespace detail

/// Writes the versioned model document. Arrays are {"shape": [rows, cols], "data": [...]}
/// in row-major order; numbers use shortest round-trip formatting so reload is bit-exact.
inline json model_to_json(const TrainedModel& m)
{
    using detail::encode_matrix;
    using detail::encode_vector;
    json spec{{"name", m.spec.name},   {"d_x", m.spec.d_x},       {"d_y", m.spec.d_y},
              {"s", m.spec.pad},       {"r", m.spec.drop},        {"lambda", m.spec.lambda},
              {"n_subset", m.spec.n_subset}};
    json mods = json::array();
    for (const auto& mod : m.spec.modules) {
        json e{{"kind", mod.is_affine() ? "A" : "D"}, {"in_dim", mod.in_dim}, {"out_dim", mod.out_dim}};
        if (mod.is_affine())
            e["cost"] = mod.cost == AffineCost::Ridge ? "ridge" : "ridge_to_identity";
        else {
            e["width"] = mod.kernel.width;
            e["steps"] = mod.steps;
        }
        mods.push_back(std::move(e));
    }
    spec["modules"] = std::move(mods);

    json affines = json::array();
    for (const auto& a : m.params.affines)
        affines.push_back({{"M", encode_matrix(a.M)}, {"b", encode_vector(a.b)}});
    json controls = json::array();
    for (const auto& c : m.params.controls) {
        json steps = json::array();
        for (const auto& a : c.a) steps.push_back(encode_matrix(a));
        controls.push_back(std::move(steps));
    }
    json cache = json::array();
    for (const auto& traj : m.cache.z) {
        json steps = json::array();
        for (const auto& z : traj) steps.push_back(encode_matrix(z));
        cache.push_back(std::move(steps));
    }
    json loops = json::array();
    for (const auto& l : m.report.loops)
        loops.push_back({{"sigma_sq", l.sigma_sq},
                         {"train_mse", l.train_mse},
                         {"objective", l.objective.total},
                         {"iterations", l.iterations},
                         {"reason", to_string(l.reason)}});
    return json{
        {"format", "finemorphs-model"},
        {"format_version", kModelFormatVersion},
        {"spec", std::move(spec)},
        {"standardization",
         {{"mu_x", encode_vector(m.stats.mu_x)},
          {"sigma_x", encode_vector(m.stats.sigma_x)},
          {"mu_y", encode_vector(m.stats.mu_y)},
          {"sigma_y", encode_vector(m.stats.sigma_y)},
          {"s", m.stats.pad},
          {"r", m.spec.drop},
          {"variance", kVarianceConvention}}},
        {"n_anchor", m.n_anchor},
        {"sigma_sq", m.sigma_sq},
        {"seed", m.seed},
        {"params", {{"affines", std::move(affines)}, {"controls", std::move(controls)}}},
        {"cache", std::move(cache)},
        {"report",
         {{"sigma_mse_sq", m.report.sigma_mse_sq},
          {"sigma_sq_init", m.report.sigma_sq_init},
          {"mse_target", m.report.mse_target},
          {"final_train_mse", m.report.final_train_mse},
          {"minimize_calls", m.report.minimize_calls},
          {"sigma_schedule", m.report.sigma_schedule},
          {"loops", std::move(loops)}}},
    };
}

inline TrainedModel model_from_json(const json& j, const std::string& ctx = "model")
{
    using detail::decode_matrix;
    using detail::decode_vector;
    TrainedModel m;
    try {
        if (j.at("format").get<std::string>() != "finemorphs-model")
            throw ValidationError(ctx + ": not a model file");
        const int version = j.at("format_version").get<int>();
        if (version != kModelFormatVersion)
            throw ValidationError(ctx + ": unsupported model format_version " +
                                  std::to_string(version) + " (this build reads version " +
                                  std::to_string(kModelFormatVersion) + ")");
        const auto& s = j.at("spec");
        m.spec.name = s.at("name").get<std::string>();
        m.spec.d_x = s.at("d_x").get<int>();
        m.spec.d_y = s.at("d_y").get<int>();
        m.spec.pad = s.at("s").get<int>();
        m.spec.drop = s.at("r").get<int>();
        m.spec.lambda = s.at("lambda").get<double>();
        m.spec.n_subset = s.at("n_subset").get<int>();
        int a_slot = 0, d_slot = 0;
        for (const auto& e : s.at("modules")) {
            ModuleSpec mod;
            const auto kind = e.at("kind").get<std::string>();
            mod.in_dim = e.at("in_dim").get<int>();
            mod.out_dim = e.at("out_dim").get<int>();
            if (kind == "A") {
                mod.kind = ModuleKind::Affine;
                const auto cost = e.at("cost").get<std::string>();
                if (cost != "ridge" && cost != "ridge_to_identity")
                    throw ValidationError(ctx + ": unknown affine cost '" + cost + "'");
                mod.cost = cost == "ridge" ? AffineCost::Ridge : AffineCost::RidgeToIdentity;
                mod.slot = a_slot++;
            } else if (kind == "D") {
                mod.kind = ModuleKind::Diffeo;
                mod.kernel = KernelConfig{e.at("width").get<double>(), mod.in_dim};
                mod.steps = e.at("steps").get<int>();
                mod.slot = d_slot++;
            } else {
                throw ValidationError(ctx + ": unknown module kind '" + kind + "'");
            }
            m.spec.modules.push_back(mod);
        }
        m.spec.validate();

        const auto& st = j.at("standardization");
        m.stats.mu_x = decode_vector(st.at("mu_x"), ctx + ".mu_x");
        m.stats.sigma_x = decode_vector(st.at("sigma_x"), ctx + ".sigma_x");
        m.stats.mu_y = decode_vector(st.at("mu_y"), ctx + ".mu_y");
        m.stats.sigma_y = decode_vector(st.at("sigma_y"), ctx + ".sigma_y");
        m.stats.pad = st.at("s").get<int>();
        require(m.stats.mu_x.size() == m.spec.d_x && m.stats.sigma_x.size() == m.spec.d_x &&
                    m.stats.mu_y.size() == m.spec.d_y && m.stats.sigma_y.size() == m.spec.d_y &&
                    m.stats.pad == m.spec.pad,
                ctx + ": standardization does not match the sequence dimensions");

        m.n_anchor = j.at("n_anchor").get<int>();
        m.sigma_sq = j.at("sigma_sq").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& a : j.at("params").at("affines")) {
            const Matrix M = decode_matrix(a.at("M"), ctx + ".M");
            m.params.affines.push_back({Eigen::MatrixXd(M), decode_vector(a.at("b"), ctx + ".b")});
        }
        for (const auto& c : j.at("params").at("controls")) {
            ControlField cf;
            for (const auto& a : c) cf.a.push_back(decode_matrix(a, ctx + ".controls"));
            m.params.controls.push_back(std::move(cf));
        }
        for (const auto& traj : j.at("cache")) {
            std::vector<Matrix> zs;
            for (const auto& z : traj) zs.push_back(decode_matrix(z, ctx + ".cache"));
            m.cache.z.push_back(std::move(zs));
        }
        const auto& r = j.at("report");
        m.report.sigma_mse_sq = r.at("sigma_mse_sq").get<double>();
        m.report.sigma_sq_init = r.at("sigma_sq_init").get<double>();
        m.report.mse_target = r.at("mse_target").get<double>();
        m.report.final_train_mse = r.at("final_train_mse").get<double>();
        m.report.minimize_calls = r.at("minimize_calls").get<int>();
        m.report.sigma_schedule = r.at("sigma_schedule").get<std::string>();
        for (const auto& l : r.at("loops")) {
            LoopRecord lr;
            lr.sigma_sq = l.at("sigma_sq").get<double>();
            lr.train_mse = l.at("train_mse").get<double>();
            lr.objective.total = l.at("objective").get<double>();
            lr.iterations = l.at("iterations").get<int>();
            m.report.loops.push_back(lr);
        }
    } catch (const json::exception& e) {
        throw ValidationError(ctx + ": malformed model file: " + e.what());
    }
    return m;
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& path)
{
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw ValidationError(path.string() + ": cannot write model file");
        out << model_to_json(m).dump() << '\n';
        if (!out) throw ValidationError(path.string() + ": write failed");
    }
    std::filesystem::rename(tmp, path);
}

inline TrainedModel load_model(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError(path.string() + ": cannot open model file");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": invalid JSON: " + e.what());
    }
    return model_from_json(j, path.string());
}

} // namespace finemorphs
