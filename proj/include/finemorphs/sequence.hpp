#pragma once

#include "finemorphs/common.hpp"
#include "finemorphs/kernels.hpp"

#include <cctype>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace finemorphs {

enum class ModuleKind { Affine, Diffeo };
enum class AffineCost { Ridge, RidgeToIdentity };
enum class WidthSchedule { None, Up, Down };

struct ModuleSpec {
    ModuleKind kind = ModuleKind::Affine;
    int in_dim = 0;
    int out_dim = 0;
    AffineCost cost = AffineCost::Ridge; // affine modules only
    KernelConfig kernel{};               // diffeo modules only
    int steps = 10;                      // diffeo modules only, T_q
    int slot = 0;                        // index into ModelParams::affines or ::controls

    bool is_affine() const { return kind == ModuleKind::Affine; }
    bool is_diffeo() const { return kind == ModuleKind::Diffeo; }
};

/// Declarative description of the module chain. Identity modules are never stored.
struct SequenceSpec {
    std::string name;
    std::vector<ModuleSpec> modules;
    int pad = 1;  // s: zero/noise coordinates appended to inputs
    int drop = 0; // r: trailing output coordinates discarded
    double lambda = 1.0;
    int d_x = 0;
    int d_y = 0;
    int n_subset = 0; // anchors; 0 means all training points
    std::vector<std::string> warnings;

    int input_dim() const { return d_x + pad; }
    int output_dim() const { return d_y + drop; }

    int num_affine() const
    {
        int n = 0;
        for (const auto& m : modules) n += m.is_affine();
        return n;
    }
    int num_diffeo() const
    {
        int n = 0;
        for (const auto& m : modules) n += m.is_diffeo();
        return n;
    }

    void validate() const
    {
        require(!modules.empty(), "sequence has no modules");
        require(d_x >= 1 && d_y >= 1, "data dimensions must be >= 1");
        require(pad >= 0 && drop >= 0, "pad (s) and drop (r) must be >= 0");
        require(std::isfinite(lambda) && lambda >= 0.0, "lambda must be finite and >= 0");
        require(n_subset >= 0, "n_subset must be >= 0");
        require(modules.front().in_dim == input_dim(), "first module input must be d_X + s");
        require(modules.back().out_dim == output_dim(), "last module output must be d_Y + r");
        int a = 0, d = 0;
        for (std::size_t q = 0; q < modules.size(); ++q) {
            const auto& m = modules[q];
            require(m.in_dim >= 1 && m.out_dim >= 1, "module dimensions must be >= 1");
            if (q + 1 < modules.size())
                require(m.out_dim == modules[q + 1].in_dim,
                        "module " + std::to_string(q) + " output does not match next input");
            if (m.is_affine()) {
                require(m.slot == a++, "affine slot numbering is inconsistent");
                if (m.cost == AffineCost::RidgeToIdentity)
                    require(m.in_dim == m.out_dim,
                            "identity-anchored affine cost requires a square module");
            } else {
                require(m.slot == d++, "diffeo slot numbering is inconsistent");
                require(m.in_dim == m.out_dim, "diffeo module must be square");
                require(m.kernel.dim == m.in_dim, "kernel dimension must match module dimension");
                require(m.steps >= 1, "diffeo module needs at least one time step");
                m.kernel.validate();
            }
        }
    }
};

/// User overrides applied on top of name-derived defaults.
struct SequenceOverrides {
    std::optional<int> pad;
    std::optional<int> drop;
    std::optional<double> lambda;
    std::optional<int> n_subset;
    std::vector<int> dims;       // per D module; one entry broadcasts
    std::vector<double> widths;  // per D module; one entry broadcasts
    std::vector<int> steps;      // per D module; one entry broadcasts
    WidthSchedule schedule = WidthSchedule::None;
    std::optional<bool> identity_inner_affines;
};

namespace detail {

struct ParsedName {
    std::vector<ModuleKind> kinds;
    bool has_ad_group = false;
};

inline ParsedName parse_module_letters(std::string_view name)
{
    ParsedName out;
    auto fail = [&](const std::string& why) -> void {
        throw ValidationError("malformed sequence name '" + std::string(name) + "': " + why);
    };
    auto read_count = [&](std::size_t& i) -> int {
        const bool caret = i < name.size() && name[i] == '^';
        if (caret) ++i;
        if (i >= name.size() || !std::isdigit(static_cast<unsigned char>(name[i]))) {
            if (caret) fail("'^' must be followed by a count");
            return 1;
        }
        int n = 0;
        while (i < name.size() && std::isdigit(static_cast<unsigned char>(name[i]))) {
            n = n * 10 + (name[i] - '0');
            if (n > 1000) fail("repetition count too large");
            ++i;
        }
        if (n < 1) fail("repetition count must be >= 1");
        return n;
    };
    auto letter = [&](char c) -> ModuleKind {
        if (c == 'A' || c == 'a') return ModuleKind::Affine;
        if (c == 'D' || c == 'd') return ModuleKind::Diffeo;
        fail(std::string("unexpected character '") + c + "'");
        return ModuleKind::Affine;
    };

    std::size_t i = 0;
    if (name.empty()) fail("empty name");
    while (i < name.size()) {
        if (name[i] == '(') {
            const auto close = name.find(')', i);
            if (close == std::string_view::npos || close == i + 1) fail("unbalanced group");
            std::vector<ModuleKind> group;
            for (std::size_t j = i + 1; j < close; ++j) group.push_back(letter(name[j]));
            if (name.substr(i + 1, close - i - 1) == "AD") out.has_ad_group = true;
            i = close + 1;
            const int n = read_count(i);
            for (int r = 0; r < n; ++r) out.kinds.insert(out.kinds.end(), group.begin(), group.end());
        } else {
            const ModuleKind k = letter(name[i]);
            ++i;
            const int n = read_count(i);
            out.kinds.insert(out.kinds.end(), static_cast<std::size_t>(n), k);
        }
    }
    return out;
}

template <class T>
T per_module(const std::vector<T>& v, std::size_t q, std::size_t count, const char* what)
{
    if (v.size() == 1) return v.front();
    require(v.size() == count, std::string(what) + ": expected 1 or " + std::to_string(count) +
                                   " values, got " + std::to_string(v.size()));
    return v[q];
}

} // namespace detail

/// Parses names such as "ADA", "AD4A", "AD^2A^2", "(AD)3A" and wires all dimensions.
inline SequenceSpec parse_sequence(std::string_view name, int d_x, int d_y,
                                   const SequenceOverrides& ov = {})
{
    require(d_x >= 1 && d_y >= 1, "data dimensions must be >= 1");
    const auto parsed = detail::parse_module_letters(name);
    const auto& kinds = parsed.kinds;

    SequenceSpec spec;
    spec.name = std::string(name);
    spec.d_x = d_x;
    spec.d_y = d_y;
    spec.pad = ov.pad.value_or(1);
    spec.drop = ov.drop.value_or(0);
    spec.lambda = ov.lambda.value_or(1.0);
    spec.n_subset = ov.n_subset.value_or(0);
    require(spec.pad >= 0 && spec.drop >= 0, "pad (s) and drop (r) must be >= 0");

    const std::size_t n_mod = kinds.size();
    std::size_t n_diffeo = 0;
    for (auto k : kinds) n_diffeo += (k == ModuleKind::Diffeo);
    require(ov.dims.empty() || n_diffeo > 0, "dims override given but sequence has no D module");
    require(ov.widths.empty() || n_diffeo > 0, "widths override given but sequence has no D module");
    require(ov.steps.empty() || n_diffeo > 0, "steps override given but sequence has no D module");

    // boundary[q] is the input dimension of module q; boundary[n_mod] is the output.
    std::vector<std::optional<int>> boundary(n_mod + 1);
    auto pin = [&](std::size_t b, int dim, const std::string& why) {
        if (boundary[b] && *boundary[b] != dim)
            throw ValidationError("dimension override conflict at boundary " + std::to_string(b) +
                                  " (" + why + "): " + std::to_string(*boundary[b]) + " vs " +
                                  std::to_string(dim));
        boundary[b] = dim;
    };
    pin(0, spec.input_dim(), "d_X + s");
    pin(n_mod, spec.output_dim(), "d_Y + r");
    std::size_t dq = 0;
    for (std::size_t q = 0; q < n_mod; ++q) {
        if (kinds[q] != ModuleKind::Diffeo) continue;
        if (!ov.dims.empty()) {
            const int dim = detail::per_module(ov.dims, dq, n_diffeo, "dims");
            require(dim >= 1, "D module dimension must be >= 1");
            pin(q, dim, "D module input");
            pin(q + 1, dim, "D module output");
        }
        ++dq;
    }
    // D modules have equal input and output; propagate fixed ends through D chains.
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < n_mod; ++q) {
            if (kinds[q] != ModuleKind::Diffeo) continue;
            if (boundary[q] && !boundary[q + 1]) boundary[q + 1] = boundary[q];
            else if (boundary[q + 1] && !boundary[q]) boundary[q] = boundary[q + 1];
            else if (boundary[q] && boundary[q + 1] && *boundary[q] != *boundary[q + 1])
                throw ValidationError("dimension override conflict: D module " +
                                      std::to_string(q) + " would map " +
                                      std::to_string(*boundary[q]) + " to " +
                                      std::to_string(*boundary[q + 1]));
        }
    }
    for (auto& b : boundary)
        if (!b) b = spec.input_dim();
    for (std::size_t q = 0; q < n_mod; ++q)
        if (kinds[q] == ModuleKind::Diffeo && *boundary[q] != *boundary[q + 1])
            throw ValidationError("dimension override conflict at D module " + std::to_string(q));

    const bool identity_inner =
        ov.identity_inner_affines.value_or(parsed.has_ad_group);
    int a_slot = 0, d_slot = 0;
    for (std::size_t q = 0; q < n_mod; ++q) {
        ModuleSpec m;
        m.kind = kinds[q];
        m.in_dim = *boundary[q];
        m.out_dim = *boundary[q + 1];
        if (m.is_affine()) {
            m.slot = a_slot++;
            const bool inner = q > 0 && q + 1 < n_mod;
            if (identity_inner && inner && m.in_dim == m.out_dim) m.cost = AffineCost::RidgeToIdentity;
        } else {
            m.slot = d_slot;
            const auto m_total = static_cast<double>(n_diffeo) + 1.0;
            const double qq = static_cast<double>(d_slot) + 1.0;
            double width = 0.5;
            if (ov.schedule == WidthSchedule::Up) width = qq / m_total;
            if (ov.schedule == WidthSchedule::Down) width = (m_total - qq) / m_total;
            if (!ov.widths.empty())
                width = detail::per_module(ov.widths, static_cast<std::size_t>(d_slot), n_diffeo,
                                           "widths");
            m.kernel = KernelConfig{width, m.in_dim};
            m.steps = ov.steps.empty()
                          ? 10
                          : detail::per_module(ov.steps, static_cast<std::size_t>(d_slot),
                                               n_diffeo, "steps");
            ++d_slot;
        }
        spec.modules.push_back(m);
    }

    if (n_diffeo > 0 && kinds.front() == ModuleKind::Diffeo)
        spec.warnings.push_back("sequence starts with a D module; the kernel width must suit the "
                                "raw standardized inputs");
    if (n_diffeo > 0 && kinds.back() == ModuleKind::Diffeo)
        spec.warnings.push_back("sequence ends with a D module; this is rarely practical for "
                                "regression");
    spec.validate();
    return spec;
}

struct AffineParams {
    Eigen::MatrixXd M;
    Vector b;
};

/// a[i] holds the N_S anchor controls (one per row) at time i / T.
struct ControlField {
    std::vector<Matrix> a;
};

struct ModelParams {
    std::vector<AffineParams> affines;
    std::vector<ControlField> controls;
};

inline bool operator==(const ModelParams& x, const ModelParams& y)
{
    if (x.affines.size() != y.affines.size() || x.controls.size() != y.controls.size())
        return false;
    for (std::size_t i = 0; i < x.affines.size(); ++i) {
        const auto& p = x.affines[i];
        const auto& q = y.affines[i];
        if (p.M.rows() != q.M.rows() || p.M.cols() != q.M.cols() || p.M != q.M) return false;
        if (p.b.size() != q.b.size() || p.b != q.b) return false;
    }
    for (std::size_t i = 0; i < x.controls.size(); ++i) {
        const auto& p = x.controls[i].a;
        const auto& q = y.controls[i].a;
        if (p.size() != q.size()) return false;
        for (std::size_t t = 0; t < p.size(); ++t)
            if (p[t].rows() != q[t].rows() || p[t].cols() != q[t].cols() || p[t] != q[t])
                return false;
    }
    return true;
}

/// Zero controls; ridge affines ~ N(0, 0.01^2); identity-anchored affines I + diag(w).
inline ModelParams init_params(const SequenceSpec& spec, int n_subset, std::uint64_t seed)
{
    require(n_subset >= 1, "init_params: n_subset must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.01);
    ModelParams p;
    for (const auto& m : spec.modules) {
        if (m.is_affine()) {
            AffineParams ap;
            ap.b = Vector::Zero(m.out_dim);
            if (m.cost == AffineCost::RidgeToIdentity) {
                ap.M = Eigen::MatrixXd::Identity(m.out_dim, m.in_dim);
                for (int j = 0; j < m.out_dim; ++j) ap.M(j, j) += noise(rng);
            } else {
                ap.M.resize(m.out_dim, m.in_dim);
                for (int r = 0; r < m.out_dim; ++r)
                    for (int c = 0; c < m.in_dim; ++c) ap.M(r, c) = noise(rng);
            }
            p.affines.push_back(std::move(ap));
        } else {
            ControlField cf;
            cf.a.assign(static_cast<std::size_t>(m.steps), Matrix::Zero(n_subset, m.in_dim));
            p.controls.push_back(std::move(cf));
        }
    }
    return p;
}

inline void check_params(const SequenceSpec& spec, const ModelParams& p, int n_subset)
{
    require(static_cast<int>(p.affines.size()) == spec.num_affine(),
            "parameter set has wrong number of affine modules");
    require(static_cast<int>(p.controls.size()) == spec.num_diffeo(),
            "parameter set has wrong number of control fields");
    for (const auto& m : spec.modules) {
        if (m.is_affine()) {
            const auto& ap = p.affines[static_cast<std::size_t>(m.slot)];
            require(ap.M.rows() == m.out_dim && ap.M.cols() == m.in_dim && ap.b.size() == m.out_dim,
                    "affine parameter shape mismatch at slot " + std::to_string(m.slot));
        } else {
            const auto& cf = p.controls[static_cast<std::size_t>(m.slot)];
            require(static_cast<int>(cf.a.size()) == m.steps,
                    "control field has wrong number of time steps at slot " +
                        std::to_string(m.slot));
            for (const auto& at : cf.a)
                require(at.rows() == n_subset && at.cols() == m.in_dim,
                        "control field shape mismatch at slot " + std::to_string(m.slot));
        }
    }
}

/// lambda * sum_q U_q with U = ||M||^2 (ridge) or ||M - I||^2 (identity-anchored).
inline double affine_cost(const SequenceSpec& spec, const ModelParams& p)
{
    double total = 0.0;
    for (const auto& m : spec.modules) {
        if (!m.is_affine()) continue;
        const auto& M = p.affines[static_cast<std::size_t>(m.slot)].M;
        if (m.cost == AffineCost::RidgeToIdentity)
            total += (M - Eigen::MatrixXd::Identity(M.rows(), M.cols())).squaredNorm();
        else
            total += M.squaredNorm();
    }
    return spec.lambda * total;
}

/// Gradient of affine_cost with respect to each M (the b gradient is zero).
inline std::vector<Eigen::MatrixXd> affine_cost_gradient(const SequenceSpec& spec,
                                                         const ModelParams& p)
{
    std::vector<Eigen::MatrixXd> g;
    for (const auto& m : spec.modules) {
        if (!m.is_affine()) continue;
        const auto& M = p.affines[static_cast<std::size_t>(m.slot)].M;
        if (m.cost == AffineCost::RidgeToIdentity)
            g.push_back(2.0 * spec.lambda * (M - Eigen::MatrixXd::Identity(M.rows(), M.cols())));
        else
            g.push_back(2.0 * spec.lambda * M);
    }
    return g;
}

} // namespace finemorphs
