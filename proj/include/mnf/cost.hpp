#pragma once

// Exact multiply-accumulate and parameter counting over built graphs, plus a
// calibrated linear latency estimator.
//
// Conventions: one MAdd is one multiply-accumulate. Convolutions count
// oh*ow*out_ch*(k^2*in_ch/groups); average pooling counts its accumulates;
// squeeze-excite therefore contributes its pool and its two 1x1 convs.
// Batch norm, activations, element-wise ops and resampling count zero MAdds.
// Parameters: conv weights (+bias only where a conv carries bias, i.e. the
// no-BN tail convs and the SE transforms), batch norm scale+shift. Running
// statistics are not counted.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnf/graph.hpp"
#include "mnf/model.hpp"
#include "mnf/spec.hpp"

namespace mnf {

enum class OpClass { Conv = 0, Pointwise = 1, Depthwise = 2, Pool = 3 };
constexpr int kOpClassCount = 4;

inline const char* op_class_name(OpClass c) {
    switch (c) {
        case OpClass::Conv: return "conv";
        case OpClass::Pointwise: return "pointwise";
        case OpClass::Depthwise: return "depthwise";
        case OpClass::Pool: return "pool";
    }
    return "?";
}

inline std::optional<OpClass> op_class_from_name(const std::string& s) {
    for (int i = 0; i < kOpClassCount; ++i)
        if (s == op_class_name(static_cast<OpClass>(i)))
            return static_cast<OpClass>(i);
    return std::nullopt;
}

struct LayerCost {
    std::string name;
    unsigned long long madds = 0;
    unsigned long long params = 0;
};

struct CostReport {
    std::string network;
    std::vector<LayerCost> per_layer;
    unsigned long long total_madds = 0;
    unsigned long long total_params = 0;
    std::array<unsigned long long, kOpClassCount> class_madds{};
    std::optional<double> est_latency_ms;
};

// ---------------------------------------------------------------------------
// Counting.

inline CostReport count_graph(const Graph& g, int in_ch, int in_h, int in_w,
                              const std::string& network = "") {
    const std::vector<Shape> shapes = infer_shapes(g, in_ch, in_h, in_w);
    CostReport rep;
    rep.network = network;
    std::map<std::string, size_t> bucket;
    auto layer = [&](const std::string& key) -> LayerCost& {
        auto it = bucket.find(key);
        if (it == bucket.end()) {
            bucket.emplace(key, rep.per_layer.size());
            rep.per_layer.push_back({key, 0, 0});
            return rep.per_layer.back();
        }
        return rep.per_layer[it->second];
    };
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        unsigned long long madds = 0, params = 0;
        OpClass cls = OpClass::Conv;
        switch (n.kind) {
            case OpKind::Conv: {
                const Shape& out = shapes[i];
                const unsigned long long k2cin =
                    static_cast<unsigned long long>(n.kernel) * n.kernel *
                    (n.in_ch / n.groups);
                madds = static_cast<unsigned long long>(out.h) * out.w * n.out_ch *
                        k2cin;
                params = k2cin * n.out_ch + (n.bias ? n.out_ch : 0);
                cls = n.groups > 1 ? OpClass::Depthwise
                      : n.kernel == 1 ? OpClass::Pointwise
                                      : OpClass::Conv;
                break;
            }
            case OpKind::BatchNorm:
                params = 2ull * n.channels;
                break;
            case OpKind::GlobalAvgPool: {
                const Shape& in = shapes[static_cast<size_t>(n.in[0])];
                madds = static_cast<unsigned long long>(in.c) * in.h * in.w;
                cls = OpClass::Pool;
                break;
            }
            case OpKind::AvgPool: {
                const Shape& in = shapes[static_cast<size_t>(n.in[0])];
                const Shape& out = shapes[i];
                const int kh = std::min(n.pool_kh, in.h);
                const int kw = std::min(n.pool_kw, in.w);
                madds = static_cast<unsigned long long>(out.c) * out.h * out.w *
                        kh * kw;
                cls = OpClass::Pool;
                break;
            }
            default:
                break;
        }
        if (madds == 0 && params == 0) continue;
        LayerCost& lc = layer(n.layer.empty() ? n.name : n.layer);
        lc.madds += madds;
        lc.params += params;
        rep.total_madds += madds;
        rep.total_params += params;
        rep.class_madds[static_cast<size_t>(cls)] += madds;
    }
    return rep;
}

inline CostReport count(const NetworkSpec& spec) {
    CostReport rep = count_graph(build(spec), 3, spec.resolution, spec.resolution,
                                 spec.name);
    return rep;
}

struct GridEntry {
    double multiplier = 1.0;
    int resolution = 224;
    CostReport report;
};

inline std::vector<GridEntry> count_grid(const NetworkSpec& base,
                                         const std::vector<double>& multipliers,
                                         const std::vector<int>& resolutions) {
    std::vector<GridEntry> grid;
    for (double m : multipliers) {
        const NetworkSpec scaled = apply_multiplier(base, m);
        for (int r : resolutions) {
            GridEntry e;
            e.multiplier = m;
            e.resolution = r;
            e.report = count(apply_resolution(scaled, r));
            grid.push_back(std::move(e));
        }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Rendering.

inline std::string to_csv(const CostReport& rep) {
    std::ostringstream os;
    os << "layer,madds,params\n";
    for (const LayerCost& l : rep.per_layer)
        os << l.name << "," << l.madds << "," << l.params << "\n";
    os << "total," << rep.total_madds << "," << rep.total_params << "\n";
    return os.str();
}

inline std::string to_table(const CostReport& rep) {
    std::ostringstream os;
    if (!rep.network.empty()) os << "network: " << rep.network << "\n";
    char line[96];
    std::snprintf(line, sizeof(line), "%-24s %14s %12s\n", "layer", "madds",
                  "params");
    os << line;
    for (const LayerCost& l : rep.per_layer) {
        std::snprintf(line, sizeof(line), "%-24s %14llu %12llu\n", l.name.c_str(),
                      l.madds, l.params);
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-24s %14llu %12llu\n", "total",
                  rep.total_madds, rep.total_params);
    os << line;
    if (rep.est_latency_ms)
        os << "estimated latency: " << *rep.est_latency_ms << " ms\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Latency model: sum over op classes of coefficient (ms per GMAdd) times the
// class's GMAdds, plus a fixed overhead.

struct DeviceProfile {
    std::string name = "unnamed";
    std::array<double, kOpClassCount> coeff_ms_per_gmadd{};
    std::array<bool, kOpClassCount> has_coeff{};
    double fixed_overhead_ms = 0.0;
};

inline double estimate_latency(const CostReport& rep, const DeviceProfile& prof) {
    double ms = prof.fixed_overhead_ms;
    for (int c = 0; c < kOpClassCount; ++c) {
        const unsigned long long madds = rep.class_madds[static_cast<size_t>(c)];
        if (madds == 0) continue;
        if (!prof.has_coeff[static_cast<size_t>(c)])
            throw std::invalid_argument(
                std::string("profile '") + prof.name + "' has no coefficient for "
                "op class '" + op_class_name(static_cast<OpClass>(c)) + "'");
        if (prof.coeff_ms_per_gmadd[static_cast<size_t>(c)] < 0)
            throw std::invalid_argument("profile coefficient must be >= 0");
        ms += prof.coeff_ms_per_gmadd[static_cast<size_t>(c)] *
              (static_cast<double>(madds) / 1e9);
    }
    return ms;
}

inline std::string serialize_profile(const DeviceProfile& p) {
    std::ostringstream os;
    os << "profile-version 1\n";
    os << "name " << p.name << "\n";
    os << "overhead_ms " << p.fixed_overhead_ms << "\n";
    for (int c = 0; c < kOpClassCount; ++c)
        if (p.has_coeff[static_cast<size_t>(c)])
            os << "coeff " << op_class_name(static_cast<OpClass>(c)) << " "
               << p.coeff_ms_per_gmadd[static_cast<size_t>(c)] << "\n";
    return os.str();
}

inline DeviceProfile parse_profile(const std::string& text) {
    DeviceProfile p;
    std::istringstream is(text);
    std::string raw;
    int lineno = 0;
    bool saw_version = false;
    while (std::getline(is, raw)) {
        ++lineno;
        std::string line = raw.substr(0, raw.find('#'));
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        auto fail = [&](const std::string& what) {
            return std::invalid_argument("profile parse error at line " +
                                         std::to_string(lineno) + ": " + what);
        };
        if (key == "profile-version") {
            int v;
            if (!(ls >> v) || v != 1) throw fail("unsupported version");
            saw_version = true;
        } else if (key == "name") {
            ls >> p.name;
        } else if (key == "overhead_ms") {
            if (!(ls >> p.fixed_overhead_ms)) throw fail("bad overhead");
        } else if (key == "coeff") {
            std::string cls;
            double v;
            if (!(ls >> cls >> v)) throw fail("bad coeff line");
            auto oc = op_class_from_name(cls);
            if (!oc) throw fail("unknown op class '" + cls + "'");
            if (v < 0) throw fail("negative coefficient");
            p.coeff_ms_per_gmadd[static_cast<size_t>(*oc)] = v;
            p.has_coeff[static_cast<size_t>(*oc)] = true;
        } else {
            throw fail("unknown key '" + key + "'");
        }
    }
    if (!saw_version)
        throw std::invalid_argument("profile parse error: missing version header");
    return p;
}

inline DeviceProfile load_profile(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open profile '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_profile(buf.str());
}

// ---------------------------------------------------------------------------
// Non-negative least squares (Lawson-Hanson) for profile calibration.

namespace detail {

// Solve (A^T A) x = A^T b restricted to the active column set.
inline std::vector<double> ls_solve(const std::vector<std::vector<double>>& a,
                                    const std::vector<double>& b,
                                    const std::vector<int>& cols) {
    const size_t m = a.size(), k = cols.size();
    std::vector<std::vector<double>> g(k, std::vector<double>(k + 1, 0.0));
    for (size_t i = 0; i < k; ++i) {
        for (size_t j = 0; j < k; ++j) {
            double s = 0;
            for (size_t r = 0; r < m; ++r)
                s += a[r][static_cast<size_t>(cols[i])] *
                     a[r][static_cast<size_t>(cols[j])];
            g[i][j] = s;
        }
        double s = 0;
        for (size_t r = 0; r < m; ++r)
            s += a[r][static_cast<size_t>(cols[i])] * b[r];
        g[i][k] = s;
    }
    for (size_t col = 0; col < k; ++col) {
        size_t piv = col;
        for (size_t r = col + 1; r < k; ++r)
            if (std::fabs(g[r][col]) > std::fabs(g[piv][col])) piv = r;
        if (std::fabs(g[piv][col]) < 1e-12)
            throw std::invalid_argument("calibrate_profile: degenerate system");
        std::swap(g[piv], g[col]);
        for (size_t r = 0; r < k; ++r) {
            if (r == col) continue;
            const double f = g[r][col] / g[col][col];
            for (size_t c2 = col; c2 <= k; ++c2) g[r][c2] -= f * g[col][c2];
        }
    }
    std::vector<double> x(k);
    for (size_t i = 0; i < k; ++i) x[i] = g[i][k] / g[i][i];
    return x;
}

inline std::vector<double> nnls(const std::vector<std::vector<double>>& a,
                                const std::vector<double>& b) {
    const size_t m = a.size(), nvar = a[0].size();
    std::vector<double> x(nvar, 0.0);
    std::vector<bool> passive(nvar, false);
    for (int iter = 0; iter < 3 * static_cast<int>(nvar) + 30; ++iter) {
        // gradient w = A^T (b - A x)
        std::vector<double> resid(m);
        for (size_t r = 0; r < m; ++r) {
            double s = b[r];
            for (size_t c = 0; c < nvar; ++c) s -= a[r][c] * x[c];
            resid[r] = s;
        }
        int best = -1;
        double best_w = 1e-9;
        for (size_t c = 0; c < nvar; ++c) {
            if (passive[c]) continue;
            double wc = 0;
            for (size_t r = 0; r < m; ++r) wc += a[r][c] * resid[r];
            if (wc > best_w) {
                best_w = wc;
                best = static_cast<int>(c);
            }
        }
        if (best < 0) break;
        passive[static_cast<size_t>(best)] = true;
        for (;;) {
            std::vector<int> cols;
            for (size_t c = 0; c < nvar; ++c)
                if (passive[c]) cols.push_back(static_cast<int>(c));
            std::vector<double> z = ls_solve(a, b, cols);
            double alpha = 1.0;
            for (size_t i = 0; i < cols.size(); ++i)
                if (z[i] <= 0) {
                    const double xi = x[static_cast<size_t>(cols[i])];
                    alpha = std::min(alpha, xi / (xi - z[i]));
                }
            if (alpha >= 1.0) {
                for (size_t i = 0; i < cols.size(); ++i)
                    x[static_cast<size_t>(cols[i])] = z[i];
                break;
            }
            for (size_t i = 0; i < cols.size(); ++i) {
                auto ci = static_cast<size_t>(cols[i]);
                x[ci] += alpha * (z[i] - x[ci]);
                if (x[ci] < 1e-12) {
                    x[ci] = 0.0;
                    passive[ci] = false;
                }
            }
        }
    }
    return x;
}

}  // namespace detail

struct CalibrationResult {
    DeviceProfile profile;
    std::vector<double> residuals_ms;  // measured - predicted, per pair
    double rmse_ms = 0.0;
};

inline CalibrationResult calibrate_profile(
    const std::vector<std::pair<CostReport, double>>& pairs,
    const std::string& name = "calibrated") {
    if (pairs.size() < 2)
        throw std::invalid_argument(
            "calibrate_profile: need at least 2 (report, latency) pairs");
    // Features: GMAdds per op class that appears anywhere, plus the overhead.
    std::vector<int> used;
    for (int c = 0; c < kOpClassCount; ++c)
        for (const auto& [rep, ms] : pairs)
            if (rep.class_madds[static_cast<size_t>(c)] > 0) {
                used.push_back(c);
                break;
            }
    if (used.empty())
        throw std::invalid_argument("calibrate_profile: degenerate system");
    std::vector<std::vector<double>> a;
    std::vector<double> b;
    for (const auto& [rep, ms] : pairs) {
        std::vector<double> row;
        for (int c : used)
            row.push_back(static_cast<double>(rep.class_madds[static_cast<size_t>(c)]) / 1e9);
        row.push_back(1.0);  // overhead
        a.push_back(std::move(row));
        b.push_back(ms);
    }
    const std::vector<double> x = detail::nnls(a, b);
    CalibrationResult out;
    out.profile.name = name;
    for (size_t i = 0; i < used.size(); ++i) {
        out.profile.coeff_ms_per_gmadd[static_cast<size_t>(used[i])] = x[i];
        out.profile.has_coeff[static_cast<size_t>(used[i])] = true;
    }
    out.profile.fixed_overhead_ms = x.back();
    double se = 0.0;
    for (size_t r = 0; r < pairs.size(); ++r) {
        double pred = 0;
        for (size_t c = 0; c < a[r].size(); ++c) pred += a[r][c] * x[c];
        out.residuals_ms.push_back(b[r] - pred);
        se += (b[r] - pred) * (b[r] - pred);
    }
    out.rmse_ms = std::sqrt(se / static_cast<double>(pairs.size()));
    return out;
}

}  // namespace mnf
