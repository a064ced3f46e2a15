#pragma once

// Declarative network description: one row per layer mirroring the published
// MobileNetV3 tables, plus the transformations used to derive scaled and
// trimmed variants (width multiplier, input resolution, tail halving).

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mnf/activations.hpp"

namespace mnf {

class SpecError : public std::runtime_error {
  public:
    explicit SpecError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Operator { Conv2d, Bneck, Pool, Conv2d1x1NBN };
enum class Nonlinearity { RE, HS, None };

inline Activation to_activation(Nonlinearity nl) {
    switch (nl) {
        case Nonlinearity::RE: return Activation::ReLU;
        case Nonlinearity::HS: return Activation::HSwish;
        case Nonlinearity::None: return Activation::Identity;
    }
    return Activation::Identity;
}

struct LayerRow {
    int input_resolution = 0;  // square input side in pixels
    int input_channels = 0;
    Operator op = Operator::Conv2d;
    int kernel = 3;
    std::optional<int> exp_size;  // expansion width, bneck rows only
    int out_channels = 0;         // pool rows carry their input width through
    bool se = false;
    Nonlinearity nl = Nonlinearity::None;
    int stride = 1;
};

struct NetworkSpec {
    std::string name;
    std::vector<LayerRow> rows;
    double width_multiplier = 1.0;
    int resolution = 224;
    int num_classes = 1000;
};

// Round to the nearest multiple of `divisor`, never below it, and never below
// 90% of the requested value (the usual make-divisible convention).
inline int round_channels(double v, int divisor = 8) {
    int rounded = static_cast<int>(v + divisor / 2.0) / divisor * divisor;
    if (rounded < divisor) rounded = divisor;
    if (rounded < 0.9 * v) rounded += divisor;
    return rounded;
}

inline int out_resolution(const LayerRow& r) {
    if (r.op == Operator::Pool) return 1;
    return (r.input_resolution + r.stride - 1) / r.stride;
}

inline int row_out_channels(const LayerRow& r) {
    return r.op == Operator::Pool ? r.input_channels : r.out_channels;
}

// ---------------------------------------------------------------------------
// Validation.

inline void validate(const NetworkSpec& spec) {
    if (spec.rows.empty()) throw SpecError(spec.name + ": spec has no rows");
    if (spec.width_multiplier <= 0.0)
        throw SpecError(spec.name + ": non-positive width multiplier");
    for (size_t i = 0; i < spec.rows.size(); ++i) {
        const LayerRow& r = spec.rows[i];
        const std::string where = spec.name + " row " + std::to_string(i + 1);
        if (r.stride != 1 && r.stride != 2)
            throw SpecError(where + ": stride must be 1 or 2");
        if (r.kernel != 1 && r.kernel != 3 && r.kernel != 5 && r.kernel != 7)
            throw SpecError(where + ": kernel must be one of 1/3/5/7");
        if (r.input_resolution < 1 || r.input_channels < 1)
            throw SpecError(where + ": non-positive input shape");
        if (r.exp_size.has_value() != (r.op == Operator::Bneck))
            throw SpecError(where + ": exp size present iff operator is bneck");
        if (r.op == Operator::Bneck && r.se && *r.exp_size < 8)
            throw SpecError(where + ": SE bneck needs exp size >= 8");
        if (r.op != Operator::Pool && r.out_channels < 1)
            throw SpecError(where + ": non-positive out channels");
        if (r.op == Operator::Conv2d1x1NBN && r.kernel != 1)
            throw SpecError(where + ": NBN conv must be 1x1");
    }
    if (spec.rows.front().input_channels != 3)
        throw SpecError(spec.name + ": first row must take 3 input channels");
    if (spec.rows.front().input_resolution != spec.resolution)
        throw SpecError(spec.name + ": resolution field disagrees with row 1");
    for (size_t i = 0; i + 1 < spec.rows.size(); ++i) {
        const LayerRow& a = spec.rows[i];
        const LayerRow& b = spec.rows[i + 1];
        const std::string pair = spec.name + " rows " + std::to_string(i + 1) +
                                 "/" + std::to_string(i + 2);
        if (row_out_channels(a) != b.input_channels)
            throw SpecError(pair + ": channel chain broken, " +
                            std::to_string(row_out_channels(a)) + " -> " +
                            std::to_string(b.input_channels));
        if (out_resolution(a) != b.input_resolution)
            throw SpecError(pair + ": resolution chain broken, " +
                            std::to_string(out_resolution(a)) + " -> " +
                            std::to_string(b.input_resolution));
    }
}

// ---------------------------------------------------------------------------
// Built-in specifications.

enum class BuiltinSpec { V3Large, V3Small, V3LargeOriginalLastStage, V2Reference };

namespace detail {

struct RowInit {
    Operator op;
    int k;
    int exp;  // 0 = none
    int out;  // 0 = pool carry-through
    bool se;
    Nonlinearity nl;
    int s;
};

inline NetworkSpec from_inits(std::string name, const std::vector<RowInit>& inits,
                              int resolution, int num_classes) {
    NetworkSpec spec;
    spec.name = std::move(name);
    spec.resolution = resolution;
    spec.num_classes = num_classes;
    int res = resolution, ch = 3;
    for (const RowInit& ri : inits) {
        LayerRow r;
        r.input_resolution = res;
        r.input_channels = ch;
        r.op = ri.op;
        r.kernel = ri.k;
        if (ri.exp > 0) r.exp_size = ri.exp;
        r.out_channels = ri.op == Operator::Pool ? ch : ri.out;
        r.se = ri.se;
        r.nl = ri.nl;
        r.stride = ri.s;
        spec.rows.push_back(r);
        res = out_resolution(r);
        ch = row_out_channels(r);
    }
    validate(spec);
    return spec;
}

}  // namespace detail

inline NetworkSpec builtin_spec(BuiltinSpec which, int num_classes = 1000) {
    using detail::RowInit;
    const Nonlinearity RE = Nonlinearity::RE, HS = Nonlinearity::HS,
                       NO = Nonlinearity::None;
    const Operator CV = Operator::Conv2d, BN = Operator::Bneck,
                   PL = Operator::Pool, NB = Operator::Conv2d1x1NBN;
    switch (which) {
        case BuiltinSpec::V3Large:
        case BuiltinSpec::V3LargeOriginalLastStage: {
            std::vector<RowInit> rows = {
                {CV, 3, 0, 16, false, HS, 2},
                {BN, 3, 16, 16, false, RE, 1},
                {BN, 3, 64, 24, false, RE, 2},
                {BN, 3, 72, 24, false, RE, 1},
                {BN, 5, 72, 40, true, RE, 2},
                {BN, 5, 120, 40, true, RE, 1},
                {BN, 5, 120, 40, true, RE, 1},
                {BN, 3, 240, 80, false, HS, 2},
                {BN, 3, 200, 80, false, HS, 1},
                {BN, 3, 184, 80, false, HS, 1},
                {BN, 3, 184, 80, false, HS, 1},
                {BN, 3, 480, 112, true, HS, 1},
                {BN, 3, 672, 112, true, HS, 1},
                {BN, 5, 672, 160, true, HS, 2},
                {BN, 5, 960, 160, true, HS, 1},
                {BN, 5, 960, 160, true, HS, 1},
            };
            if (which == BuiltinSpec::V3Large) {
                rows.push_back({CV, 1, 0, 960, false, HS, 1});
                rows.push_back({PL, 7, 0, 0, false, NO, 1});
                rows.push_back({NB, 1, 0, 1280, false, HS, 1});
                rows.push_back({NB, 1, 0, num_classes, false, NO, 1});
                return detail::from_inits("v3-large", rows, 224, num_classes);
            }
            // Pre-optimization tail: one more full bottleneck, then the wide
            // feature conv still at 7x7 resolution.
            rows.push_back({BN, 3, 960, 320, false, HS, 1});
            rows.push_back({CV, 1, 0, 1280, false, HS, 1});
            rows.push_back({PL, 7, 0, 0, false, NO, 1});
            rows.push_back({NB, 1, 0, num_classes, false, NO, 1});
            return detail::from_inits("v3-large-original-last-stage", rows, 224,
                                      num_classes);
        }
        case BuiltinSpec::V3Small: {
            std::vector<RowInit> rows = {
                {CV, 3, 0, 16, false, HS, 2},
                {BN, 3, 16, 16, true, RE, 2},
                {BN, 3, 72, 24, false, RE, 2},
                {BN, 3, 88, 24, false, RE, 1},
                {BN, 5, 96, 40, true, HS, 2},
                {BN, 5, 240, 40, true, HS, 1},
                {BN, 5, 240, 40, true, HS, 1},
                {BN, 5, 120, 48, true, HS, 1},
                {BN, 5, 144, 48, true, HS, 1},
                {BN, 5, 288, 96, true, HS, 2},
                {BN, 5, 576, 96, true, HS, 1},
                {BN, 5, 576, 96, true, HS, 1},
                {CV, 1, 0, 576, false, HS, 1},
                {PL, 7, 0, 0, false, NO, 1},
                {NB, 1, 0, 1024, false, HS, 1},
                {NB, 1, 0, num_classes, false, NO, 1},
            };
            return detail::from_inits("v3-small", rows, 224, num_classes);
        }
        case BuiltinSpec::V2Reference: {
            std::vector<RowInit> rows = {{CV, 3, 0, 32, false, RE, 2}};
            struct Stage { int t, c, n, s; };
            const Stage stages[] = {{1, 16, 1, 1},  {6, 24, 2, 2}, {6, 32, 3, 2},
                                    {6, 64, 4, 2},  {6, 96, 3, 1}, {6, 160, 3, 2},
                                    {6, 320, 1, 1}};
            int ch = 32;
            for (const Stage& st : stages)
                for (int i = 0; i < st.n; ++i) {
                    rows.push_back({BN, 3, st.t * ch, st.c, false, RE,
                                    i == 0 ? st.s : 1});
                    ch = st.c;
                }
            rows.push_back({CV, 1, 0, 1280, false, RE, 1});
            rows.push_back({PL, 7, 0, 0, false, NO, 1});
            rows.push_back({NB, 1, 0, num_classes, false, NO, 1});
            return detail::from_inits("v2-reference", rows, 224, num_classes);
        }
    }
    throw SpecError("unknown builtin spec");
}

// ---------------------------------------------------------------------------
// Text format. Header `spec-version 1`, optional `name` / `multiplier` lines,
// then one row per line: input_res input_ch operator kernel exp out se nl
// stride, `-` for absent fields, `#` comments.

namespace detail {

inline const char* operator_token(Operator op) {
    switch (op) {
        case Operator::Conv2d: return "conv2d";
        case Operator::Bneck: return "bneck";
        case Operator::Pool: return "pool";
        case Operator::Conv2d1x1NBN: return "conv2d_nbn";
    }
    return "?";
}

inline const char* nl_token(Nonlinearity nl) {
    switch (nl) {
        case Nonlinearity::RE: return "RE";
        case Nonlinearity::HS: return "HS";
        case Nonlinearity::None: return "-";
    }
    return "-";
}

}  // namespace detail

inline std::string serialize_spec(const NetworkSpec& spec) {
    std::ostringstream os;
    os << "spec-version 1\n";
    if (!spec.name.empty()) os << "name " << spec.name << "\n";
    os << "multiplier " << spec.width_multiplier << "\n";
    os << "# input_res input_ch operator kernel exp out se nl stride\n";
    char line[128];
    for (const LayerRow& r : spec.rows) {
        std::string exp = r.exp_size ? std::to_string(*r.exp_size) : "-";
        std::string out = r.op == Operator::Pool ? std::string("-")
                                                 : std::to_string(r.out_channels);
        std::snprintf(line, sizeof(line), "%-5d %-5d %-10s %d %-5s %-5s %s %-2s %d\n",
                      r.input_resolution, r.input_channels,
                      detail::operator_token(r.op), r.kernel, exp.c_str(),
                      out.c_str(), r.se ? "1" : "-", detail::nl_token(r.nl),
                      r.stride);
        os << line;
    }
    return os.str();
}

inline NetworkSpec parse_spec(const std::string& text) {
    NetworkSpec spec;
    spec.name.clear();
    std::istringstream is(text);
    std::string raw;
    int lineno = 0;
    bool saw_version = false;
    auto fail = [&](const std::string& what) -> SpecError {
        return SpecError("parse error at line " + std::to_string(lineno) + ": " +
                         what);
    };
    while (std::getline(is, raw)) {
        ++lineno;
        std::string line = raw.substr(0, raw.find('#'));
        std::istringstream ls(line);
        std::string first;
        if (!(ls >> first)) continue;
        if (first == "spec-version") {
            int v = 0;
            if (!(ls >> v) || v != 1) throw fail("unsupported spec version");
            saw_version = true;
            continue;
        }
        if (!saw_version) throw fail("missing spec-version header");
        if (first == "name") {
            ls >> spec.name;
            continue;
        }
        if (first == "multiplier") {
            if (!(ls >> spec.width_multiplier)) throw fail("bad multiplier");
            continue;
        }
        LayerRow r;
        const std::string ires = first;
        std::string ich, op, kernel, exp, out, se, nl, stride;
        if (!(ls >> ich >> op >> kernel >> exp >> out >> se >> nl >> stride))
            throw fail("expected 9 columns");
        std::string trailing;
        if (ls >> trailing) throw fail("unexpected trailing column");
        try {
            r.input_resolution = std::stoi(ires);
            r.input_channels = std::stoi(ich);
            r.kernel = std::stoi(kernel);
            r.stride = std::stoi(stride);
        } catch (const std::exception&) {
            throw fail("malformed integer column");
        }
        if (op == "conv2d") r.op = Operator::Conv2d;
        else if (op == "bneck") r.op = Operator::Bneck;
        else if (op == "pool") r.op = Operator::Pool;
        else if (op == "conv2d_nbn") r.op = Operator::Conv2d1x1NBN;
        else throw fail("unknown operator '" + op + "'");
        if (exp != "-") {
            try { r.exp_size = std::stoi(exp); }
            catch (const std::exception&) { throw fail("malformed exp column"); }
        }
        if (out == "-") {
            if (r.op != Operator::Pool) throw fail("missing out channels");
            r.out_channels = r.input_channels;
        } else {
            try { r.out_channels = std::stoi(out); }
            catch (const std::exception&) { throw fail("malformed out column"); }
        }
        if (se == "1") r.se = true;
        else if (se != "-" && se != "0") throw fail("bad se column '" + se + "'");
        if (nl == "RE") r.nl = Nonlinearity::RE;
        else if (nl == "HS") r.nl = Nonlinearity::HS;
        else if (nl == "-") r.nl = Nonlinearity::None;
        else throw fail("bad nl column '" + nl + "'");
        spec.rows.push_back(r);
    }
    if (!saw_version) throw SpecError("parse error: empty document");
    if (spec.rows.empty()) throw SpecError("parse error: no layer rows");
    spec.resolution = spec.rows.front().input_resolution;
    const LayerRow& last = spec.rows.back();
    spec.num_classes = row_out_channels(last);
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// Width multiplier. Out-channel counts scale directly; expansion widths scale
// with the already-rounded input width so that the expansion ratio of each
// block is preserved (this is what the released scaled checkpoints do, and the
// published cost tables only reproduce under this rule). The penultimate
// classifier width never shrinks below its table value and never grows past
// 1280; the class count never scales.

inline NetworkSpec apply_multiplier(const NetworkSpec& spec, double alpha) {
    if (alpha <= 0.0) throw SpecError("apply_multiplier: alpha must be positive");
    if (alpha == 1.0) return spec;
    NetworkSpec out = spec;
    out.width_multiplier = spec.width_multiplier * alpha;
    const size_t n = spec.rows.size();
    int prev_old = 3, prev_new = 3;
    for (size_t i = 0; i < n; ++i) {
        const LayerRow& src = spec.rows[i];
        LayerRow& dst = out.rows[i];
        dst.input_channels = prev_new;
        if (src.op == Operator::Pool) {
            dst.out_channels = prev_new;
            prev_old = row_out_channels(src);
            continue;
        }
        const bool classifier = i + 1 == n && src.op == Operator::Conv2d1x1NBN;
        const bool penultimate =
            src.op == Operator::Conv2d1x1NBN && !classifier;
        if (classifier) {
            dst.out_channels = src.out_channels;
        } else if (penultimate) {
            dst.out_channels = alpha < 1.0 ? src.out_channels
                                           : std::min(round_channels(
                                                          src.out_channels * alpha),
                                                      1280);
        } else {
            dst.out_channels = round_channels(src.out_channels * alpha);
        }
        if (src.exp_size) {
            const double ratio = static_cast<double>(*src.exp_size) / prev_old;
            dst.exp_size = round_channels(ratio * prev_new);
        }
        prev_old = src.out_channels;
        prev_new = dst.out_channels;
    }
    validate(out);
    return out;
}

// ---------------------------------------------------------------------------
// Resolution. Rewrites the resolution chain; pool kernels track the new
// pre-pool spatial size.

inline NetworkSpec apply_resolution(const NetworkSpec& spec, int r) {
    if (r < 32 || r % 32 != 0)
        throw SpecError("apply_resolution: resolution must be a positive multiple "
                        "of 32, got " + std::to_string(r));
    NetworkSpec out = spec;
    out.resolution = r;
    int res = r;
    for (LayerRow& row : out.rows) {
        row.input_resolution = res;
        res = out_resolution(row);
    }
    validate(out);
    return out;
}

namespace detail {

// Recompute the chained input fields after a width or stride edit.
inline void rechain(NetworkSpec& spec) {
    int res = spec.resolution, ch = 3;
    for (LayerRow& r : spec.rows) {
        r.input_resolution = res;
        r.input_channels = ch;
        if (r.op == Operator::Pool) r.out_channels = ch;
        res = out_resolution(r);
        ch = row_out_channels(r);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Detection tail halving. C4 is the expansion layer of the bottleneck doing
// the final stride-2 downsample; every block strictly after it, up to and
// including the pre-pool feature conv (C5), is halved and re-rounded.

inline int find_c4_bneck_row(const NetworkSpec& spec) {
    int idx = -1;
    for (size_t i = 0; i < spec.rows.size(); ++i)
        if (spec.rows[i].op == Operator::Bneck && spec.rows[i].stride == 2)
            idx = static_cast<int>(i);
    if (idx < 0)
        throw SpecError(spec.name + ": no stride-2 bottleneck, C4 undefined");
    return idx;
}

inline NetworkSpec halve_c4_c5_channels(const NetworkSpec& spec) {
    const int c4 = find_c4_bneck_row(spec);
    NetworkSpec out = spec;
    out.name = spec.name + "-halved";
    for (size_t i = static_cast<size_t>(c4) + 1; i < out.rows.size(); ++i) {
        LayerRow& r = out.rows[i];
        if (r.op == Operator::Pool || r.op == Operator::Conv2d1x1NBN) break;
        if (r.exp_size) r.exp_size = round_channels(*r.exp_size / 2.0);
        r.out_channels = round_channels(r.out_channels / 2.0);
    }
    detail::rechain(out);
    validate(out);
    return out;
}

// Rewrites the nonlinearity column: h-swish on every non-classifier layer
// whose output width is at least `min_width`, ReLU below. min_width <= 0
// means ReLU everywhere.
inline NetworkSpec with_hswish_from_width(const NetworkSpec& spec, int min_width) {
    NetworkSpec out = spec;
    out.name = spec.name + (min_width > 0
                                ? "-hswish@" + std::to_string(min_width)
                                : "-relu");
    for (LayerRow& r : out.rows) {
        if (r.op == Operator::Pool || r.nl == Nonlinearity::None) continue;
        r.nl = (min_width > 0 && row_out_channels(r) >= min_width)
                   ? Nonlinearity::HS
                   : Nonlinearity::RE;
    }
    validate(out);
    return out;
}

}  // namespace mnf
