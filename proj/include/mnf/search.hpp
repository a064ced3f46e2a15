#pragma once

// Layer-wise architecture search: per step, propose the smallest width shrink
// at every site that buys at least delta latency, score each proposal with a
// pluggable accuracy oracle, and commit the one with the best accuracy change
// per unit of latency saved. Also the multi-objective latency-aware reward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnf/spec.hpp"

namespace mnf {

// acc * (lat/target)^w; w < 0 penalizes exceeding the target.
inline double mnas_reward(double acc, double latency_ms, double target_ms,
                          double w) {
    if (latency_ms <= 0.0 || target_ms <= 0.0)
        throw std::invalid_argument("mnas_reward: latency and target must be > 0");
    return acc * std::pow(latency_ms / target_ms, w);
}

constexpr double kMnasRewardWeightLarge = -0.07;
constexpr double kMnasRewardWeightSmall = -0.15;

class NoProposalsError : public std::runtime_error {
  public:
    NoProposalsError() : std::runtime_error("netadapt: no viable proposals") {}
};

struct Proposal {
    enum class Kind { ShrinkExpansion, ShrinkBottleneckGroup };
    Kind kind = Kind::ShrinkExpansion;
    int row_begin = 0;   // first affected spec row
    int row_end = 0;     // one past the last affected row
    int old_width = 0;
    int new_width = 0;
    double latency_delta_ms = 0.0;  // negative
    NetworkSpec spec;
};

inline const char* proposal_kind_name(Proposal::Kind k) {
    return k == Proposal::Kind::ShrinkExpansion ? "shrink_expansion"
                                                : "shrink_bottleneck_group";
}

struct SearchConfig {
    double target_latency_ms = 0.0;
    double delta_fraction = 0.01;  // delta = fraction * seed latency
    long oracle_budget = 10000;    // evaluation budget handed to the oracle
    int granularity = 8;           // width step, multiple of 8
};

using LatencyFn = std::function<double(const NetworkSpec&)>;
// Oracle contract: pure function of (spec, budget); higher is better.
using AccuracyFn = std::function<double(const NetworkSpec&, long budget)>;

struct TrajectoryStep {
    Proposal::Kind kind;
    int row_begin = 0;
    int new_width = 0;
    double latency_ms = 0.0;
    double acc = 0.0;
    double ratio = 0.0;  // selection metric of the committed proposal
};

struct SearchState {
    NetworkSpec spec;
    double latency_ms = 0.0;
    double acc = 0.0;
    double delta_ms = 0.0;  // per-step latency floor, fixed from the seed
    int step = 0;
    std::vector<TrajectoryStep> trajectory;
};

// ---------------------------------------------------------------------------
// Proposal generation.

namespace detail {

// Maximal runs of consecutive bottleneck rows sharing one output width; the
// width is shrunk jointly so the residual links inside the run survive.
struct BneckGroup {
    int row_begin = 0, row_end = 0;
    int width = 0;
};

inline std::vector<BneckGroup> bottleneck_groups(const NetworkSpec& spec) {
    std::vector<BneckGroup> groups;
    const int n = static_cast<int>(spec.rows.size());
    for (int i = 0; i < n;) {
        if (spec.rows[static_cast<size_t>(i)].op != Operator::Bneck) {
            ++i;
            continue;
        }
        const int width = spec.rows[static_cast<size_t>(i)].out_channels;
        int j = i + 1;
        while (j < n && spec.rows[static_cast<size_t>(j)].op == Operator::Bneck &&
               spec.rows[static_cast<size_t>(j)].out_channels == width)
            ++j;
        groups.push_back({i, j, width});
        i = j;
    }
    return groups;
}

inline NetworkSpec with_expansion(const NetworkSpec& spec, int row, int width) {
    NetworkSpec out = spec;
    out.rows[static_cast<size_t>(row)].exp_size = width;
    return out;
}

inline NetworkSpec with_group_width(const NetworkSpec& spec, const BneckGroup& g,
                                    int width) {
    NetworkSpec out = spec;
    for (int i = g.row_begin; i < g.row_end; ++i)
        out.rows[static_cast<size_t>(i)].out_channels = width;
    rechain(out);
    return out;
}

inline bool creates_new_residual(const NetworkSpec& spec, const BneckGroup& g,
                                 int width) {
    const LayerRow& first = spec.rows[static_cast<size_t>(g.row_begin)];
    if (first.stride != 1) return false;
    if (first.input_channels == g.width) return false;  // residual already there
    return first.input_channels == width;
}

}  // namespace detail

// One proposal per site: the smallest shrink (in granularity steps) whose
// latency reduction reaches delta; sites that cannot reach delta even at the
// minimum width are dropped.
inline std::vector<Proposal> generate_proposals(const NetworkSpec& spec,
                                                const LatencyFn& latency_fn,
                                                double delta_ms, int granularity) {
    if (delta_ms <= 0.0)
        throw std::invalid_argument("generate_proposals: delta must be positive");
    if (granularity < 1 || granularity % 8 != 0)
        throw std::invalid_argument(
            "generate_proposals: granularity must be a positive multiple of 8");
    const double base = latency_fn(spec);
    std::vector<Proposal> out;

    for (size_t i = 0; i < spec.rows.size(); ++i) {
        const LayerRow& r = spec.rows[i];
        if (r.op != Operator::Bneck) continue;
        const int old_width = *r.exp_size;
        for (int w = old_width - granularity; w >= 8; w -= granularity) {
            NetworkSpec cand = detail::with_expansion(spec, static_cast<int>(i), w);
            const double lat = latency_fn(cand);
            if (base - lat >= delta_ms) {
                Proposal p;
                p.kind = Proposal::Kind::ShrinkExpansion;
                p.row_begin = static_cast<int>(i);
                p.row_end = static_cast<int>(i) + 1;
                p.old_width = old_width;
                p.new_width = w;
                p.latency_delta_ms = lat - base;
                p.spec = std::move(cand);
                validate(p.spec);
                out.push_back(std::move(p));
                break;
            }
        }
    }

    for (const detail::BneckGroup& g : detail::bottleneck_groups(spec)) {
        for (int w = g.width - granularity; w >= 8; w -= granularity) {
            if (detail::creates_new_residual(spec, g, w)) continue;
            NetworkSpec cand = detail::with_group_width(spec, g, w);
            const double lat = latency_fn(cand);
            if (base - lat >= delta_ms) {
                Proposal p;
                p.kind = Proposal::Kind::ShrinkBottleneckGroup;
                p.row_begin = g.row_begin;
                p.row_end = g.row_end;
                p.old_width = g.width;
                p.new_width = w;
                p.latency_delta_ms = lat - base;
                p.spec = std::move(cand);
                validate(p.spec);
                out.push_back(std::move(p));
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selection: argmax of (acc_proposal - acc_current) / |latency_delta|; ties go
// to the larger latency reduction, then the lowest affected row, then the
// proposal kind. Deterministic regardless of evaluation order.

inline SearchState netadapt_step(const SearchState& state,
                                 const AccuracyFn& oracle,
                                 const LatencyFn& latency_fn,
                                 const SearchConfig& cfg) {
    std::vector<Proposal> proposals =
        generate_proposals(state.spec, latency_fn, state.delta_ms, cfg.granularity);
    if (proposals.empty()) throw NoProposalsError();

    int best = -1;
    double best_ratio = 0.0, best_acc = 0.0;
    for (size_t i = 0; i < proposals.size(); ++i) {
        const Proposal& p = proposals[i];
        const double acc = oracle(p.spec, cfg.oracle_budget);
        const double ratio = (acc - state.acc) / std::fabs(p.latency_delta_ms);
        bool take = best < 0;
        if (!take) {
            const Proposal& q = proposals[static_cast<size_t>(best)];
            if (ratio != best_ratio) take = ratio > best_ratio;
            else if (p.latency_delta_ms != q.latency_delta_ms)
                take = p.latency_delta_ms < q.latency_delta_ms;
            else if (p.row_begin != q.row_begin) take = p.row_begin < q.row_begin;
            else take = static_cast<int>(p.kind) < static_cast<int>(q.kind);
        }
        if (take) {
            best = static_cast<int>(i);
            best_ratio = ratio;
            best_acc = acc;
        }
    }

    const Proposal& chosen = proposals[static_cast<size_t>(best)];
    SearchState next;
    next.spec = chosen.spec;
    next.latency_ms = state.latency_ms + chosen.latency_delta_ms;
    next.acc = best_acc;
    next.delta_ms = state.delta_ms;
    next.step = state.step + 1;
    next.trajectory = state.trajectory;
    next.trajectory.push_back({chosen.kind, chosen.row_begin, chosen.new_width,
                               next.latency_ms, best_acc, best_ratio});
    return next;
}

struct SearchResult {
    SearchState state;
    bool reached_target = false;
    double delta_ms = 0.0;
};

inline SearchResult netadapt_run(const NetworkSpec& seed, const AccuracyFn& oracle,
                                 const LatencyFn& latency_fn,
                                 const SearchConfig& cfg) {
    if (cfg.delta_fraction <= 0.0 || cfg.delta_fraction >= 1.0)
        throw std::invalid_argument("netadapt_run: delta_fraction must be in (0,1)");
    validate(seed);
    SearchResult res;
    res.state.spec = seed;
    res.state.latency_ms = latency_fn(seed);
    res.state.acc = oracle(seed, cfg.oracle_budget);
    res.state.delta_ms = cfg.delta_fraction * res.state.latency_ms;
    res.delta_ms = res.state.delta_ms;
    while (res.state.latency_ms > cfg.target_latency_ms) {
        try {
            res.state = netadapt_step(res.state, oracle, latency_fn, cfg);
        } catch (const NoProposalsError&) {
            res.reached_target = false;
            return res;
        }
    }
    res.reached_target = true;
    return res;
}

inline std::string trajectory_csv(const SearchState& state) {
    std::ostringstream os;
    os << "step,proposal_kind,site,new_width,latency_ms,acc,ratio\n";
    for (size_t i = 0; i < state.trajectory.size(); ++i) {
        const TrajectoryStep& t = state.trajectory[i];
        os << i + 1 << "," << proposal_kind_name(t.kind) << "," << t.row_begin + 1
           << "," << t.new_width << "," << t.latency_ms << "," << t.acc << ","
           << t.ratio << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Shipped oracle: a deterministic capacity proxy, concave and monotone in
// every channel width. Per-site weights are drawn from the rng seed; the
// normalizer is frozen at construction so shrinking any width lowers the
// score. The evaluation budget is accepted and ignored.

inline AccuracyFn synthetic_capacity_oracle(const NetworkSpec& seed,
                                            uint64_t rng_seed) {
    struct Site { double w_exp, w_out; };
    auto sites = std::make_shared<std::vector<Site>>();
    std::mt19937_64 rng(rng_seed);
    auto unit = [&rng] {
        return 0.5 + (static_cast<double>(rng() >> 11) * 0x1.0p-53);
    };
    for (const LayerRow& r : seed.rows)
        if (r.op == Operator::Bneck) sites->push_back({unit(), unit()});
    auto raw = [sites](const NetworkSpec& spec) {
        size_t k = 0;
        double s = 0.0;
        for (const LayerRow& r : spec.rows) {
            if (r.op != Operator::Bneck) continue;
            if (k >= sites->size())
                throw std::invalid_argument(
                    "synthetic oracle: spec has more bottlenecks than its seed");
            s += (*sites)[k].w_exp * std::log1p(static_cast<double>(*r.exp_size));
            s += (*sites)[k].w_out * std::log1p(static_cast<double>(r.out_channels));
            ++k;
        }
        return s;
    };
    const double norm = raw(seed) * 1.25;
    return [raw, norm](const NetworkSpec& spec, long) {
        return raw(spec) / norm;
    };
}

}  // namespace mnf
