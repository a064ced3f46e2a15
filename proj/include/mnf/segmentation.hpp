#pragma once

// Dense-prediction heads over the classification backbones. Output stride 16
// runs the last backbone block at stride 1 with dilated depthwise convs;
// stride 32 leaves it untouched. RF2 halves every channel count in that last
// block before the head attaches. Heads emit per-pixel class logits at the
// input resolution.

#include <stdexcept>
#include <string>
#include <vector>

#include "mnf/blocks.hpp"
#include "mnf/cost.hpp"
#include "mnf/graph.hpp"
#include "mnf/model.hpp"
#include "mnf/spec.hpp"

namespace mnf {

enum class SegHead { RASPP, LRASPP };

struct SegHeadConfig {
    SegHead head = SegHead::LRASPP;
    int filters = 128;  // F, head width
    int num_classes = 19;
    int output_stride = 16;  // 16 or 32
    bool reduce_last_block = true;  // RF2
};

inline void validate(const SegHeadConfig& cfg) {
    if (cfg.filters < 1) throw std::invalid_argument("seg: filters must be >= 1");
    if (cfg.num_classes < 1)
        throw std::invalid_argument("seg: num_classes must be >= 1");
    if (cfg.output_stride != 16 && cfg.output_stride != 32)
        throw std::invalid_argument("seg: output stride must be 16 or 32");
}

namespace detail {

struct SegBackbone {
    std::vector<LayerRow> rows;  // through the pre-pool feature conv
    int low_level_row = -1;      // last row whose output sits at stride 8
    int last_block_row = -1;     // the final stride-2 bottleneck
};

inline SegBackbone segmentation_rows(const NetworkSpec& spec,
                                     const SegHeadConfig& cfg) {
    SegBackbone bb;
    for (const LayerRow& r : spec.rows) {
        if (r.op == Operator::Pool || r.op == Operator::Conv2d1x1NBN) break;
        bb.rows.push_back(r);
    }
    if (bb.rows.empty())
        throw std::invalid_argument("seg: spec has no backbone rows");
    for (size_t i = 0; i < bb.rows.size(); ++i)
        if (bb.rows[i].op == Operator::Bneck && bb.rows[i].stride == 2)
            bb.last_block_row = static_cast<int>(i);
    if (bb.last_block_row < 0)
        throw std::invalid_argument("seg: no stride-2 bottleneck in backbone");
    if (cfg.reduce_last_block) {
        for (size_t i = static_cast<size_t>(bb.last_block_row); i < bb.rows.size();
             ++i) {
            LayerRow& r = bb.rows[i];
            if (r.exp_size) r.exp_size = round_channels(*r.exp_size / 2.0);
            r.out_channels = round_channels(r.out_channels / 2.0);
        }
        int ch = bb.rows.front().input_channels;
        for (LayerRow& r : bb.rows) {
            r.input_channels = ch;
            ch = row_out_channels(r);
        }
    }
    int stride = 1;
    for (size_t i = 0; i < bb.rows.size(); ++i) {
        stride *= bb.rows[i].stride;
        if (stride == 8) bb.low_level_row = static_cast<int>(i);
    }
    if (bb.low_level_row < 0)
        throw std::invalid_argument("seg: backbone never reaches stride 8");
    return bb;
}

struct BackboneTaps {
    int high = -1;
    int low = -1;
};

inline BackboneTaps emit_backbone(GraphBuilder& gb, int input,
                                  const SegBackbone& bb, bool dilate_last_block) {
    BackboneTaps taps;
    int x = input;
    for (size_t i = 0; i < bb.rows.size(); ++i) {
        const LayerRow& r = bb.rows[i];
        const std::string name = "bb" + std::to_string(i + 1);
        gb.set_layer(name, static_cast<int>(i));
        const bool in_last_block = static_cast<int>(i) >= bb.last_block_row;
        switch (r.op) {
            case Operator::Conv2d:
                x = gb.conv(x, r.input_channels, r.out_channels, r.kernel,
                            r.stride, 1, false, name + ".conv");
                x = gb.batchnorm(x, r.out_channels, name + ".bn");
                x = gb.act(x, to_activation(r.nl), name + ".act");
                break;
            case Operator::Bneck: {
                BneckConfig c;
                c.in_ch = r.input_channels;
                c.exp_ch = *r.exp_size;
                c.out_ch = r.out_channels;
                c.kernel = r.kernel;
                c.stride = r.stride;
                c.se = r.se;
                c.nl = to_activation(r.nl);
                if (dilate_last_block && in_last_block) {
                    if (static_cast<int>(i) == bb.last_block_row) c.stride = 1;
                    c.dilation = 2;
                }
                x = build_bneck(gb, x, c, name);
                break;
            }
            default:
                throw std::invalid_argument("seg: unexpected backbone row");
        }
        if (static_cast<int>(i) == bb.low_level_row) taps.low = x;
    }
    taps.high = x;
    return taps;
}

}  // namespace detail

// Backbone through C5 with taps `low_level` (stride 8) and `high_level`
// (stride = cfg.output_stride). The graph's output is high_level.
inline Graph build_backbone_for_segmentation(const NetworkSpec& spec,
                                             const SegHeadConfig& cfg) {
    validate(spec);
    validate(cfg);
    const detail::SegBackbone bb = detail::segmentation_rows(spec, cfg);
    GraphBuilder gb;
    gb.set_layer("input");
    const int input = gb.input();
    const detail::BackboneTaps taps =
        detail::emit_backbone(gb, input, bb, cfg.output_stride == 16);
    Graph g = gb.finish(taps.high);
    g.taps["low_level"] = taps.low;
    g.taps["high_level"] = taps.high;
    return g;
}

// Two branches over the high-level features: a 1x1 conv to F, and a 49x49
// stride-(16,20) average pool -> 1x1 conv -> hard-sigmoid gate, upsampled and
// multiplied in. Class logits come from the gated features plus a low-level
// skip projected straight to classes, then upsampling back to the input.
inline int build_lraspp(GraphBuilder& gb, int high, int low, int input,
                        int high_ch, int low_ch, const SegHeadConfig& cfg) {
    gb.set_layer("head");
    const int F = cfg.filters;
    int a = gb.conv(high, high_ch, F, 1, 1, 1, false, "head.cbr");
    a = gb.batchnorm(a, F, "head.cbr.bn");
    a = gb.act(a, Activation::ReLU, "head.cbr.act");
    int s = gb.avg_pool(high, 49, 49, 16, 20, "head.pool");
    s = gb.conv(s, high_ch, F, 1, 1, 1, true, "head.scale");
    s = gb.act(s, Activation::HardSigmoid, "head.scale.gate");
    s = gb.upsample_like(s, a, "head.scale.up");
    const int gated = gb.mul(a, s, "head.gated");
    int cls = gb.conv(gated, F, cfg.num_classes, 1, 1, 1, true, "head.high_cls");
    cls = gb.upsample_like(cls, low, "head.up8");
    const int skip =
        gb.conv(low, low_ch, cfg.num_classes, 1, 1, 1, true, "head.low_cls");
    const int sum = gb.add(cls, skip, "head.sum");
    return gb.upsample_like(sum, input, "head.up_full");
}

// Reduced ASPP: a 1x1 conv branch and a global-pool image branch, concatenated
// and projected to class logits, plus the same skip and upsampling tail.
inline int build_raspp(GraphBuilder& gb, int high, int low, int input,
                       int high_ch, int low_ch, const SegHeadConfig& cfg) {
    gb.set_layer("head");
    const int F = cfg.filters;
    int a = gb.conv(high, high_ch, F, 1, 1, 1, false, "head.branch_a");
    a = gb.batchnorm(a, F, "head.branch_a.bn");
    a = gb.act(a, Activation::ReLU, "head.branch_a.act");
    int b = gb.global_pool(high, "head.image_pool");
    b = gb.conv(b, high_ch, F, 1, 1, 1, true, "head.image_fc");
    b = gb.act(b, Activation::ReLU, "head.image_fc.act");
    b = gb.upsample_like(b, a, "head.image_up");
    const int cat = gb.concat(a, b, "head.concat");
    int cls = gb.conv(cat, 2 * F, cfg.num_classes, 1, 1, 1, true, "head.high_cls");
    cls = gb.upsample_like(cls, low, "head.up8");
    const int skip =
        gb.conv(low, low_ch, cfg.num_classes, 1, 1, 1, true, "head.low_cls");
    const int sum = gb.add(cls, skip, "head.sum");
    return gb.upsample_like(sum, input, "head.up_full");
}

// Full model: backbone + head; taps low_level / high_level / logits.
inline Graph build_segmentation_model(const NetworkSpec& spec,
                                      const SegHeadConfig& cfg) {
    validate(spec);
    validate(cfg);
    const detail::SegBackbone bb = detail::segmentation_rows(spec, cfg);
    GraphBuilder gb;
    gb.set_layer("input");
    const int input = gb.input();
    const detail::BackboneTaps taps =
        detail::emit_backbone(gb, input, bb, cfg.output_stride == 16);
    const int high_ch = row_out_channels(bb.rows.back());
    const int low_ch =
        row_out_channels(bb.rows[static_cast<size_t>(bb.low_level_row)]);
    const int out = cfg.head == SegHead::LRASPP
                        ? build_lraspp(gb, taps.high, taps.low, input, high_ch,
                                       low_ch, cfg)
                        : build_raspp(gb, taps.high, taps.low, input, high_ch,
                                      low_ch, cfg);
    Graph g = gb.finish(out);
    g.taps["low_level"] = taps.low;
    g.taps["high_level"] = taps.high;
    return g;
}

inline CostReport segmentation_cost(const NetworkSpec& spec,
                                    const SegHeadConfig& cfg, int in_h, int in_w) {
    if (in_h % 32 != 0 || in_w % 32 != 0)
        throw std::invalid_argument("seg: input dims must be multiples of 32");
    const Graph g = build_segmentation_model(spec, cfg);
    const std::string label =
        spec.name + (cfg.head == SegHead::LRASPP ? "+lraspp" : "+raspp");
    return count_graph(g, 3, in_h, in_w, label);
}

}  // namespace mnf
