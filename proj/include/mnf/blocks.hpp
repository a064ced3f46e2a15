#pragma once

// Composite subgraphs: squeeze-and-excite, the inverted-residual bottleneck
// with optional SE and configurable nonlinearity, and the two network tails.

#include <stdexcept>
#include <string>

#include "mnf/graph.hpp"
#include "mnf/spec.hpp"

namespace mnf {

// Squeeze width is pinned to a quarter of the expansion width, re-rounded the
// same way as every other channel count.
inline int se_squeeze_width(int exp_ch) { return round_channels(exp_ch / 4.0); }

struct BneckConfig {
    int in_ch = 0;
    int exp_ch = 0;
    int out_ch = 0;
    int kernel = 3;
    int stride = 1;
    bool se = false;
    Activation nl = Activation::ReLU;
    int dilation = 1;  // applied to the depthwise stage
};

inline void validate(const BneckConfig& c) {
    if (c.in_ch < 1 || c.exp_ch < 1 || c.out_ch < 1)
        throw std::invalid_argument("bneck: non-positive channel count");
    if (c.kernel != 3 && c.kernel != 5)
        throw std::invalid_argument("bneck: kernel must be 3 or 5");
    if (c.stride != 1 && c.stride != 2)
        throw std::invalid_argument("bneck: stride must be 1 or 2");
    if (c.se && c.exp_ch < 8)
        throw std::invalid_argument("bneck: SE needs exp_ch >= 8");
}

inline bool has_residual(const BneckConfig& c) {
    return c.stride == 1 && c.in_ch == c.out_ch;
}

// Global pool -> 1x1 conv to squeeze + ReLU -> 1x1 conv back + hard-sigmoid ->
// per-channel rescale. The inner convs carry bias and no batch norm.
inline int build_se(GraphBuilder& gb, int input, int channels, int squeeze,
                    const std::string& name) {
    if (squeeze < 1) throw std::invalid_argument("se: squeeze must be >= 1");
    int g = gb.global_pool(input, name + ".pool");
    g = gb.conv(g, channels, squeeze, 1, 1, 1, true, name + ".fc1");
    g = gb.act(g, Activation::ReLU, name + ".fc1.act");
    g = gb.conv(g, squeeze, channels, 1, 1, 1, true, name + ".fc2");
    g = gb.act(g, Activation::HardSigmoid, name + ".gate");
    return gb.mul_channels(input, g, name + ".scale");
}

// 1x1 expand + BN + nl -> kxk depthwise (stride) + BN + nl -> [SE] ->
// 1x1 project + BN, no nonlinearity -> [+ residual]. The expansion conv is
// omitted when it would be width-preserving.
inline int build_bneck(GraphBuilder& gb, int input, const BneckConfig& c,
                       const std::string& name) {
    validate(c);
    int x = input;
    if (c.exp_ch != c.in_ch) {
        x = gb.conv(x, c.in_ch, c.exp_ch, 1, 1, 1, false, name + ".expand");
        x = gb.batchnorm(x, c.exp_ch, name + ".expand.bn");
        x = gb.act(x, c.nl, name + ".expand.act");
    }
    x = gb.conv(x, c.exp_ch, c.exp_ch, c.kernel, c.stride, c.exp_ch, false,
                name + ".dw", c.dilation);
    x = gb.batchnorm(x, c.exp_ch, name + ".dw.bn");
    x = gb.act(x, c.nl, name + ".dw.act");
    if (c.se) x = build_se(gb, x, c.exp_ch, se_squeeze_width(c.exp_ch), name + ".se");
    x = gb.conv(x, c.exp_ch, c.out_ch, 1, 1, 1, false, name + ".project");
    x = gb.batchnorm(x, c.out_ch, name + ".project.bn");
    if (has_residual(c)) x = gb.add(x, input, name + ".residual");
    return x;
}

enum class LastStage { Efficient, Original };

// Efficient: 1x1 conv to 6*in + BN + HS, global pool, then the two no-BN convs
// at 1x1 resolution. Original keeps the full bottleneck (expand, depthwise,
// project to 2*in) and the wide feature conv at pre-pool resolution.
inline int build_last_stage(GraphBuilder& gb, int input, LastStage kind, int in_ch,
                            int penult_ch, int num_classes,
                            const std::string& name) {
    const int feat = 6 * in_ch;
    int x = input;
    if (kind == LastStage::Efficient) {
        x = gb.conv(x, in_ch, feat, 1, 1, 1, false, name + ".feat");
        x = gb.batchnorm(x, feat, name + ".feat.bn");
        x = gb.act(x, Activation::HSwish, name + ".feat.act");
        x = gb.global_pool(x, name + ".pool");
        x = gb.conv(x, feat, penult_ch, 1, 1, 1, true, name + ".penult");
        x = gb.act(x, Activation::HSwish, name + ".penult.act");
        return gb.conv(x, penult_ch, num_classes, 1, 1, 1, true, name + ".logits");
    }
    BneckConfig tail;
    tail.in_ch = in_ch;
    tail.exp_ch = feat;
    tail.out_ch = 2 * in_ch;
    tail.kernel = 3;
    tail.stride = 1;
    tail.se = false;
    tail.nl = Activation::HSwish;
    x = build_bneck(gb, x, tail, name + ".tail");
    x = gb.conv(x, 2 * in_ch, penult_ch, 1, 1, 1, false, name + ".feat");
    x = gb.batchnorm(x, penult_ch, name + ".feat.bn");
    x = gb.act(x, Activation::HSwish, name + ".feat.act");
    x = gb.global_pool(x, name + ".pool");
    return gb.conv(x, penult_ch, num_classes, 1, 1, 1, true, name + ".logits");
}

}  // namespace mnf
