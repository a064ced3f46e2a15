#pragma once

// Executable node graph. Nodes are appended by builders, shapes are inferred
// from the input tensor, and forward() walks the topological order releasing
// intermediates once their consumers are done. Graphs are immutable after
// construction; concurrent forward passes on one graph are safe.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mnf/activations.hpp"
#include "mnf/tensor.hpp"

namespace mnf {

class GraphError : public std::runtime_error {
  public:
    explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class OpKind {
    Input,
    Conv,          // + optional bias
    BatchNorm,
    Act,
    GlobalAvgPool,
    AvgPool,       // fixed window, clamped to the feature map
    Add,
    Mul,           // element-wise product, same shapes
    MulChannels,   // in[0] * per-channel gate in[1]
    UpsampleLike,  // bilinear in[0] to the spatial size of in[1]
    Concat,        // channel concat
};

struct Node {
    OpKind kind = OpKind::Input;
    std::vector<int> in;
    std::string name;   // weight prefix, unique per parameterized node
    std::string layer;  // reporting bucket ("row05", "head", ...)
    int row = -1;       // source spec row index, -1 for non-spec graphs

    // Conv
    int in_ch = 0, out_ch = 0, kernel = 1, stride = 1, dilation = 1, groups = 1;
    bool bias = false;
    // BatchNorm
    int channels = 0;
    // Act
    Activation act = Activation::Identity;
    // AvgPool
    int pool_kh = 0, pool_kw = 0, pool_sh = 0, pool_sw = 0;
};

struct Shape {
    int c = 0, h = 0, w = 0;
};

struct Graph {
    std::vector<Node> nodes;
    std::map<std::string, int> taps;  // named outputs: logits, C4, C5, ...
    int output = -1;

    const Node& node(int id) const { return nodes[static_cast<size_t>(id)]; }
    int tap(const std::string& name) const {
        auto it = taps.find(name);
        if (it == taps.end()) throw GraphError("unknown tap '" + name + "'");
        return it->second;
    }
};

// ---------------------------------------------------------------------------
// Shape inference for one node given resolved input shapes.

inline Shape infer_shape(const Node& n, const std::vector<Shape>& in) {
    switch (n.kind) {
        case OpKind::Input:
            throw GraphError("infer_shape on input node");
        case OpKind::Conv: {
            const Shape& x = in[0];
            if (x.c != n.in_ch)
                throw GraphError("conv '" + n.name + "': expected " +
                                 std::to_string(n.in_ch) + " channels, got " +
                                 std::to_string(x.c));
            return {n.out_ch, (x.h + n.stride - 1) / n.stride,
                    (x.w + n.stride - 1) / n.stride};
        }
        case OpKind::BatchNorm:
            if (in[0].c != n.channels)
                throw GraphError("batchnorm '" + n.name + "': channel mismatch");
            return in[0];
        case OpKind::Act:
            return in[0];
        case OpKind::GlobalAvgPool:
            return {in[0].c, 1, 1};
        case OpKind::AvgPool: {
            const Shape& x = in[0];
            const int kh = std::min(n.pool_kh, x.h), kw = std::min(n.pool_kw, x.w);
            const int sh = std::min(n.pool_sh, x.h), sw = std::min(n.pool_sw, x.w);
            return {x.c, (x.h - kh) / sh + 1, (x.w - kw) / sw + 1};
        }
        case OpKind::Add:
        case OpKind::Mul:
            if (in[0].c != in[1].c || in[0].h != in[1].h || in[0].w != in[1].w)
                throw GraphError("binary op '" + n.name + "': shape mismatch");
            return in[0];
        case OpKind::MulChannels:
            if (in[1].c != in[0].c || in[1].h != 1 || in[1].w != 1)
                throw GraphError("mul '" + n.name + "': gate must be (c,1,1)");
            return in[0];
        case OpKind::UpsampleLike:
            return {in[0].c, in[1].h, in[1].w};
        case OpKind::Concat:
            if (in[0].h != in[1].h || in[0].w != in[1].w)
                throw GraphError("concat '" + n.name + "': spatial mismatch");
            return {in[0].c + in[1].c, in[0].h, in[0].w};
    }
    throw GraphError("unknown node kind");
}

// Resolve every node's output shape for a given input geometry.
inline std::vector<Shape> infer_shapes(const Graph& g, int in_ch, int in_h,
                                       int in_w) {
    std::vector<Shape> shapes(g.nodes.size());
    std::vector<Shape> args;
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        if (n.kind == OpKind::Input) {
            shapes[i] = {in_ch, in_h, in_w};
            continue;
        }
        args.clear();
        for (int src : n.in) {
            if (src < 0 || static_cast<size_t>(src) >= i)
                throw GraphError("node '" + n.name + "': bad edge");
            args.push_back(shapes[static_cast<size_t>(src)]);
        }
        shapes[i] = infer_shape(n, args);
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// Builder.

class GraphBuilder {
  public:
    int input() {
        Node n;
        n.kind = OpKind::Input;
        n.name = "input";
        return push(n);
    }

    int conv(int src, int in_ch, int out_ch, int kernel, int stride, int groups,
             bool bias, std::string name, int dilation = 1) {
        Node n;
        n.kind = OpKind::Conv;
        n.in = {src};
        n.in_ch = in_ch;
        n.out_ch = out_ch;
        n.kernel = kernel;
        n.stride = stride;
        n.groups = groups;
        n.dilation = dilation;
        n.bias = bias;
        n.name = std::move(name);
        return push(n);
    }

    int batchnorm(int src, int channels, std::string name) {
        Node n;
        n.kind = OpKind::BatchNorm;
        n.in = {src};
        n.channels = channels;
        n.name = std::move(name);
        return push(n);
    }

    int act(int src, Activation a, std::string name) {
        if (a == Activation::Identity) return src;
        Node n;
        n.kind = OpKind::Act;
        n.in = {src};
        n.act = a;
        n.name = std::move(name);
        return push(n);
    }

    int global_pool(int src, std::string name) {
        Node n;
        n.kind = OpKind::GlobalAvgPool;
        n.in = {src};
        n.name = std::move(name);
        return push(n);
    }

    int avg_pool(int src, int kh, int kw, int sh, int sw, std::string name) {
        Node n;
        n.kind = OpKind::AvgPool;
        n.in = {src};
        n.pool_kh = kh;
        n.pool_kw = kw;
        n.pool_sh = sh;
        n.pool_sw = sw;
        n.name = std::move(name);
        return push(n);
    }

    int add(int a, int b, std::string name) {
        Node n;
        n.kind = OpKind::Add;
        n.in = {a, b};
        n.name = std::move(name);
        return push(n);
    }

    int mul(int a, int b, std::string name) {
        Node n;
        n.kind = OpKind::Mul;
        n.in = {a, b};
        n.name = std::move(name);
        return push(n);
    }

    int mul_channels(int x, int gate, std::string name) {
        Node n;
        n.kind = OpKind::MulChannels;
        n.in = {x, gate};
        n.name = std::move(name);
        return push(n);
    }

    int upsample_like(int x, int ref, std::string name) {
        Node n;
        n.kind = OpKind::UpsampleLike;
        n.in = {x, ref};
        n.name = std::move(name);
        return push(n);
    }

    int concat(int a, int b, std::string name) {
        Node n;
        n.kind = OpKind::Concat;
        n.in = {a, b};
        n.name = std::move(name);
        return push(n);
    }

    void tap(const std::string& name, int id) { taps_[name] = id; }
    void set_layer(const std::string& layer, int row = -1) {
        layer_ = layer;
        row_ = row;
    }

    int last() const { return static_cast<int>(nodes_.size()) - 1; }

    Graph finish(int output) {
        Graph g;
        g.nodes = std::move(nodes_);
        g.taps = std::move(taps_);
        g.output = output;
        g.taps["logits"] = output;
        return g;
    }

  private:
    int push(Node n) {
        n.layer = layer_;
        n.row = row_;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> taps_;
    std::string layer_;
    int row_ = -1;
};

// ---------------------------------------------------------------------------
// Execution.

using WeightStore = std::map<std::string, Tensor>;

namespace detail {

inline const Tensor& fetch(const WeightStore& ws, const std::string& name) {
    auto it = ws.find(name);
    if (it == ws.end()) throw GraphError("missing weight tensor '" + name + "'");
    return it->second;
}

inline std::vector<float> fetch_vec(const WeightStore& ws, const std::string& name,
                                    int len) {
    const Tensor& t = fetch(ws, name);
    if (static_cast<int>(t.size()) != len)
        throw GraphError("weight tensor '" + name + "' has wrong length");
    return t.data;
}

}  // namespace detail

struct ForwardResult {
    Tensor output;
    std::map<std::string, Tensor> taps;
};

constexpr float kBatchNormEps = 1e-3f;

// Runs the graph; keep_taps lists tap names whose tensors should be retained.
inline ForwardResult forward(const Graph& g, const WeightStore& ws, const Tensor& x,
                             const std::vector<std::string>& keep_taps = {}) {
    std::vector<int> remaining(g.nodes.size(), 0);
    for (const Node& n : g.nodes)
        for (int src : n.in) ++remaining[static_cast<size_t>(src)];
    std::vector<bool> keep(g.nodes.size(), false);
    keep[static_cast<size_t>(g.output)] = true;
    for (const std::string& t : keep_taps)
        keep[static_cast<size_t>(g.tap(t))] = true;

    std::vector<Tensor> out(g.nodes.size());
    auto consume = [&](int id) -> Tensor& { return out[static_cast<size_t>(id)]; };
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const Node& n = g.nodes[i];
        switch (n.kind) {
            case OpKind::Input:
                out[i] = x;
                break;
            case OpKind::Conv: {
                const Tensor& wt = detail::fetch(ws, n.name + ".w");
                const Tensor* bs = nullptr;
                if (n.bias) bs = &detail::fetch(ws, n.name + ".b");
                ConvOpts o;
                o.stride = n.stride;
                o.dilation = n.dilation;
                o.groups = n.groups;
                out[i] = conv2d(consume(n.in[0]), wt, bs ? bs->data.data() : nullptr, o);
                break;
            }
            case OpKind::BatchNorm: {
                out[i] = batchnorm_inference(
                    consume(n.in[0]),
                    detail::fetch_vec(ws, n.name + ".gamma", n.channels),
                    detail::fetch_vec(ws, n.name + ".beta", n.channels),
                    detail::fetch_vec(ws, n.name + ".mean", n.channels),
                    detail::fetch_vec(ws, n.name + ".var", n.channels),
                    kBatchNormEps);
                break;
            }
            case OpKind::Act:
                out[i] = apply(n.act, consume(n.in[0]));
                break;
            case OpKind::GlobalAvgPool:
                out[i] = global_avg_pool(consume(n.in[0]));
                break;
            case OpKind::AvgPool: {
                const Tensor& src = consume(n.in[0]);
                out[i] = avg_pool(src, std::min(n.pool_kh, src.h),
                                  std::min(n.pool_kw, src.w),
                                  std::min(n.pool_sh, src.h),
                                  std::min(n.pool_sw, src.w));
                break;
            }
            case OpKind::Add:
                out[i] = add(consume(n.in[0]), consume(n.in[1]));
                break;
            case OpKind::Mul:
                out[i] = mul(consume(n.in[0]), consume(n.in[1]));
                break;
            case OpKind::MulChannels:
                out[i] = mul_channels(consume(n.in[0]), consume(n.in[1]));
                break;
            case OpKind::UpsampleLike: {
                const Tensor& ref = consume(n.in[1]);
                out[i] = bilinear_upsample(consume(n.in[0]), ref.h, ref.w);
                break;
            }
            case OpKind::Concat: {
                const Tensor& a = consume(n.in[0]);
                const Tensor& b = consume(n.in[1]);
                Tensor y(a.n, a.c + b.c, a.h, a.w);
                for (int ni = 0; ni < a.n; ++ni) {
                    for (int ci = 0; ci < a.c; ++ci)
                        std::copy(a.channel(ni, ci), a.channel(ni, ci) + a.h * a.w,
                                  y.channel(ni, ci));
                    for (int ci = 0; ci < b.c; ++ci)
                        std::copy(b.channel(ni, ci), b.channel(ni, ci) + b.h * b.w,
                                  y.channel(ni, a.c + ci));
                }
                out[i] = std::move(y);
                break;
            }
        }
        for (int src : n.in) {
            if (--remaining[static_cast<size_t>(src)] == 0 &&
                !keep[static_cast<size_t>(src)])
                out[static_cast<size_t>(src)] = Tensor();
        }
    }

    ForwardResult res;
    for (const std::string& t : keep_taps) res.taps[t] = out[static_cast<size_t>(g.tap(t))];
    res.output = std::move(out[static_cast<size_t>(g.output)]);
    return res;
}

}  // namespace mnf
