#pragma once

// Compiles a NetworkSpec into an executable graph, owns weight initialization
// and the versioned binary weights file, and exposes the detection taps.

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mnf/blocks.hpp"
#include "mnf/graph.hpp"
#include "mnf/spec.hpp"

namespace mnf {

class IoError : public std::runtime_error {
  public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Spec -> graph. Row i becomes the subgraph named rowNN; C4 taps the expansion
// output of the bottleneck doing the last stride-2 downsample, C5 the feature
// map right before pooling.

namespace detail {

inline std::string row_name(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "row%02zu", i + 1);
    return buf;
}

}  // namespace detail

inline Graph build(const NetworkSpec& spec) {
    validate(spec);
    GraphBuilder gb;
    gb.set_layer("input");
    int x = gb.input();
    const int c4_row = [&] {
        try { return find_c4_bneck_row(spec); }
        catch (const SpecError&) { return -1; }
    }();
    int pre_pool = -1;
    for (size_t i = 0; i < spec.rows.size(); ++i) {
        const LayerRow& r = spec.rows[i];
        const std::string name = detail::row_name(i);
        gb.set_layer(name, static_cast<int>(i));
        switch (r.op) {
            case Operator::Conv2d: {
                x = gb.conv(x, r.input_channels, r.out_channels, r.kernel, r.stride,
                            1, false, name + ".conv");
                x = gb.batchnorm(x, r.out_channels, name + ".bn");
                x = gb.act(x, to_activation(r.nl), name + ".act");
                if (r.se)
                    x = build_se(gb, x, r.out_channels,
                                 se_squeeze_width(r.out_channels), name + ".se");
                break;
            }
            case Operator::Bneck: {
                BneckConfig c;
                c.in_ch = r.input_channels;
                c.exp_ch = *r.exp_size;
                c.out_ch = r.out_channels;
                c.kernel = r.kernel;
                c.stride = r.stride;
                c.se = r.se;
                c.nl = to_activation(r.nl);
                x = build_bneck(gb, x, c, name);
                break;
            }
            case Operator::Pool:
                pre_pool = x;
                x = gb.global_pool(x, name + ".pool");
                break;
            case Operator::Conv2d1x1NBN: {
                x = gb.conv(x, r.input_channels, r.out_channels, 1, r.stride, 1,
                            true, name + ".conv");
                x = gb.act(x, to_activation(r.nl), name + ".act");
                if (r.se)
                    x = build_se(gb, x, r.out_channels,
                                 se_squeeze_width(r.out_channels), name + ".se");
                break;
            }
        }
    }
    Graph g = gb.finish(x);
    if (pre_pool >= 0) g.taps["C5"] = pre_pool;
    if (c4_row >= 0) {
        // Locate the expansion activation of the C4 block by name.
        const std::string want = detail::row_name(static_cast<size_t>(c4_row));
        int id = -1;
        for (size_t i = 0; i < g.nodes.size(); ++i) {
            const Node& n = g.nodes[i];
            if (n.name == want + ".expand.act") id = static_cast<int>(i);
        }
        if (id < 0) {
            // Width-preserving block: the expansion is the block input.
            for (size_t i = 0; i < g.nodes.size(); ++i)
                if (g.nodes[i].name == want + ".dw")
                    id = g.nodes[i].in[0];
        }
        if (id >= 0) g.taps["C4"] = id;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Deterministic initialization: fan-in-scaled truncated normal for conv
// weights (|z| <= 2 sigma), zero bias, identity batch norm. The normal draw is
// hand-rolled Box-Muller over mt19937_64 so the stream is platform-stable.

namespace detail {

class TruncatedNormal {
  public:
    explicit TruncatedNormal(uint64_t seed) : rng_(seed) {}

    float draw(float sigma) {
        for (;;) {
            if (have_) {
                have_ = false;
                if (spare_ >= -2.0 && spare_ <= 2.0)
                    return static_cast<float>(spare_ * sigma);
                continue;
            }
            const double u1 = uniform(), u2 = uniform();
            const double r = std::sqrt(-2.0 * std::log(u1));
            const double z0 = r * std::cos(2.0 * 3.14159265358979323846 * u2);
            spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
            have_ = true;
            if (z0 >= -2.0 && z0 <= 2.0) return static_cast<float>(z0 * sigma);
        }
    }

  private:
    double uniform() {
        // (0,1]: avoids log(0)
        return (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
    }
    std::mt19937_64 rng_;
    bool have_ = false;
    double spare_ = 0.0;
};

}  // namespace detail

inline WeightStore init_weights(const Graph& g, uint64_t seed) {
    detail::TruncatedNormal rng(seed);
    WeightStore ws;
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Conv) {
            Tensor w(n.out_ch, n.in_ch / n.groups, n.kernel, n.kernel);
            const float fan_in =
                static_cast<float>(n.kernel) * n.kernel * n.in_ch / n.groups;
            const float sigma = std::sqrt(2.0f / fan_in);
            for (float& v : w.data) v = rng.draw(sigma);
            ws[n.name + ".w"] = std::move(w);
            if (n.bias) ws[n.name + ".b"] = Tensor(1, n.out_ch, 1, 1, 0.0f);
        } else if (n.kind == OpKind::BatchNorm) {
            ws[n.name + ".gamma"] = Tensor(1, n.channels, 1, 1, 1.0f);
            ws[n.name + ".beta"] = Tensor(1, n.channels, 1, 1, 0.0f);
            ws[n.name + ".mean"] = Tensor(1, n.channels, 1, 1, 0.0f);
            ws[n.name + ".var"] = Tensor(1, n.channels, 1, 1, 1.0f);
        }
    }
    return ws;
}

// The exact tensor set (names and shapes) a graph's weights must provide.
inline WeightStore expected_weight_shapes(const Graph& g) {
    WeightStore ws;
    for (const Node& n : g.nodes) {
        if (n.kind == OpKind::Conv) {
            ws[n.name + ".w"] = Tensor(n.out_ch, n.in_ch / n.groups, n.kernel, n.kernel);
            if (n.bias) ws[n.name + ".b"] = Tensor(1, n.out_ch, 1, 1);
        } else if (n.kind == OpKind::BatchNorm) {
            for (const char* f : {".gamma", ".beta", ".mean", ".var"})
                ws[n.name + f] = Tensor(1, n.channels, 1, 1);
        }
    }
    return ws;
}

// ---------------------------------------------------------------------------
// Inference entry points.

inline Tensor forward_logits(const Graph& g, const WeightStore& ws, const Tensor& x) {
    return forward(g, ws, x).output;
}

inline std::map<std::string, Tensor> tap_features(const Graph& g,
                                                  const WeightStore& ws,
                                                  const Tensor& x) {
    return forward(g, ws, x, {"C4", "C5"}).taps;
}

inline std::vector<float> softmax(const Tensor& logits, int batch_index = 0) {
    std::vector<float> p(static_cast<size_t>(logits.c));
    float mx = -1e30f;
    for (int ci = 0; ci < logits.c; ++ci)
        mx = std::max(mx, logits.at(batch_index, ci, 0, 0));
    double sum = 0.0;
    for (int ci = 0; ci < logits.c; ++ci) {
        p[static_cast<size_t>(ci)] = std::exp(logits.at(batch_index, ci, 0, 0) - mx);
        sum += p[static_cast<size_t>(ci)];
    }
    for (float& v : p) v = static_cast<float>(v / sum);
    return p;
}

// ---------------------------------------------------------------------------
// Weights file: magic MNF1, per-tensor records (u32 name length, name, u8 rank,
// u32 dims, f32 payload, all little-endian), trailing CRC32 of everything
// before it.

namespace detail {

inline uint32_t crc32_update(uint32_t crc, const void* buf, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(buf);
    crc ^= 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

struct CrcWriter {
    std::ofstream os;
    uint32_t crc = 0;
    void write(const void* p, size_t len) {
        os.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
        crc = crc32_update(crc, p, len);
    }
    void u32(uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        write(b, 4);
    }
};

struct CrcReader {
    std::ifstream is;
    uint32_t crc = 0;
    void read(void* p, size_t len) {
        is.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
        if (is.gcount() != static_cast<std::streamsize>(len))
            throw IoError("weights file truncated");
        crc = crc32_update(crc, p, len);
    }
    uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) |
               (static_cast<uint32_t>(b[3]) << 24);
    }
};

}  // namespace detail

static_assert(std::endian::native == std::endian::little,
              "MNF1 weight files assume a little-endian host");

inline void save_weights(const WeightStore& ws, const std::string& path) {
    detail::CrcWriter w;
    w.os.open(path, std::ios::binary);
    if (!w.os) throw IoError("cannot open '" + path + "' for writing");
    w.write("MNF1", 4);
    for (const auto& [name, t] : ws) {  // map order: sorted, deterministic
        w.u32(static_cast<uint32_t>(name.size()));
        w.write(name.data(), name.size());
        const unsigned char rank = 4;
        w.write(&rank, 1);
        w.u32(static_cast<uint32_t>(t.n));
        w.u32(static_cast<uint32_t>(t.c));
        w.u32(static_cast<uint32_t>(t.h));
        w.u32(static_cast<uint32_t>(t.w));
        w.write(t.data.data(), t.data.size() * sizeof(float));
    }
    const uint32_t crc = w.crc;
    unsigned char b[4] = {static_cast<unsigned char>(crc),
                          static_cast<unsigned char>(crc >> 8),
                          static_cast<unsigned char>(crc >> 16),
                          static_cast<unsigned char>(crc >> 24)};
    w.os.write(reinterpret_cast<const char*>(b), 4);
    if (!w.os) throw IoError("write failed for '" + path + "'");
}

inline WeightStore load_weights(const std::string& path) {
    detail::CrcReader r;
    r.is.open(path, std::ios::binary | std::ios::ate);
    if (!r.is) throw IoError("cannot open '" + path + "'");
    const std::streamoff size = r.is.tellg();
    if (size < 8) throw IoError("weights file truncated");
    r.is.seekg(0);
    char magic[4];
    r.read(magic, 4);
    if (std::string_view(magic, 4) != "MNF1")
        throw IoError("bad magic, not an MNF1 weights file");
    WeightStore ws;
    while (size - r.is.tellg() > 4) {
        const uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > 4096)
            throw IoError("weights file corrupt: name length");
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        unsigned char rank;
        r.read(&rank, 1);
        if (rank != 4) throw IoError("unsupported tensor rank");
        const int n = static_cast<int>(r.u32());
        const int c = static_cast<int>(r.u32());
        const int h = static_cast<int>(r.u32());
        const int w = static_cast<int>(r.u32());
        if (n < 0 || c < 0 || h < 0 || w < 0 ||
            static_cast<long long>(n) * c * h * w > (1ll << 31))
            throw IoError("weights file corrupt: dims");
        Tensor t(n, c, h, w);
        r.read(t.data.data(), t.data.size() * sizeof(float));
        ws[name] = std::move(t);
    }
    const uint32_t computed = r.crc;
    if (size - r.is.tellg() != 4) throw IoError("weights file truncated");
    const uint32_t stored = r.u32();
    if (stored != computed) throw IoError("weights file CRC mismatch");
    return ws;
}

// Verifies the store carries exactly the tensors the graph needs, with the
// right shapes, then returns it.
inline WeightStore bind_weights(const Graph& g, WeightStore ws) {
    const WeightStore expect = expected_weight_shapes(g);
    for (const auto& [name, t] : expect) {
        auto it = ws.find(name);
        if (it == ws.end())
            throw IoError("weights do not match graph: missing '" + name + "'");
        if (!it->second.same_shape(t))
            throw IoError("weights do not match graph: '" + name + "' is " +
                          it->second.shape_str() + ", expected " + t.shape_str());
    }
    for (const auto& [name, t] : ws)
        if (!expect.count(name))
            throw IoError("weights do not match graph: unexpected '" + name + "'");
    return ws;
}

}  // namespace mnf
