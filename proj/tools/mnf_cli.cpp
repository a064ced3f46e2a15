// mnf - build, inspect and search the MobileNet family models.
//
// Exit codes: 0 success, 1 usage error, 2 validation/runtime error. Data goes
// to stdout, diagnostics to stderr.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mnf/mnf.hpp"

namespace {

struct ModelArgs {
    std::string model = "v3-large";
    std::string spec_file;
    double mult = 1.0;
    int res = 0;  // 0 = keep spec resolution
    int classes = 1000;
};

void add_model_flags(CLI::App* cmd, ModelArgs& args, bool scaling = true) {
    cmd->add_option("--model", args.model,
                    "builtin: v3-large, v3-small, v3-large-original-last-stage, v2")
        ->default_val("v3-large");
    cmd->add_option("--spec", args.spec_file, "spec file instead of a builtin");
    if (scaling) {
        cmd->add_option("--mult", args.mult, "width multiplier")->default_val(1.0);
        cmd->add_option("--res", args.res, "input resolution (multiple of 32)");
    }
    cmd->add_option("--classes", args.classes, "classifier width")
        ->default_val(1000);
}

mnf::NetworkSpec resolve_spec(const ModelArgs& args) {
    mnf::NetworkSpec spec;
    if (!args.spec_file.empty()) {
        std::ifstream is(args.spec_file);
        if (!is) throw mnf::SpecError("cannot open spec file '" + args.spec_file + "'");
        std::ostringstream buf;
        buf << is.rdbuf();
        spec = mnf::parse_spec(buf.str());
    } else if (args.model == "v3-large") {
        spec = mnf::builtin_spec(mnf::BuiltinSpec::V3Large, args.classes);
    } else if (args.model == "v3-small") {
        spec = mnf::builtin_spec(mnf::BuiltinSpec::V3Small, args.classes);
    } else if (args.model == "v3-large-original-last-stage") {
        spec = mnf::builtin_spec(mnf::BuiltinSpec::V3LargeOriginalLastStage,
                                 args.classes);
    } else if (args.model == "v2") {
        spec = mnf::builtin_spec(mnf::BuiltinSpec::V2Reference, args.classes);
    } else {
        throw mnf::SpecError("unknown model '" + args.model + "'");
    }
    if (args.mult != 1.0) spec = mnf::apply_multiplier(spec, args.mult);
    if (args.res != 0) spec = mnf::apply_resolution(spec, args.res);
    return spec;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

mnf::Tensor make_input(const std::string& source, int channels, int h, int w) {
    if (source == "zeros") return mnf::Tensor(1, channels, h, w, 0.0f);
    if (source == "ones") return mnf::Tensor(1, channels, h, w, 1.0f);
    if (source.rfind("random:", 0) == 0) {
        const uint64_t seed = std::stoull(source.substr(7));
        mnf::Tensor t(1, channels, h, w);
        std::mt19937_64 rng(seed);
        for (float& v : t.data)
            v = static_cast<float>((static_cast<double>(rng() >> 11) * 0x1.0p-53) *
                                       2.0 -
                                   1.0);
        return t;
    }
    if (source.rfind("file:", 0) == 0) {
        const std::string path = source.substr(5);
        std::ifstream is(path, std::ios::binary | std::ios::ate);
        if (!is) throw mnf::IoError("cannot open input file '" + path + "'");
        const std::streamoff size = is.tellg();
        mnf::Tensor t(1, channels, h, w);
        if (static_cast<size_t>(size) != t.size() * sizeof(float))
            throw mnf::IoError("input file holds " + std::to_string(size) +
                               " bytes, expected " +
                               std::to_string(t.size() * sizeof(float)));
        is.seekg(0);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        return t;
    }
    throw mnf::SpecError("unknown input source '" + source +
                         "' (want zeros|ones|random:<seed>|file:<path>)");
}

// Shared table/CSV emitters so both formats print identical numbers.
struct Sheet {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void print(const std::string& format) const {
        if (format == "csv") {
            print_delim(",");
            return;
        }
        std::vector<size_t> width(header.size());
        for (size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
        for (const auto& r : rows)
            for (size_t c = 0; c < r.size(); ++c)
                width[c] = std::max(width[c], r[c].size());
        auto line = [&](const std::vector<std::string>& r) {
            for (size_t c = 0; c < r.size(); ++c)
                std::printf("%-*s%s", static_cast<int>(width[c]), r[c].c_str(),
                            c + 1 == r.size() ? "\n" : "  ");
        };
        line(header);
        for (const auto& r : rows) line(r);
    }

    void print_delim(const std::string& d) const {
        auto line = [&](const std::vector<std::string>& r) {
            for (size_t c = 0; c < r.size(); ++c)
                std::printf("%s%s", r[c].c_str(), c + 1 == r.size() ? "\n" : d.c_str());
        };
        line(header);
        for (const auto& r : rows) line(r);
    }
};

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

int cmd_summarize(const ModelArgs& margs, const std::string& format,
                  const std::string& profile_path) {
    const mnf::NetworkSpec spec = resolve_spec(margs);
    mnf::CostReport rep = mnf::count(spec);
    if (!profile_path.empty()) {
        const mnf::DeviceProfile prof = mnf::load_profile(profile_path);
        rep.est_latency_ms = mnf::estimate_latency(rep, prof);
    }
    Sheet sheet;
    sheet.header = {"layer", "madds", "params"};
    for (const auto& l : rep.per_layer)
        sheet.rows.push_back({l.name, std::to_string(l.madds), std::to_string(l.params)});
    sheet.rows.push_back({"total", std::to_string(rep.total_madds),
                          std::to_string(rep.total_params)});
    sheet.print(format);
    if (rep.est_latency_ms)
        std::printf("estimated_latency_ms,%s\n", fmt_double(*rep.est_latency_ms).c_str());
    return 0;
}

int cmd_grid(const ModelArgs& margs, const std::string& format,
             const std::string& mults, const std::string& res_list,
             const std::string& profile_path) {
    ModelArgs base = margs;
    base.mult = 1.0;
    base.res = 0;
    const mnf::NetworkSpec spec = resolve_spec(base);
    const std::vector<double> ms = parse_double_list(mults);
    const std::vector<int> rs = parse_int_list(res_list);
    const auto grid = mnf::count_grid(spec, ms, rs);
    std::optional<mnf::DeviceProfile> prof;
    if (!profile_path.empty()) prof = mnf::load_profile(profile_path);
    Sheet sheet;
    sheet.header = {"network", "mult", "res", "madds", "params"};
    if (prof) sheet.header.push_back("est_latency_ms");
    for (const auto& e : grid) {
        std::vector<std::string> row = {
            spec.name, fmt_double(e.multiplier), std::to_string(e.resolution),
            std::to_string(e.report.total_madds),
            std::to_string(e.report.total_params)};
        if (prof)
            row.push_back(fmt_double(mnf::estimate_latency(e.report, *prof)));
        sheet.rows.push_back(std::move(row));
    }
    sheet.print(format);
    return 0;
}

int cmd_infer(const ModelArgs& margs, const std::string& format,
              const std::string& weights, const std::string& input, int top) {
    const mnf::NetworkSpec spec = resolve_spec(margs);
    const mnf::Graph g = mnf::build(spec);
    const mnf::WeightStore ws = mnf::bind_weights(g, mnf::load_weights(weights));
    const mnf::Tensor x = make_input(input, 3, spec.resolution, spec.resolution);
    const mnf::Tensor logits = mnf::forward_logits(g, ws, x);
    const std::vector<float> probs = mnf::softmax(logits);
    std::vector<int> order(probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)]; });
    Sheet sheet;
    sheet.header = {"class", "logit", "prob"};
    const size_t limit = format == "csv" ? probs.size()
                                         : std::min<size_t>(static_cast<size_t>(top), probs.size());
    for (size_t i = 0; i < limit; ++i) {
        const int cls = format == "csv" ? static_cast<int>(i) : order[i];
        sheet.rows.push_back({std::to_string(cls),
                              fmt_double(logits.at(0, cls, 0, 0)),
                              fmt_double(probs[static_cast<size_t>(cls)])});
    }
    sheet.print(format);
    return 0;
}

int cmd_init_weights(const ModelArgs& margs, uint64_t seed,
                     const std::string& out) {
    const mnf::NetworkSpec spec = resolve_spec(margs);
    const mnf::Graph g = mnf::build(spec);
    mnf::save_weights(mnf::init_weights(g, seed), out);
    std::fprintf(stderr, "wrote %s\n", out.c_str());
    return 0;
}

int cmd_search(const ModelArgs& margs, const std::string& format,
               double target_ms, const std::string& profile_path,
               const std::string& oracle_name, uint64_t seed, double delta_frac,
               int granularity, long budget) {
    const mnf::NetworkSpec spec = resolve_spec(margs);
    const mnf::DeviceProfile prof = mnf::load_profile(profile_path);
    const mnf::LatencyFn lat = [&prof](const mnf::NetworkSpec& s) {
        return mnf::estimate_latency(mnf::count(s), prof);
    };
    if (oracle_name != "synthetic")
        throw mnf::SpecError("unknown oracle '" + oracle_name +
                             "' (shipped: synthetic)");
    const mnf::AccuracyFn oracle = mnf::synthetic_capacity_oracle(spec, seed);
    mnf::SearchConfig cfg;
    cfg.target_latency_ms = target_ms;
    cfg.delta_fraction = delta_frac;
    cfg.granularity = granularity;
    cfg.oracle_budget = budget;
    const mnf::SearchResult res = mnf::netadapt_run(spec, oracle, lat, cfg);
    if (format == "csv") {
        std::fputs(mnf::trajectory_csv(res.state).c_str(), stdout);
    } else {
        Sheet sheet;
        sheet.header = {"step", "proposal_kind", "site", "new_width",
                        "latency_ms", "acc", "ratio"};
        for (size_t i = 0; i < res.state.trajectory.size(); ++i) {
            const auto& t = res.state.trajectory[i];
            sheet.rows.push_back({std::to_string(i + 1),
                                  mnf::proposal_kind_name(t.kind),
                                  std::to_string(t.row_begin + 1),
                                  std::to_string(t.new_width),
                                  fmt_double(t.latency_ms), fmt_double(t.acc),
                                  fmt_double(t.ratio)});
        }
        sheet.print(format);
    }
    std::fprintf(stderr, "%s target %.3f ms after %d steps (final %.3f ms)\n",
                 res.reached_target ? "reached" : "stopped short of", target_ms,
                 res.state.step, res.state.latency_ms);
    return res.reached_target ? 0 : 2;
}

int cmd_compare_nl(const ModelArgs& margs, const std::string& format,
                   const std::string& variant) {
    const mnf::NetworkSpec spec = resolve_spec(margs);

    // Per-variant cost plus how many tensor elements pass through each
    // nonlinearity in one forward pass (what distinguishes the variants).
    auto act_elems = [](const mnf::NetworkSpec& s) {
        const mnf::Graph g = mnf::build(s);
        const auto shapes = mnf::infer_shapes(g, 3, s.resolution, s.resolution);
        unsigned long long hs = 0, re = 0;
        for (size_t i = 0; i < g.nodes.size(); ++i) {
            const mnf::Node& n = g.nodes[i];
            if (n.kind != mnf::OpKind::Act) continue;
            const auto elems = static_cast<unsigned long long>(shapes[i].c) *
                               shapes[i].h * shapes[i].w;
            if (n.act == mnf::Activation::HSwish) hs += elems;
            if (n.act == mnf::Activation::ReLU) re += elems;
        }
        return std::pair<unsigned long long, unsigned long long>(hs, re);
    };

    std::vector<std::pair<std::string, mnf::NetworkSpec>> variants;
    variants.emplace_back("baseline", spec);
    auto want = [&](const std::string& v) {
        return variant == "all" || variant == v;
    };
    if (want("relu")) variants.emplace_back("relu", mnf::with_hswish_from_width(spec, 0));
    if (want("hswish@16"))
        variants.emplace_back("hswish@16", mnf::with_hswish_from_width(spec, 16));
    if (want("hswish@112"))
        variants.emplace_back("hswish@112", mnf::with_hswish_from_width(spec, 112));
    if (variants.size() == 1)
        throw mnf::SpecError("unknown variant '" + variant +
                             "' (want relu|hswish@16|hswish@112|all)");

    Sheet sheet;
    sheet.header = {"variant", "madds", "params", "hswish_elems", "relu_elems"};
    for (const auto& [name, v] : variants) {
        const mnf::CostReport rep = mnf::count(v);
        const auto [hs, re] = act_elems(v);
        sheet.rows.push_back({name, std::to_string(rep.total_madds),
                              std::to_string(rep.total_params),
                              std::to_string(hs), std::to_string(re)});
    }
    sheet.print(format);
    return 0;
}

int cmd_seg_summary(const ModelArgs& margs, const std::string& format,
                    const std::string& head, int filters, int os, bool rf2,
                    int classes, const std::string& input_res) {
    const mnf::NetworkSpec spec = resolve_spec(margs);
    mnf::SegHeadConfig cfg;
    cfg.head = head == "raspp" ? mnf::SegHead::RASPP : mnf::SegHead::LRASPP;
    if (head != "raspp" && head != "lraspp")
        throw mnf::SpecError("unknown head '" + head + "' (want lraspp|raspp)");
    cfg.filters = filters;
    cfg.output_stride = os;
    cfg.reduce_last_block = rf2;
    cfg.num_classes = classes;
    int h = 1024, w = 2048;
    if (!input_res.empty()) {
        const auto xpos = input_res.find('x');
        if (xpos == std::string::npos)
            throw mnf::SpecError("--input-res wants HxW, e.g. 1024x2048");
        h = std::stoi(input_res.substr(0, xpos));
        w = std::stoi(input_res.substr(xpos + 1));
    }
    const mnf::CostReport rep = mnf::segmentation_cost(spec, cfg, h, w);
    Sheet sheet;
    sheet.header = {"layer", "madds", "params"};
    for (const auto& l : rep.per_layer)
        sheet.rows.push_back({l.name, std::to_string(l.madds), std::to_string(l.params)});
    sheet.rows.push_back({"total", std::to_string(rep.total_madds),
                          std::to_string(rep.total_params)});
    sheet.print(format);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MobileNet family construction, inference and cost analysis"};
    app.require_subcommand(1);

    std::string format = "table";
    ModelArgs margs;

    auto* summarize = app.add_subcommand("summarize", "per-layer MAdds/params");
    add_model_flags(summarize, margs);
    std::string profile_path;
    summarize->add_option("--profile", profile_path, "device profile file");
    summarize->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* grid = app.add_subcommand("grid", "cost table over multipliers/resolutions");
    add_model_flags(grid, margs, /*scaling=*/false);
    std::string mults = "1.0", res_list = "224";
    grid->add_option("--mult", mults, "comma list of multipliers");
    grid->add_option("--res", res_list, "comma list of resolutions");
    grid->add_option("--profile", profile_path, "device profile file");
    grid->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* infer = app.add_subcommand("infer", "run a forward pass");
    add_model_flags(infer, margs);
    std::string weights, input = "zeros";
    int top = 5;
    infer->add_option("--weights", weights, "MNF1 weights file")->required();
    infer->add_option("--input", input, "zeros|ones|random:<seed>|file:<path>");
    infer->add_option("--top", top, "rows shown in table format");
    infer->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* initw = app.add_subcommand("init-weights", "write seeded random weights");
    add_model_flags(initw, margs);
    uint64_t seed = 0;
    std::string out_path = "weights.mnf";
    initw->add_option("--seed", seed)->default_val(0);
    initw->add_option("--out", out_path)->required();
    initw->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* search = app.add_subcommand("search", "layer-wise latency search");
    add_model_flags(search, margs);
    double target_ms = 0.0, delta_frac = 0.01;
    int granularity = 8;
    long budget = 10000;
    std::string oracle = "synthetic";
    search->add_option("--target-ms", target_ms)->required();
    search->add_option("--profile", profile_path)->required();
    search->add_option("--oracle", oracle, "accuracy oracle (synthetic)");
    search->add_option("--seed", seed)->default_val(0);
    search->add_option("--delta-frac", delta_frac)->default_val(0.01);
    search->add_option("--granularity", granularity)->default_val(8);
    search->add_option("--budget", budget)->default_val(10000);
    search->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* cmp = app.add_subcommand("compare-nl", "cost across nonlinearity layouts");
    add_model_flags(cmp, margs);
    std::string variant = "all";
    cmp->add_option("--variant", variant, "relu|hswish@16|hswish@112|all");
    cmp->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    auto* seg = app.add_subcommand("seg-summary", "segmentation model cost");
    add_model_flags(seg, margs);
    std::string head = "lraspp", input_res = "1024x2048";
    int filters = 128, os = 16, seg_classes = 19;
    bool rf2 = true;
    seg->add_option("--head", head, "lraspp|raspp");
    seg->add_option("--filters", filters)->default_val(128);
    seg->add_option("--os", os, "output stride 16|32")->default_val(16);
    seg->add_flag("--rf2,!--no-rf2", rf2, "halve last backbone block");
    seg->add_option("--seg-classes", seg_classes)->default_val(19);
    seg->add_option("--input-res", input_res, "HxW");
    seg->add_option("--format", format)->check(CLI::IsMember({"table", "csv"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage diagnostic
        return code == 0 ? 0 : 1;
    }

    try {
        if (summarize->parsed()) return cmd_summarize(margs, format, profile_path);
        if (grid->parsed())
            return cmd_grid(margs, format, mults, res_list, profile_path);
        if (infer->parsed()) return cmd_infer(margs, format, weights, input, top);
        if (initw->parsed()) return cmd_init_weights(margs, seed, out_path);
        if (search->parsed())
            return cmd_search(margs, format, target_ms, profile_path, oracle, seed,
                              delta_frac, granularity, budget);
        if (cmp->parsed()) return cmd_compare_nl(margs, format, variant);
        if (seg->parsed())
            return cmd_seg_summary(margs, format, head, filters, os, rf2,
                                   seg_classes, input_res);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
