#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "mnf/cost.hpp"
#include "mnf/spec.hpp"
#include "testutil.hpp"

using namespace mnf;

TEST_CASE("v3-large builtin reproduces the published table") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    REQUIRE(s.rows.size() == 20);
    REQUIRE(s.resolution == 224);
    REQUIRE(s.num_classes == 1000);

    const LayerRow& r1 = s.rows[0];
    REQUIRE(r1.input_resolution == 224);
    REQUIRE(r1.input_channels == 3);
    REQUIRE(r1.op == Operator::Conv2d);
    REQUIRE(r1.out_channels == 16);
    REQUIRE(r1.nl == Nonlinearity::HS);
    REQUIRE(r1.stride == 2);

    // the stride-2 112-to-160 block: 14^2 x 112 input, 5x5, exp 672, SE, HS
    const LayerRow& r14 = s.rows[13];
    REQUIRE(r14.input_resolution == 14);
    REQUIRE(r14.input_channels == 112);
    REQUIRE(r14.op == Operator::Bneck);
    REQUIRE(r14.kernel == 5);
    REQUIRE(*r14.exp_size == 672);
    REQUIRE(r14.out_channels == 160);
    REQUIRE(r14.se);
    REQUIRE(r14.nl == Nonlinearity::HS);
    REQUIRE(r14.stride == 2);

    REQUIRE(s.rows[16].out_channels == 960);   // pre-pool feature conv
    REQUIRE(s.rows[17].op == Operator::Pool);
    REQUIRE(s.rows[18].out_channels == 1280);  // no-BN head conv
    REQUIRE(s.rows[18].nl == Nonlinearity::HS);
    REQUIRE(s.rows[19].out_channels == 1000);
    REQUIRE(s.rows[19].nl == Nonlinearity::None);
    REQUIRE_NOTHROW(validate(s));
}

TEST_CASE("v3-small builtin reproduces the published table") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Small);
    REQUIRE(s.rows.size() == 16);

    const LayerRow& r2 = s.rows[1];
    REQUIRE(r2.input_resolution == 112);
    REQUIRE(r2.op == Operator::Bneck);
    REQUIRE(r2.kernel == 3);
    REQUIRE(*r2.exp_size == 16);
    REQUIRE(r2.out_channels == 16);
    REQUIRE(r2.se);
    REQUIRE(r2.nl == Nonlinearity::RE);
    REQUIRE(r2.stride == 2);

    REQUIRE(s.rows[12].op == Operator::Conv2d);
    REQUIRE(s.rows[12].out_channels == 576);
    REQUIRE(s.rows[14].out_channels == 1024);
}

TEST_CASE("the two large tails differ only past the last bottleneck") {
    const NetworkSpec eff = builtin_spec(BuiltinSpec::V3Large);
    const NetworkSpec orig = builtin_spec(BuiltinSpec::V3LargeOriginalLastStage);
    for (int i = 0; i < 16; ++i) {
        REQUIRE(orig.rows[static_cast<size_t>(i)].out_channels ==
                eff.rows[static_cast<size_t>(i)].out_channels);
    }
    REQUIRE(orig.rows[16].op == Operator::Bneck);
    REQUIRE(*orig.rows[16].exp_size == 960);
    REQUIRE(orig.rows[16].out_channels == 320);
    REQUIRE(orig.rows[17].out_channels == 1280);
    REQUIRE(orig.rows[17].input_resolution == 7);  // wide conv still at 7x7
}

TEST_CASE("v2 reference spec shape") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V2Reference);
    REQUIRE(s.rows.front().out_channels == 32);
    int bnecks = 0;
    for (const LayerRow& r : s.rows)
        if (r.op == Operator::Bneck) ++bnecks;
    REQUIRE(bnecks == 17);
    REQUIRE(s.rows[s.rows.size() - 3].out_channels == 1280);
}

TEST_CASE("round_channels") {
    REQUIRE(round_channels(16 * 0.75) == 16);  // 12 -> nearest 8-multiple is 16
    REQUIRE(round_channels(16) == 16);
    REQUIRE(round_channels(4) == 8);           // floor
    REQUIRE(round_channels(18) == 24);         // 16 < 0.9*18, guard bumps up
    REQUIRE(round_channels(20) == 24);
    REQUIRE(round_channels(100) == 104);
    std::mt19937_64 rng(20);
    for (int i = 0; i < 2000; ++i) {
        const double v = 1.0 + (rng() % 4000) / 10.0;
        const int r = round_channels(v);
        REQUIRE(r % 8 == 0);
        REQUIRE(r >= 8);
        REQUIRE(static_cast<double>(r) >= 0.9 * v);
    }
}

TEST_CASE("apply_multiplier at 1.0 is the identity") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    const NetworkSpec t = apply_multiplier(s, 1.0);
    REQUIRE(serialize_spec(t) == serialize_spec(s));
}

TEST_CASE("apply_multiplier scales widths and keeps the chain consistent") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    const NetworkSpec t = apply_multiplier(s, 0.75);
    REQUIRE_NOTHROW(validate(t));
    REQUIRE(t.rows[0].out_channels == 16);  // round_channels(12) = 16
    REQUIRE(t.rows[18].out_channels == 1280);  // head width stays below 1.0
    REQUIRE(t.rows[19].out_channels == 1000);  // classes never scale
    for (const LayerRow& r : t.rows) {
        if (r.op == Operator::Pool) continue;
        REQUIRE(r.out_channels % 8 == 0);
        if (r.exp_size) REQUIRE(*r.exp_size % 8 == 0);
    }
    // expansion widths follow the block's expansion ratio on scaled inputs
    REQUIRE(t.rows[8].input_channels == 64);   // 80 -> 64
    REQUIRE(*t.rows[8].exp_size == 160);       // ratio 200/80 = 2.5 on 64
}

TEST_CASE("apply_multiplier above 1 grows the head up to 1280") {
    const NetworkSpec large = builtin_spec(BuiltinSpec::V3Large);
    const NetworkSpec small = builtin_spec(BuiltinSpec::V3Small);
    REQUIRE(apply_multiplier(large, 1.25).rows[18].out_channels == 1280);
    REQUIRE(apply_multiplier(small, 1.25).rows[14].out_channels == 1280);
}

TEST_CASE("0.75x large lands the published parameter count") {
    const CostReport rep = count(apply_multiplier(builtin_spec(BuiltinSpec::V3Large), 0.75));
    REQUIRE_THAT(static_cast<double>(rep.total_params),
                 Catch::Matchers::WithinRel(4.0e6, 0.03));
}

TEST_CASE("apply_multiplier keeps chains valid on random specs") {
    std::mt19937_64 rng(21);
    for (int i = 0; i < 200; ++i) {
        const NetworkSpec s = testutil::random_spec(rng);
        for (double a : {0.35, 0.5, 0.75, 1.25}) {
            REQUIRE_NOTHROW(validate(apply_multiplier(s, a)));
        }
    }
    REQUIRE_THROWS_AS(apply_multiplier(builtin_spec(BuiltinSpec::V3Small), 0.0),
                      SpecError);
}

TEST_CASE("apply_resolution") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    SECTION("224 is the identity") {
        REQUIRE(serialize_spec(apply_resolution(s, 224)) == serialize_spec(s));
    }
    SECTION("96 shrinks the pre-pool map to 3x3") {
        const NetworkSpec t = apply_resolution(s, 96);
        REQUIRE(t.rows[17].input_resolution == 3);
        REQUIRE(t.rows[18].input_resolution == 1);
        REQUIRE_NOTHROW(validate(t));
    }
    SECTION("non-multiples of 32 are rejected") {
        REQUIRE_THROWS_AS(apply_resolution(s, 100), SpecError);
        REQUIRE_THROWS_AS(apply_resolution(s, 0), SpecError);
    }
}

TEST_CASE("tail halving after the last downsampling block") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    REQUIRE(find_c4_bneck_row(s) == 13);
    const NetworkSpec h = halve_c4_c5_channels(s);
    REQUIRE_NOTHROW(validate(h));
    // the block owning C4 keeps its widths
    REQUIRE(*h.rows[13].exp_size == 672);
    REQUIRE(h.rows[13].out_channels == 160);
    // the two bottlenecks after it and the feature conv halve
    REQUIRE(*h.rows[14].exp_size == 480);
    REQUIRE(h.rows[14].out_channels == 80);
    REQUIRE(*h.rows[15].exp_size == 480);
    REQUIRE(h.rows[15].out_channels == 80);
    REQUIRE(h.rows[16].out_channels == 480);
    // head rows untouched
    REQUIRE(h.rows[18].out_channels == 1280);
    REQUIRE(h.rows[19].out_channels == 1000);

    SECTION("applying twice halves twice") {
        const NetworkSpec hh = halve_c4_c5_channels(h);
        REQUIRE(hh.rows[16].out_channels == 240);
        REQUIRE(*hh.rows[14].exp_size == 240);
    }
    SECTION("small network analog") {
        const NetworkSpec sm = builtin_spec(BuiltinSpec::V3Small);
        REQUIRE(find_c4_bneck_row(sm) == 9);  // the 9th bottleneck
        const NetworkSpec smh = halve_c4_c5_channels(sm);
        REQUIRE(*smh.rows[10].exp_size == 288);
        REQUIRE(smh.rows[10].out_channels == 48);
        REQUIRE(smh.rows[12].out_channels == 288);
    }
    SECTION("backbone parameter drop sits in the published band") {
        // detection-tail halving removes ~1.75M params in the published
        // comparison, of which the backbone share is ~1.26M
        const CostReport full = count(s), half = count(halve_c4_c5_channels(s));
        const auto drop = static_cast<double>(full.total_params - half.total_params);
        REQUIRE(drop > 1.0e6);
        REQUIRE(drop < 2.1e6);
        REQUIRE(full.total_params - half.total_params == 5483032 - 3609512);
    }
    SECTION("specs without a stride-2 bottleneck have no C4") {
        NetworkSpec flat;
        flat.name = "flat";
        flat.resolution = 32;
        flat.num_classes = 5;
        LayerRow r;
        r.input_resolution = 32;
        r.input_channels = 3;
        r.op = Operator::Conv2d;
        r.kernel = 3;
        r.out_channels = 8;
        r.nl = Nonlinearity::RE;
        r.stride = 2;
        flat.rows.push_back(r);
        REQUIRE_THROWS_AS(halve_c4_c5_channels(flat), SpecError);
    }
}

TEST_CASE("nonlinearity threshold rewrite") {
    const NetworkSpec s = builtin_spec(BuiltinSpec::V3Large);
    const NetworkSpec relu = with_hswish_from_width(s, 0);
    for (const LayerRow& r : relu.rows)
        REQUIRE(r.nl != Nonlinearity::HS);
    const NetworkSpec hs16 = with_hswish_from_width(s, 16);
    for (const LayerRow& r : hs16.rows)
        if (r.op != Operator::Pool && r.nl != Nonlinearity::None)
            REQUIRE(r.nl == Nonlinearity::HS);
    const NetworkSpec hs112 = with_hswish_from_width(s, 112);
    REQUIRE(hs112.rows[0].nl == Nonlinearity::RE);   // stem is 16 wide
    REQUIRE(hs112.rows[11].nl == Nonlinearity::HS);  // 112-wide block
    REQUIRE(hs112.rows[7].nl == Nonlinearity::RE);   // 80-wide block
}

TEST_CASE("serialize then parse is the identity") {
    for (BuiltinSpec b : {BuiltinSpec::V3Large, BuiltinSpec::V3Small,
                          BuiltinSpec::V3LargeOriginalLastStage,
                          BuiltinSpec::V2Reference}) {
        const NetworkSpec s = builtin_spec(b);
        const NetworkSpec t = parse_spec(serialize_spec(s));
        REQUIRE(serialize_spec(t) == serialize_spec(s));
        REQUIRE(t.name == s.name);
        REQUIRE(t.resolution == s.resolution);
        REQUIRE(t.num_classes == s.num_classes);
    }
    std::mt19937_64 rng(22);
    for (int i = 0; i < 1000; ++i) {
        const NetworkSpec s = testutil::random_spec(rng);
        REQUIRE(serialize_spec(parse_spec(serialize_spec(s))) == serialize_spec(s));
    }
}

TEST_CASE("parse errors carry line numbers and name the broken pair") {
    SECTION("empty document") {
        REQUIRE_THROWS_AS(parse_spec(""), SpecError);
        REQUIRE_THROWS_WITH(parse_spec("# only a comment\n"),
                            Catch::Matchers::ContainsSubstring("empty"));
    }
    SECTION("chain break between rows is detected with the pair named") {
        const std::string text =
            "spec-version 1\n"
            "224 3  conv2d 3 -  24 - HS 2\n"
            "112 40 bneck  3 64 40 - RE 1\n"  // 24 vs 40 input mismatch
            "112 40 conv2d 1 -  64 - HS 1\n"
            "112 64 pool   7 -  -  - -  1\n"
            "1   64 conv2d_nbn 1 - 10 - - 1\n";
        REQUIRE_THROWS_WITH(parse_spec(text),
                            Catch::Matchers::ContainsSubstring("rows 1/2"));
    }
    SECTION("malformed lines report their line number") {
        REQUIRE_THROWS_WITH(parse_spec("spec-version 1\n224 3 conv2d x - 16 - HS 2\n"),
                            Catch::Matchers::ContainsSubstring("line 2"));
        REQUIRE_THROWS_WITH(parse_spec("spec-version 1\n224 3 warp 3 - 16 - HS 2\n"),
                            Catch::Matchers::ContainsSubstring("unknown operator"));
        REQUIRE_THROWS_WITH(parse_spec("224 3 conv2d 3 - 16 - HS 2\n"),
                            Catch::Matchers::ContainsSubstring("spec-version"));
    }
    SECTION("structural invariants are enforced") {
        // exp on a conv row
        REQUIRE_THROWS(parse_spec("spec-version 1\n224 3 conv2d 3 64 16 - HS 2\n"));
        // SE bneck with tiny expansion
        NetworkSpec s = builtin_spec(BuiltinSpec::V3Small);
        s.rows[1].exp_size = 4;
        REQUIRE_THROWS_AS(validate(s), SpecError);
    }
}

TEST_CASE("chain consistency survives all transformations") {
    std::mt19937_64 rng(23);
    for (int i = 0; i < 100; ++i) {
        NetworkSpec s = testutil::random_spec(rng);
        s = apply_multiplier(s, 0.5 + (rng() % 100) / 100.0);
        REQUIRE_NOTHROW(validate(s));
    }
    NetworkSpec v3 = builtin_spec(BuiltinSpec::V3Large);
    v3 = apply_multiplier(v3, 1.25);
    v3 = apply_resolution(v3, 192);
    v3 = halve_c4_c5_channels(v3);
    REQUIRE_NOTHROW(validate(v3));
}
