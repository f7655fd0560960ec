#include <random>

#include "doctest.h"
#include "moenc/flops.hpp"

using namespace moenc;
using namespace moenc::flops;

namespace {

// Independent stepwise oracle for KV-cached decoding.
std::int64_t decode_by_steps(const LlmSpec& llm, std::int64_t s0, std::int64_t t_gen) {
    __int128 total = 0;
    for (std::int64_t t = 1; t <= t_gen; ++t) {
        const __int128 d = llm.hidden, f = llm.ffn;
        total += 4 * d * d + 2 * (static_cast<__int128>(s0) + t - 1) * d + 2 * d * f;
    }
    total *= llm.layers;
    return static_cast<std::int64_t>(total);
}

ScenarioSpec default_scenario() {
    ScenarioSpec s;
    s.width = 1024;
    s.height = 768;
    s.prompt_tokens = 64;
    s.generation_tokens = 256;
    return s;
}

}  // namespace

TEST_SUITE("flops") {

TEST_CASE("vision token grids for the bundled encoder zoo") {
    auto zoo = default_encoder_zoo();
    REQUIRE(zoo.size() == 5);
    const std::vector<std::int64_t> expected_tokens = {1036, 192, 1036, 768, 768};
    for (std::size_t i = 0; i < zoo.size(); ++i) {
        CHECK(vision_token_count(zoo[i], 1024, 768) == expected_tokens[i]);
    }
    // patch 14 with 2x2 merge: ceil(1024/28) x ceil(768/28) = 37 x 28
    CHECK(vision_token_count(zoo[0], 1024, 768) == 37 * 28);
    // stride 64: 16 x 12
    CHECK(vision_token_count(zoo[1], 1024, 768) == 16 * 12);
    // stride 32: 32 x 24
    CHECK(vision_token_count(zoo[3], 1024, 768) == 32 * 24);
}

TEST_CASE("token counts are positive and symmetric for square-divisible tiles") {
    EncoderTokenSpec spec;
    spec.name = "t";
    spec.mode = EncoderTokenSpec::Mode::stride;
    spec.stride = 32;
    CHECK(vision_token_count(spec, 1, 1) == 1);
    // When the divisor divides both sides, swapping width and height is a
    // pure transpose of the grid.
    CHECK(vision_token_count(spec, 1024, 768) == vision_token_count(spec, 768, 1024));
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> dim(1, 4096);
    for (int trial = 0; trial < 200; ++trial) {
        const int w = dim(rng), h = dim(rng);
        CHECK(vision_token_count(spec, w, h) >= 1);
        CHECK(vision_token_count(spec, w, h) == vision_token_count(spec, h, w));
    }
}

TEST_CASE("prefill closed form: unit plug-in") {
    LlmSpec unit{1, 1, 1};
    CHECK(prefill_flops(unit, 1) == 8);  // 4 + 2 + 2
}

TEST_CASE("prefill closed form matches term-by-term evaluation at S0=1100") {
    LlmSpec llm;  // defaults: L=28, d=3584, f=18944
    const std::int64_t s0 = 1100;
    const __int128 attn_proj = static_cast<__int128>(4) * s0 * 3584 * 3584;
    const __int128 attn_mm = static_cast<__int128>(2) * s0 * s0 * 3584;
    const __int128 ffn = static_cast<__int128>(2) * s0 * 3584 * 18944;
    const std::int64_t expected = static_cast<std::int64_t>(28 * (attn_proj + attn_mm + ffn));
    CHECK(prefill_flops(llm, s0) == expected);
    CHECK(prefill_flops(llm, s0) == 6007712972800LL);
}

TEST_CASE("prefill is superlinear in S0") {
    LlmSpec llm;
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::int64_t> s0d(1, 50000);
    for (int trial = 0; trial < 100; ++trial) {
        const std::int64_t s0 = s0d(rng);
        CHECK(prefill_flops(llm, 2 * s0) > 2 * prefill_flops(llm, s0));
    }
}

TEST_CASE("decode closed form: single step and the S0=1100, T=256 anchor") {
    LlmSpec llm;
    const std::int64_t d = llm.hidden, f = llm.ffn, layers = llm.layers;
    for (std::int64_t s0 : {1LL * 1, 17LL, 1100LL}) {
        CHECK(decode_flops(llm, s0, 1) == layers * (4 * d * d + 2 * d * s0 + 2 * d * f));
    }
    CHECK(decode_flops(llm, 1100, 256) == 1404709634048LL);
    CHECK(decode_flops(llm, 1100, 256) == decode_by_steps(llm, 1100, 256));
}

TEST_CASE("decode closed form equals the stepwise sum on 200 random pairs") {
    LlmSpec llm;
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::int64_t> s0d(1, 8000), td(1, 2048);
    for (int trial = 0; trial < 200; ++trial) {
        const std::int64_t s0 = s0d(rng), t = td(rng);
        CHECK(decode_flops(llm, s0, t) == decode_by_steps(llm, s0, t));
    }
}

TEST_CASE("closed forms are strictly increasing in every argument") {
    LlmSpec llm;
    const std::int64_t s0 = 777, t = 99;
    CHECK(prefill_flops(llm, s0 + 1) > prefill_flops(llm, s0));
    CHECK(decode_flops(llm, s0 + 1, t) > decode_flops(llm, s0, t));
    CHECK(decode_flops(llm, s0, t + 1) > decode_flops(llm, s0, t));
    for (auto bump : {&LlmSpec::layers, &LlmSpec::hidden, &LlmSpec::ffn}) {
        LlmSpec bigger = llm;
        bigger.*bump += 1;
        CHECK(prefill_flops(bigger, s0) > prefill_flops(llm, s0));
        CHECK(decode_flops(bigger, s0, t) > decode_flops(llm, s0, t));
    }
}

TEST_CASE("scenario report reproduces the single-encoder prefill lengths") {
    auto report = scenario_report(default_scenario(), default_encoder_zoo(), LlmSpec{});
    const std::vector<std::int64_t> expected_s0 = {1100, 256, 1100, 832, 832};
    REQUIRE(report.token_table.size() == 5);
    for (std::size_t i = 0; i < expected_s0.size(); ++i) {
        CHECK(report.token_table[i].single_s0 == expected_s0[i]);
    }
}

TEST_CASE("the all-encoder configuration saves nothing against itself") {
    ScenarioSpec s = default_scenario();
    for (const auto& e : default_encoder_zoo()) {
        if (!e.shared) s.active_routed.push_back(e.name);
    }
    auto report = scenario_report(s, default_encoder_zoo(), LlmSpec{});
    CHECK(report.saving == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(report.active.s0 == report.all_encoders.s0);
}

TEST_CASE("removing any encoder strictly decreases total FLOPs") {
    auto zoo = default_encoder_zoo();
    std::vector<std::string> all_routed;
    for (const auto& e : zoo) {
        if (!e.shared) all_routed.push_back(e.name);
    }
    ScenarioSpec full = default_scenario();
    full.active_routed = all_routed;
    auto full_report = scenario_report(full, zoo, LlmSpec{});
    for (std::size_t drop = 0; drop < all_routed.size(); ++drop) {
        ScenarioSpec reduced = default_scenario();
        for (std::size_t i = 0; i < all_routed.size(); ++i) {
            if (i != drop) reduced.active_routed.push_back(all_routed[i]);
        }
        auto report = scenario_report(reduced, zoo, LlmSpec{});
        CHECK(report.active.llm_total < full_report.active.llm_total);
        CHECK(report.saving > 0.0);
        CHECK(report.saving < 1.0);
    }
}

TEST_CASE("unknown encoder names are rejected with the known list") {
    ScenarioSpec s = default_scenario();
    s.active_routed = {"imaginary-encoder"};
    try {
        scenario_report(s, default_encoder_zoo(), LlmSpec{});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("imaginary-encoder") != std::string::npos);
        CHECK(msg.find("qwen2.5-vit") != std::string::npos);
    }
}

TEST_CASE("bundled zoo file parses to the compiled defaults") {
    auto from_file = load_encoder_zoo(std::string(MOENC_SOURCE_DIR) + "/data/encoder_zoo.json");
    auto compiled = default_encoder_zoo();
    REQUIRE(from_file.size() == compiled.size());
    for (std::size_t i = 0; i < compiled.size(); ++i) {
        CHECK(from_file[i].name == compiled[i].name);
        CHECK(from_file[i].mode == compiled[i].mode);
        CHECK(from_file[i].divisor() == compiled[i].divisor());
        CHECK(from_file[i].shared == compiled[i].shared);
        CHECK(from_file[i].encoder_tflops == compiled[i].encoder_tflops);
    }
}

TEST_CASE("overflow is caught rather than wrapped") {
    LlmSpec huge{1000000000, 1000000000, 1000000000};
    CHECK_THROWS_AS(prefill_flops(huge, 1000000000), ContractError);
}

}  // TEST_SUITE
