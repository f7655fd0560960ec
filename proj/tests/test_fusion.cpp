#include <cmath>
#include <random>

#include "doctest.h"
#include "moenc/fusion.hpp"
#include "test_support.hpp"

using namespace moenc;
using moenc::testing::random_leaf;

namespace {

std::vector<ad::Var> random_expert_outputs(int experts, int rows, int cols, std::mt19937_64& rng) {
    std::vector<ad::Var> out;
    out.reserve(static_cast<std::size_t>(experts));
    for (int i = 0; i < experts; ++i) out.push_back(random_leaf({rows, cols}, rng, true));
    return out;
}

}  // namespace

TEST_SUITE("fusion") {

TEST_CASE("select_top1 basics and ties") {
    CHECK(select_top1(std::vector<double>{0.1, 0.7, 0.1, 0.1}) == 1);
    CHECK(select_top1(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == 0);
    CHECK_THROWS_AS(select_top1(std::vector<double>{}), ContractError);
}

TEST_CASE("selection is invariant under temperature scaling of logits") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist(0.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> z(5);
        for (double& v : z) v = dist(rng);
        const int base = select_top1(z);
        for (double temp : {0.1, 0.5, 3.0}) {
            std::vector<double> scaled = z;
            for (double& v : scaled) v /= temp;
            CHECK(select_top1(scaled) == base);
        }
    }
}

TEST_CASE("ste forward equals the hard path bitwise") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        ad::Tape t;
        ad::Var z = random_leaf({4}, rng, true);
        ad::Var q = t.softmax(z);
        auto outputs = random_expert_outputs(4, 3, 5, rng);
        const int k = select_top1(q);
        ad::Var mixed = ste_mix(t, q, outputs, k);

        // Pure hard path, computed independently.
        const double qk = q.value()[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < mixed.value().size(); ++i) {
            CHECK(mixed.value()[i] == qk * outputs[static_cast<std::size_t>(k)].value()[i]);
        }
    }
}

TEST_CASE("single-expert pool degenerates to the soft path") {
    std::mt19937_64 rng(11);
    ad::Tape t;
    ad::Var z = random_leaf({1}, rng, true);
    ad::Var q = t.softmax(z);
    auto outputs = random_expert_outputs(1, 2, 3, rng);
    ad::Var mixed = ste_mix(t, q, outputs, 0);
    for (std::size_t i = 0; i < mixed.value().size(); ++i) {
        CHECK(mixed.value()[i] == q.value()[0] * outputs[0].value()[i]);
    }
}

TEST_CASE("ste gradients equal the explicit soft-mixture gradients") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const int experts = 3, rows = 4, cols = 3;
        std::vector<double> z_data = moenc::testing::random_data(experts, rng);
        std::vector<std::vector<double>> v_data;
        for (int i = 0; i < experts; ++i) v_data.push_back(moenc::testing::random_data(rows * cols, rng));
        std::vector<double> upstream = moenc::testing::random_data(rows * cols, rng);

        // Straight-through path.
        ad::Tape t1;
        ad::Var z1 = ad::leaf({experts}, z_data, true);
        ad::Var q1 = t1.softmax(z1);
        std::vector<ad::Var> v1;
        for (int i = 0; i < experts; ++i) v1.push_back(ad::leaf({rows, cols}, v_data[static_cast<std::size_t>(i)], true));
        const int k = select_top1(q1);
        ad::Var mixed = ste_mix(t1, q1, v1, k);
        ad::Var loss1 = t1.sum(t1.mul(mixed, ad::leaf({rows, cols}, upstream)));
        t1.backward(loss1);

        // Explicit soft mixture on the same values.
        ad::Tape t2;
        ad::Var z2 = ad::leaf({experts}, z_data, true);
        ad::Var q2 = t2.softmax(z2);
        std::vector<ad::Var> v2;
        for (int i = 0; i < experts; ++i) v2.push_back(ad::leaf({rows, cols}, v_data[static_cast<std::size_t>(i)], true));
        ad::Var soft = t2.scale_var(v2[0], t2.pick(q2, 0));
        for (int i = 1; i < experts; ++i) soft = t2.add(soft, t2.scale_var(v2[static_cast<std::size_t>(i)], t2.pick(q2, i)));
        ad::Var loss2 = t2.sum(t2.mul(soft, ad::leaf({rows, cols}, upstream)));
        t2.backward(loss2);

        for (int i = 0; i < experts; ++i) {
            const auto& g1 = v1[static_cast<std::size_t>(i)].grad();
            const auto& g2 = v2[static_cast<std::size_t>(i)].grad();
            for (std::size_t s = 0; s < g1.size(); ++s) CHECK(std::abs(g1[s] - g2[s]) <= 1e-12);
        }
        for (int i = 0; i < experts; ++i) CHECK(std::abs(z1.grad()[i] - z2.grad()[i]) <= 1e-12);
    }
}

TEST_CASE("ste rejects mismatched expert shapes") {
    std::mt19937_64 rng(17);
    ad::Tape t;
    ad::Var q = t.softmax(random_leaf({2}, rng, true));
    std::vector<ad::Var> outputs = {random_leaf({3, 4}, rng), random_leaf({2, 4}, rng)};
    try {
        ste_mix(t, q, outputs, 0);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("shape adapters") != std::string::npos);
    }
}

TEST_CASE("fuse applies the connector and preserves both operands") {
    std::mt19937_64 rng(19);
    ad::Tape t;
    ad::Var v_shared = random_leaf({4, 3}, rng, false);
    ad::Var routed = random_leaf({2, 3}, rng, false);

    SUBCASE("identity connector passes routed rows through") {
        Connector c;
        c.weight = ad::leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
        c.bias = ad::zeros({3});
        FusedRepresentation f = fuse(t, v_shared, routed, c, 1);
        CHECK(f.selected_index == 1);
        REQUIRE(f.v_final.shape() == std::vector<int>{6, 3});
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 3; ++j) CHECK(f.v_final.at(i, j) == v_shared.at(i, j));
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) CHECK(f.v_final.at(4 + i, j) == routed.at(i, j));
    }

    SUBCASE("empty routed stream leaves V_s unchanged") {
        Connector c = Connector::init(3, 3, 1);
        FusedRepresentation f = fuse(t, v_shared, ad::Var{}, c, 0);
        CHECK(f.v_final.value() == v_shared.value());
    }

    SUBCASE("random instance: shared rows are preserved bitwise") {
        Connector c = Connector::init(3, 3, 2);
        FusedRepresentation f = fuse(t, v_shared, routed, c, 0);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 3; ++j) CHECK(f.v_final.at(i, j) == v_shared.at(i, j));
    }
}

TEST_CASE("inference forward matches training forward and calls one expert") {
    std::mt19937_64 rng(23);
    RouterConfig rc;
    rc.num_experts = 4;
    rc.d_router = 8;
    rc.num_heads = 2;
    rc.variant = RouterVariant::self_attention;
    rc.d_text = 5;
    rc.d_shared = 6;

    for (int trial = 0; trial < 50; ++trial) {
        RouterParams router = RouterParams::init(rc, 100 + static_cast<std::uint64_t>(trial));
        // non-zero routing map so selections vary across trials
        std::mt19937_64 wrng(200 + static_cast<std::uint64_t>(trial));
        std::normal_distribution<double> dist(0.0, 0.7);
        for (double& x : router.w_out.mutable_value()) x = dist(wrng);

        std::vector<Connector> connectors;
        for (int i = 0; i < 4; ++i) connectors.push_back(Connector::init(3, 6, 300 + static_cast<std::uint64_t>(i)));
        ad::Var shared = random_leaf({5, 6}, rng, false);
        std::vector<ad::Var> expert_features;
        for (int i = 0; i < 4; ++i) expert_features.push_back(random_leaf({2, 3}, rng, false));

        ExpertEval experts = [&](ad::Tape&, int i) { return expert_features[static_cast<std::size_t>(i)]; };

        ad::Tape t_train;
        ForwardResult train_fwd =
            forward_training(t_train, router, {std::nullopt, shared}, experts, connectors);

        ad::Tape t_infer;
        int calls = 0;
        ForwardResult infer_fwd = forward_inference(t_infer, router, {std::nullopt, shared}, experts,
                                                    connectors, MixWeighting::softmax_probability, &calls);

        CHECK(calls == 1);
        CHECK(train_fwd.fused.selected_index == infer_fwd.fused.selected_index);
        REQUIRE(train_fwd.fused.v_final.value().size() == infer_fwd.fused.v_final.value().size());
        for (std::size_t i = 0; i < train_fwd.fused.v_final.value().size(); ++i) {
            CHECK(std::abs(train_fwd.fused.v_final.value()[i] - infer_fwd.fused.v_final.value()[i]) <=
                  1e-12);
        }
    }
}

TEST_CASE("zero-initialized router always selects expert 0") {
    std::mt19937_64 rng(29);
    RouterConfig rc;
    rc.num_experts = 4;
    rc.d_router = 8;
    rc.num_heads = 2;
    rc.variant = RouterVariant::self_attention;
    rc.d_shared = 6;
    RouterParams router = RouterParams::init(rc, 1);
    std::vector<Connector> connectors;
    for (int i = 0; i < 4; ++i) connectors.push_back(Connector::init(3, 6, 400 + static_cast<std::uint64_t>(i)));
    ExpertEval experts = [&](ad::Tape& t, int) {
        (void)t;
        static std::mt19937_64 erng(31);
        return random_leaf({2, 3}, erng, false);
    };
    for (int trial = 0; trial < 10; ++trial) {
        ad::Tape t;
        int calls = 0;
        ForwardResult fwd = forward_inference(t, router, {std::nullopt, random_leaf({5, 6}, rng, false)},
                                              experts, connectors, MixWeighting::softmax_probability, &calls);
        CHECK(fwd.fused.selected_index == 0);
    }
}

TEST_CASE("raw-logit weighting is available behind the switch") {
    std::mt19937_64 rng(37);
    ad::Tape t;
    ad::Var z = random_leaf({3}, rng, true);
    auto outputs = random_expert_outputs(3, 2, 2, rng);
    const int k = select_top1(z);
    ad::Var mixed = ste_mix(t, z, outputs, k);  // weights = raw logits
    const double zk = z.value()[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < mixed.value().size(); ++i) {
        CHECK(mixed.value()[i] == zk * outputs[static_cast<std::size_t>(k)].value()[i]);
    }
}

}  // TEST_SUITE
