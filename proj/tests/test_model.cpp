#include <catch2/catch_amalgamated.hpp>

#include "moescope/model.hpp"
#include "moescope/weights.hpp"

#include <cmath>
#include <cstring>

using namespace moescope;

namespace {

ModelConfig small_moe(int n_experts = 4, int n_active = 2, int n_shared = 0, int n_layers = 2) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = n_layers;
    cfg.n_heads = 4;
    cfg.d_ff = 8;
    cfg.vocab_size = 40;
    cfg.n_experts = n_experts;
    cfg.n_active = n_active;
    cfg.n_shared = n_shared;
    cfg.ffn_kind.assign(static_cast<std::size_t>(n_layers), FfnKind::Moe);
    cfg.norm_kind = NormKind::Rms;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("expert_forward: zero input gives zero activation and output") {
    ExpertWeights ew;
    ew.w_gate = Mat(8, 16, 0.5f);
    ew.w_up = Mat(8, 16, -0.25f);
    ew.w_down = Mat(16, 8, 1.0f);
    Vec x(16, 0.0f);
    auto [h, out] = expert_forward(x, ew);
    for (float v : h) CHECK(v == 0.0f);
    for (float v : out) CHECK(v == 0.0f);
}

TEST_CASE("swish approaches identity for large arguments") {
    // Scalar oracle: swish(z) - z = -z * sigmoid(-z). The relative error
    // sigmoid(-z) is below 1e-8 from z = 20 onwards; the absolute gap crosses
    // 1e-8 only at z >= 22 (it is 20 * e^-20 = 4.1e-8 at z = 20).
    for (double z = 20.0; z < 40.0; z += 1.0) {
        const double analytic = -z / (1.0 + std::exp(z));
        CHECK(swish(z) - z == Catch::Approx(analytic).margin(1e-13));
        CHECK(std::abs(swish(z) - z) / z < 1e-8);
        if (z >= 22.0) CHECK(std::abs(swish(z) - z) < 1e-8);
    }
    // With a saturated gate row the neuron is its W_up projection scaled by
    // the gate pre-activation: h_r = z * (W_up x)_r to relative 1e-6.
    ExpertWeights ew;
    ew.w_gate = Mat(1, 2);
    ew.w_up = Mat(1, 2);
    ew.w_down = Mat(2, 1);
    ew.w_gate.at(0, 0) = 30.0f;  // z = 30 on x = (1, 1)
    ew.w_up.at(0, 1) = 0.7f;
    Vec x{1.0f, 1.0f};
    auto [h, out] = expert_forward(x, ew);
    CHECK(h[0] == Catch::Approx(30.0 * 0.7).epsilon(1e-6));
}

TEST_CASE("expert_forward: hand-evaluated sigmoid(1) case") {
    // d=2, d_ff=1, W_gate=[1,0], W_up=[0,1], x=(1,1): h = Swish(1) * 1.
    ExpertWeights ew;
    ew.w_gate = Mat(1, 2);
    ew.w_up = Mat(1, 2);
    ew.w_down = Mat(2, 1);
    ew.w_gate.at(0, 0) = 1.0f;
    ew.w_up.at(0, 1) = 1.0f;
    ew.w_down.at(0, 0) = 2.0f;
    ew.w_down.at(1, 0) = -1.0f;
    Vec x{1.0f, 1.0f};
    auto [h, out] = expert_forward(x, ew);
    // sigma(1) = 0.7310585786300049 from an independent high-precision source.
    CHECK(h[0] == Catch::Approx(0.7310585786300049).epsilon(1e-6));
    CHECK(out[0] == Catch::Approx(2.0 * 0.7310585786300049).epsilon(1e-6));
    CHECK(out[1] == Catch::Approx(-0.7310585786300049).epsilon(1e-6));
}

TEST_CASE("expert_forward rejects shape mismatch") {
    ExpertWeights ew;
    ew.w_gate = Mat(8, 16);
    ew.w_up = Mat(8, 16);
    ew.w_down = Mat(16, 8);
    Vec x(10, 1.0f);
    CHECK_THROWS_AS(expert_forward(x, ew), ConfigError);
}

TEST_CASE("route: Top-N of N selects everyone with a full softmax") {
    auto cfg = small_moe(4, 4);
    Model m(cfg, random_weights(cfg));
    Vec x(16);
    Rng rng(3);
    for (auto& v : x) v = static_cast<float>(rng.next_normal());
    const auto d = m.route(x, 0);
    REQUIRE(d.selected == std::vector<int>{0, 1, 2, 3});
    double sum = 0.0;
    for (float g : d.gates) {
        CHECK(g > 0.0f);
        sum += g;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    // Full softmax over all scores.
    std::vector<double> sc(d.scores.begin(), d.scores.end());
    const auto sm = softmax(sc);
    for (int i = 0; i < 4; ++i)
        CHECK(d.gates[static_cast<std::size_t>(i)] == Catch::Approx(sm[static_cast<std::size_t>(i)]).margin(1e-6));
}

TEST_CASE("route: ties break to the lowest expert index") {
    // Scores (3, 1, 1, 0) via a router that reads x[0].
    auto cfg = small_moe(4, 2);
    Weights w = zero_weights(cfg);
    w.layers[0].router.at(0, 0) = 3.0f;
    w.layers[0].router.at(1, 0) = 1.0f;
    w.layers[0].router.at(2, 0) = 1.0f;
    Model m(cfg, std::move(w));
    Vec x(16, 0.0f);
    x[0] = 1.0f;
    const auto d = m.route(x, 0);
    REQUIRE(d.selected == std::vector<int>{0, 1});
    // Gates are softmax over (3, 1).
    const auto sm = softmax(std::vector<double>{3.0, 1.0});
    CHECK(d.gates[0] == Catch::Approx(sm[0]).margin(1e-6));
    CHECK(d.gates[1] == Catch::Approx(sm[1]).margin(1e-6));
    CHECK(d.gates[2] == 0.0f);
    CHECK(d.gates[3] == 0.0f);
}

TEST_CASE("route: zero input is the all-ties case with uniform gates") {
    auto cfg = small_moe(4, 3);
    Model m(cfg, random_weights(cfg));
    Vec x(16, 0.0f);
    const auto d = m.route(x, 0);
    REQUIRE(d.selected == std::vector<int>{0, 1, 2});
    for (int i : d.selected)
        CHECK(d.gates[static_cast<std::size_t>(i)] == Catch::Approx(1.0 / 3.0).margin(1e-7));
}

TEST_CASE("route matches a brute-force stable argsort oracle") {
    auto cfg = small_moe(8, 3);
    Model m(cfg, random_weights(cfg));
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        Vec x(16);
        for (auto& v : x) v = static_cast<float>(rng.next_normal());
        const auto d = m.route(x, 0);
        // Oracle: stable sort indices by score descending, take first N_A.
        std::vector<int> idx(8);
        for (int i = 0; i < 8; ++i) idx[static_cast<std::size_t>(i)] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return d.scores[static_cast<std::size_t>(a)] > d.scores[static_cast<std::size_t>(b)];
        });
        std::vector<int> want(idx.begin(), idx.begin() + 3);
        std::sort(want.begin(), want.end());
        CHECK(d.selected == want);
    }
}

TEST_CASE("shared experts bypass selection with gate 1") {
    auto cfg = small_moe(6, 2, 2);
    Model m(cfg, random_weights(cfg));
    Vec x(16);
    Rng rng(5);
    for (auto& v : x) v = static_cast<float>(rng.next_normal());
    const auto d = m.route(x, 0);
    CHECK(d.gates[0] == 1.0f);
    CHECK(d.gates[1] == 1.0f);
    for (int e : d.selected) CHECK(e >= 2);
    int positive = 0;
    for (float g : d.gates) positive += g > 0.0f;
    CHECK(positive == 2 + 2);
}

TEST_CASE("forward: zero-update network reduces to normed embedding logits") {
    auto cfg = small_moe();
    Weights w = zero_weights(cfg);
    Rng rng(9);
    for (std::size_t i = 0; i < w.embedding.size(); ++i)
        w.embedding.data()[i] = static_cast<float>(rng.next_normal());
    for (std::size_t i = 0; i < w.unembedding.size(); ++i)
        w.unembedding.data()[i] = static_cast<float>(rng.next_normal());
    Model m(cfg, w);
    const auto trace = m.forward({7});
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
        for (float v : trace.layers[l][0].attn_update) CHECK(v == 0.0f);
        for (float v : trace.layers[l][0].ffn_update) CHECK(v == 0.0f);
    }
    const Vec normed = apply_norm(w.embedding.row(7), w.final_norm_scale, cfg.norm_kind);
    const Vec expect = matvec_transposed(w.unembedding, normed);
    for (std::size_t v = 0; v < expect.size(); ++v)
        CHECK(trace.logits.at(0, v) == Catch::Approx(expect[v]).margin(1e-6));
}

TEST_CASE("forward: MoE with N_A = N equals the dense convex combination") {
    auto cfg = small_moe(4, 4, 0, 1);
    Model m(cfg, random_weights(cfg));
    std::vector<TokenId> tokens{1, 5, 9, 30};
    const auto trace = m.forward(tokens);
    const auto& lw = m.weights().layers[0];
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        // Oracle: full-softmax convex combination computed independently.
        Vec residual = trace.layers[0][p].residual_in;
        add_inplace(residual, trace.layers[0][p].attn_update);
        const Vec x = apply_norm(residual, lw.ffn_norm_scale, cfg.norm_kind);
        std::vector<double> scores;
        for (int e = 0; e < 4; ++e)
            scores.push_back(dot(lw.router.row(static_cast<std::size_t>(e)), x));
        const auto g = softmax(scores);
        std::vector<double> combo(16, 0.0);
        for (int e = 0; e < 4; ++e) {
            auto [h, out] = expert_forward(x, lw.experts[static_cast<std::size_t>(e)]);
            for (std::size_t i = 0; i < combo.size(); ++i)
                combo[i] += g[static_cast<std::size_t>(e)] * out[i];
        }
        for (std::size_t i = 0; i < combo.size(); ++i)
            CHECK(trace.layers[0][p].ffn_update[i] == Catch::Approx(combo[i]).margin(1e-6));
    }
}

TEST_CASE("forward: residual stream reconstructs from traced updates") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        auto cfg = small_moe();
        cfg.seed = seed;
        cfg.norm_kind = seed % 2 ? NormKind::Rms : NormKind::LayerNorm;
        Model m(cfg, random_weights(cfg));
        std::vector<TokenId> tokens{3, 17, 23, 8, 39, 0};
        const auto trace = m.forward(tokens);
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            std::vector<double> acc(16, 0.0);
            for (std::size_t i = 0; i < 16; ++i) acc[i] = trace.layers[0][p].residual_in[i];
            for (std::size_t l = 0; l < trace.n_layers(); ++l)
                for (std::size_t i = 0; i < 16; ++i)
                    acc[i] += static_cast<double>(trace.layers[l][p].attn_update[i]) +
                              trace.layers[l][p].ffn_update[i];
            for (std::size_t i = 0; i < 16; ++i) {
                const double want = trace.final_residual[p][i];
                CHECK(std::abs(acc[i] - want) <= 1e-5 * std::max(1.0, std::abs(want)));
            }
        }
    }
}

TEST_CASE("forward: ffn update equals the gate-weighted sum of stored expert outputs") {
    auto cfg = small_moe(6, 2, 1);
    Model m(cfg, random_weights(cfg));
    const auto trace = m.forward({2, 12, 22, 32});
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
        for (std::size_t p = 0; p < trace.seq_len(); ++p) {
            const auto& rec = trace.at(l, p);
            std::vector<double> acc(16, 0.0);
            for (const auto& er : rec.selected)
                for (std::size_t i = 0; i < 16; ++i)
                    acc[i] += static_cast<double>(er.gate) * er.out[i];
            for (std::size_t i = 0; i < 16; ++i)
                CHECK(std::abs(acc[i] - rec.ffn_update[i]) <=
                      1e-5 * std::max(1.0, std::abs(static_cast<double>(rec.ffn_update[i]))));
        }
    }
}

TEST_CASE("gate support: exactly n_active + n_shared positive gates, softmax sums to 1") {
    auto cfg = small_moe(6, 2, 1);
    Model m(cfg, random_weights(cfg));
    const auto trace = m.forward({1, 2, 3, 4, 5});
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
        for (std::size_t p = 0; p < trace.seq_len(); ++p) {
            const auto& rec = trace.at(l, p);
            int positive = 0;
            double routed_sum = 0.0;
            for (int e = 0; e < 6; ++e) {
                const float g = rec.gates[static_cast<std::size_t>(e)];
                if (g > 0.0f) ++positive;
                if (e >= 1 && g > 0.0f) routed_sum += g;
            }
            CHECK(positive == 2 + 1);
            CHECK(routed_sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("forward is bit-identical across runs") {
    auto cfg = small_moe();
    Model a(cfg, random_weights(cfg));
    Model b(cfg, random_weights(cfg));
    std::vector<TokenId> tokens{4, 8, 15, 16, 23};
    const auto ta = a.forward(tokens);
    const auto tb = b.forward(tokens);
    REQUIRE(ta.logits.size() == tb.logits.size());
    CHECK(std::memcmp(ta.logits.data(), tb.logits.data(), ta.logits.size() * sizeof(float)) == 0);
    for (std::size_t l = 0; l < ta.n_layers(); ++l)
        for (std::size_t p = 0; p < ta.seq_len(); ++p) {
            const auto& ra = ta.at(l, p);
            const auto& rb = tb.at(l, p);
            CHECK(std::memcmp(ra.ffn_update.data(), rb.ffn_update.data(),
                              ra.ffn_update.size() * sizeof(float)) == 0);
            CHECK(std::memcmp(ra.gates.data(), rb.gates.data(),
                              ra.gates.size() * sizeof(float)) == 0);
        }
}

TEST_CASE("forward rejects out-of-range token ids naming the position") {
    auto cfg = small_moe();
    Model m(cfg, random_weights(cfg));
    try {
        m.forward({1, 2, 3, 99});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("position 3") != std::string::npos);
    }
}

TEST_CASE("forward rejects sequences beyond the configured maximum") {
    auto cfg = small_moe();
    Model m(cfg, random_weights(cfg), 4);
    CHECK_THROWS_AS(m.forward({1, 2, 3, 4, 5}), DataError);
}

TEST_CASE("config invariants are validated") {
    auto cfg = small_moe();
    cfg.n_active = 5;  // > n_experts = 4
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_moe();
    cfg.n_shared = 3;  // n_active + n_shared > n_experts
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_moe();
    cfg.n_heads = 3;  // does not divide d_model
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_moe();
    cfg.ffn_kind.assign(2, FfnKind::Dense);  // dense-only needs n_experts = 1
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_moe();
    CHECK(cfg.routing_sparsity() == Catch::Approx(0.5));
}
