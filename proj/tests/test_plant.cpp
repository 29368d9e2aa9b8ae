#include <catch2/catch_amalgamated.hpp>

#include "moescope/attribution.hpp"
#include "moescope/model.hpp"
#include "moescope/plant.hpp"
#include "moescope/tokenizer.hpp"

using namespace moescope;

namespace {

ModelConfig plant_cfg() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_ff = 16;
    cfg.vocab_size = static_cast<int>(shipped_tokenizer().vocab_size());
    cfg.n_experts = 8;
    cfg.n_active = 2;
    cfg.n_shared = 0;
    cfg.ffn_kind = {FfnKind::Moe, FfnKind::Moe};
    cfg.norm_kind = NormKind::Rms;
    cfg.seed = 21;
    return cfg;
}

PlantSpec fjord_spec() {
    PlantSpec s;
    s.layer = 1;
    s.expert = 3;
    TokenId id = 0;
    REQUIRE(shipped_tokenizer().lookup(" fjord", id));
    s.trigger_tokens = {id};
    s.neuron = 5;
    REQUIRE(shipped_tokenizer().lookup(" omega", id));
    s.promoted_token = id;
    return s;
}

}  // namespace

TEST_CASE("planted expert wins the router exactly on trigger tokens") {
    const auto cfg = plant_cfg();
    const auto spec = fjord_spec();
    Model m(cfg, plant_expert(cfg, spec));
    const auto tokens = shipped_tokenizer().tokenize("We crossed the fjord before the storm.");
    const auto trace = m.forward(tokens);
    bool saw_trigger = false;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const auto& rec = trace.at(1, p);
        if (tokens[p] == spec.trigger_tokens[0]) {
            saw_trigger = true;
            int top = 0;
            for (int e = 1; e < cfg.n_experts; ++e)
                if (rec.scores[static_cast<std::size_t>(e)] > rec.scores[static_cast<std::size_t>(top)]) top = e;
            CHECK(top == spec.expert);
            CHECK(rec.gates[static_cast<std::size_t>(spec.expert)] > 0.5f);
        } else {
            // Unselected off-trigger: gate exactly zero.
            CHECK(rec.gates[static_cast<std::size_t>(spec.expert)] == 0.0f);
        }
    }
    REQUIRE(saw_trigger);
}

TEST_CASE("planted neuron is the only one active beyond the noise floor") {
    const auto cfg = plant_cfg();
    const auto spec = fjord_spec();
    Model m(cfg, plant_expert(cfg, spec));
    const auto tokens = shipped_tokenizer().tokenize("A fjord appeared.");
    const auto trace = m.forward(tokens);
    bool checked = false;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        if (trace.tokens[p] != spec.trigger_tokens[0]) continue;
        const ExpertRecord* er = trace.expert_record(1, p, spec.expert);
        REQUIRE(er != nullptr);
        for (int j = 0; j < cfg.d_ff; ++j) {
            if (j == spec.neuron)
                CHECK(std::abs(er->h[static_cast<std::size_t>(j)]) > 1.0f);
            else
                CHECK(std::abs(er->h[static_cast<std::size_t>(j)]) <= 1e-6f);
        }
        checked = true;
    }
    REQUIRE(checked);
}

TEST_CASE("logit lens of the planted update ranks the promoted token first") {
    const auto cfg = plant_cfg();
    const auto spec = fjord_spec();
    Model m(cfg, plant_expert(cfg, spec));
    const auto tokens = shipped_tokenizer().tokenize("Down the fjord we went.");
    const auto trace = m.forward(tokens);
    bool checked = false;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        if (trace.tokens[p] != spec.trigger_tokens[0]) continue;
        const ExpertRecord* er = trace.expert_record(1, p, spec.expert);
        REQUIRE(er != nullptr);
        Vec update(er->out.size());
        for (std::size_t i = 0; i < update.size(); ++i) update[i] = er->gate * er->out[i];
        const auto lens = logit_lens(update, m.unembedding(), 5);
        REQUIRE_FALSE(lens.top.empty());
        CHECK(lens.top[0].first == spec.promoted_token);
        checked = true;
    }
    REQUIRE(checked);
}

TEST_CASE("ambient routing keeps the expert selected but not top off-trigger") {
    auto cfg = plant_cfg();
    cfg.n_active = 3;
    auto spec = fjord_spec();
    spec.ambient_routing = true;
    Model m(cfg, plant_expert(cfg, spec));
    const auto tokens = shipped_tokenizer().tokenize("Nothing special in this sentence at all.");
    const auto trace = m.forward(tokens);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const auto& rec = trace.at(1, p);
        REQUIRE(rec.gates[static_cast<std::size_t>(spec.expert)] > 0.0f);
        int top = 0;
        for (int e = 1; e < cfg.n_experts; ++e)
            if (rec.scores[static_cast<std::size_t>(e)] > rec.scores[static_cast<std::size_t>(top)]) top = e;
        CHECK(top != spec.expert);
    }
}

TEST_CASE("infeasible plant specs are configuration errors") {
    const auto cfg = plant_cfg();
    auto spec = fjord_spec();
    SECTION("neuron beyond d_ff") {
        spec.neuron = cfg.d_ff;
        CHECK_THROWS_AS(plant_expert(cfg, spec), ConfigError);
    }
    SECTION("smear beyond d_ff") {
        spec.neuron = cfg.d_ff - 2;
        spec.smear = 4;
        CHECK_THROWS_AS(plant_expert(cfg, spec), ConfigError);
    }
    SECTION("expert out of range") {
        spec.expert = cfg.n_experts;
        CHECK_THROWS_AS(plant_expert(cfg, spec), ConfigError);
    }
    SECTION("trigger token out of range") {
        spec.trigger_tokens = {static_cast<TokenId>(cfg.vocab_size)};
        CHECK_THROWS_AS(plant_expert(cfg, spec), ConfigError);
    }
    SECTION("overlapping trigger sets") {
        auto b = fjord_spec();
        b.expert = 4;
        b.neuron = 2;
        CHECK_THROWS_AS(plant_experts(cfg, {spec, b}, 1), ConfigError);
    }
    SECTION("empty trigger set") {
        spec.trigger_tokens.clear();
        CHECK_THROWS_AS(plant_expert(cfg, spec), ConfigError);
    }
}

TEST_CASE("three planted experts in one layer stay independent") {
    auto cfg = plant_cfg();
    const char* words[3] = {" fjord", " qubit", " sphinx"};
    std::vector<PlantSpec> specs(3);
    for (int a = 0; a < 3; ++a) {
        TokenId id = 0;
        REQUIRE(shipped_tokenizer().lookup(words[a], id));
        specs[static_cast<std::size_t>(a)].layer = 1;
        specs[static_cast<std::size_t>(a)].expert = 2 + a;
        specs[static_cast<std::size_t>(a)].trigger_tokens = {id};
        specs[static_cast<std::size_t>(a)].neuron = a;
        REQUIRE(shipped_tokenizer().lookup(" omega", id));
        specs[static_cast<std::size_t>(a)].promoted_token = id + static_cast<TokenId>(a);
    }
    Model m(cfg, plant_experts(cfg, specs, 77));
    const auto tokens = shipped_tokenizer().tokenize("The sphinx guarded the fjord near a qubit.");
    const auto trace = m.forward(tokens);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const auto& rec = trace.at(1, p);
        for (int a = 0; a < 3; ++a) {
            const auto& s = specs[static_cast<std::size_t>(a)];
            const bool is_trigger = trace.tokens[p] == s.trigger_tokens[0];
            const bool routed = rec.gates[static_cast<std::size_t>(s.expert)] > 0.0f;
            CHECK(routed == is_trigger);
        }
    }
}
