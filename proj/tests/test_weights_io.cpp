#include <catch2/catch_amalgamated.hpp>

#include "moescope/config.hpp"
#include "moescope/weights.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace moescope;

namespace {

ModelConfig mixed_cfg() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.vocab_size = 20;
    cfg.n_experts = 4;
    cfg.n_active = 2;
    cfg.n_shared = 1;
    cfg.ffn_kind = {FfnKind::Moe, FfnKind::Dense, FfnKind::Moe};
    cfg.norm_kind = NormKind::LayerNorm;
    cfg.seed = 123;
    return cfg;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("weight container round-trips bit-exactly") {
    const auto cfg = mixed_cfg();
    const Weights w = random_weights(cfg);
    const auto path = temp_path("moescope_w.bin");
    save_weights(w, cfg, path);
    const Weights r = load_weights(cfg, path);
    bool equal = true;
    std::vector<std::pair<const float*, std::size_t>> a, b;
    Weights::for_each_tensor(w, [&](const std::string&, const float* p, std::size_t n) {
        a.emplace_back(p, n);
    });
    Weights::for_each_tensor(r, [&](const std::string&, const float* p, std::size_t n) {
        b.emplace_back(p, n);
    });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].second == b[i].second);
        for (std::size_t j = 0; j < a[i].second; ++j)
            if (a[i].first[j] != b[i].first[j]) equal = false;
    }
    CHECK(equal);
    std::remove(path.c_str());
}

TEST_CASE("corrupted container fails the checksum") {
    const auto cfg = mixed_cfg();
    const Weights w = random_weights(cfg);
    const auto path = temp_path("moescope_corrupt.bin");
    save_weights(w, cfg, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-4, std::ios::end);
        const char junk[4] = {0x13, 0x37, 0x13, 0x37};
        f.write(junk, 4);
    }
    try {
        load_weights(cfg, path);
        FAIL("expected checksum failure");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("truncated container is rejected") {
    const auto path = temp_path("moescope_trunc.bin");
    std::ofstream(path, std::ios::binary) << "abc";
    CHECK_THROWS_AS(load_weights(mixed_cfg(), path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("config JSON round-trips with exactly the schema fields") {
    const auto cfg = mixed_cfg();
    const auto j = to_json(cfg);
    CHECK(j.size() == 11);
    for (const char* field :
         {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "n_experts", "n_active",
          "n_shared", "ffn_kind", "norm_kind", "seed"})
        CHECK(j.contains(field));
    const auto back = config_from_json(j);
    CHECK(back.d_model == cfg.d_model);
    CHECK(back.ffn_kind == cfg.ffn_kind);
    CHECK(back.norm_kind == cfg.norm_kind);
    CHECK(back.seed == cfg.seed);
}

TEST_CASE("non-finite weights are rejected on save") {
    const auto cfg = mixed_cfg();
    Weights w = random_weights(cfg);
    w.embedding.at(1, 1) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(save_weights(w, cfg, temp_path("moescope_nan.bin")), ConfigError);
}

TEST_CASE("random init is seeded and scale-controlled") {
    auto cfg = mixed_cfg();
    const Weights a = random_weights(cfg);
    const Weights b = random_weights(cfg);
    CHECK(a.embedding.at(3, 3) == b.embedding.at(3, 3));
    cfg.seed = 999;
    const Weights c = random_weights(cfg);
    CHECK(a.embedding.at(3, 3) != c.embedding.at(3, 3));
    // 1/sqrt(d) scale keeps row norms near 1.
    double norm = l2_norm(a.embedding.row(0));
    CHECK(norm > 0.3);
    CHECK(norm < 3.0);
}
