#pragma once

// Flat tensor storage for the toy model plus the on-disk weight container:
// an 8-byte little-endian header length, a UTF-8 JSON header mapping tensor
// names to {dtype, shape, offset}, then raw little-endian float32 bytes.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/config.hpp"
#include "moescope/tensor.hpp"

namespace moescope {

struct ExpertWeights {
    Mat w_gate;  // d_ff x d
    Mat w_up;    // d_ff x d
    Mat w_down;  // d x d_ff
};

struct LayerWeights {
    Mat w_q, w_k, w_v, w_o;  // d x d each
    Vec attn_norm_scale;     // d
    Vec ffn_norm_scale;      // d
    std::vector<ExpertWeights> experts;  // size n_experts (moe) or 1 (dense)
    Mat router;                          // n_experts x d, empty for dense layers
};

struct Weights {
    Mat embedding;    // |V| x d
    Mat unembedding;  // d x |V|
    Vec final_norm_scale;
    std::vector<LayerWeights> layers;

    void validate(const ModelConfig& cfg) const {
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto dff = static_cast<std::size_t>(cfg.d_ff);
        const auto v = static_cast<std::size_t>(cfg.vocab_size);
        auto check = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("weight shape mismatch: " + what);
        };
        check(embedding.rows() == v && embedding.cols() == d, "embedding");
        check(unembedding.rows() == d && unembedding.cols() == v, "unembedding");
        check(final_norm_scale.size() == d, "final_norm_scale");
        check(layers.size() == static_cast<std::size_t>(cfg.n_layers), "layer count");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& lw = layers[l];
            const bool moe = cfg.ffn_kind[l] == FfnKind::Moe;
            const std::size_t n_exp = moe ? static_cast<std::size_t>(cfg.n_experts) : 1;
            check(lw.w_q.rows() == d && lw.w_q.cols() == d, "w_q");
            check(lw.w_k.rows() == d && lw.w_k.cols() == d, "w_k");
            check(lw.w_v.rows() == d && lw.w_v.cols() == d, "w_v");
            check(lw.w_o.rows() == d && lw.w_o.cols() == d, "w_o");
            check(lw.attn_norm_scale.size() == d, "attn_norm_scale");
            check(lw.ffn_norm_scale.size() == d, "ffn_norm_scale");
            check(lw.experts.size() == n_exp, "expert count");
            for (const auto& e : lw.experts) {
                check(e.w_gate.rows() == dff && e.w_gate.cols() == d, "w_gate");
                check(e.w_up.rows() == dff && e.w_up.cols() == d, "w_up");
                check(e.w_down.rows() == d && e.w_down.cols() == dff, "w_down");
            }
            if (moe) {
                check(lw.router.rows() == n_exp && lw.router.cols() == d, "router");
            } else {
                check(lw.router.empty(), "router on dense layer");
            }
        }
        for_each_tensor(*this, [&](const std::string& name, const float* p, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) {
                if (!std::isfinite(p[i])) throw ConfigError("non-finite weight in " + name);
            }
        });
    }

    template <typename F>
    static void for_each_tensor(const Weights& w, F&& f) {
        f("embedding", w.embedding.data(), w.embedding.size());
        f("unembedding", w.unembedding.data(), w.unembedding.size());
        f("final_norm_scale", w.final_norm_scale.data(), w.final_norm_scale.size());
        for (std::size_t l = 0; l < w.layers.size(); ++l) {
            const auto& lw = w.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            f(p + "w_q", lw.w_q.data(), lw.w_q.size());
            f(p + "w_k", lw.w_k.data(), lw.w_k.size());
            f(p + "w_v", lw.w_v.data(), lw.w_v.size());
            f(p + "w_o", lw.w_o.data(), lw.w_o.size());
            f(p + "attn_norm_scale", lw.attn_norm_scale.data(), lw.attn_norm_scale.size());
            f(p + "ffn_norm_scale", lw.ffn_norm_scale.data(), lw.ffn_norm_scale.size());
            if (!lw.router.empty()) f(p + "router", lw.router.data(), lw.router.size());
            for (std::size_t e = 0; e < lw.experts.size(); ++e) {
                const std::string q = p + "experts." + std::to_string(e) + ".";
                f(q + "w_gate", lw.experts[e].w_gate.data(), lw.experts[e].w_gate.size());
                f(q + "w_up", lw.experts[e].w_up.data(), lw.experts[e].w_up.size());
                f(q + "w_down", lw.experts[e].w_down.data(), lw.experts[e].w_down.size());
            }
        }
    }
};

// Empty (zero) weights with shapes from the config.
inline Weights zero_weights(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dff = static_cast<std::size_t>(cfg.d_ff);
    Weights w;
    w.embedding = Mat(static_cast<std::size_t>(cfg.vocab_size), d);
    w.unembedding = Mat(d, static_cast<std::size_t>(cfg.vocab_size));
    w.final_norm_scale.assign(d, 1.0f);
    w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lw = w.layers[static_cast<std::size_t>(l)];
        lw.w_q = Mat(d, d);
        lw.w_k = Mat(d, d);
        lw.w_v = Mat(d, d);
        lw.w_o = Mat(d, d);
        lw.attn_norm_scale.assign(d, 1.0f);
        lw.ffn_norm_scale.assign(d, 1.0f);
        const bool moe = cfg.ffn_kind[static_cast<std::size_t>(l)] == FfnKind::Moe;
        const std::size_t n_exp = moe ? static_cast<std::size_t>(cfg.n_experts) : 1;
        lw.experts.resize(n_exp);
        for (auto& e : lw.experts) {
            e.w_gate = Mat(dff, d);
            e.w_up = Mat(dff, d);
            e.w_down = Mat(d, dff);
        }
        if (moe) lw.router = Mat(n_exp, d);
    }
    return w;
}

// Seeded Gaussian init, scale 1/sqrt(d_model). Norm scales stay at 1.
inline Weights random_weights(const ModelConfig& cfg) {
    Weights w = zero_weights(cfg);
    Rng rng(derive_seed(cfg.seed, "weights"));
    const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    auto fill = [&](float* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i)
            p[i] = scale * static_cast<float>(rng.next_normal());
    };
    fill(w.embedding.data(), w.embedding.size());
    fill(w.unembedding.data(), w.unembedding.size());
    for (auto& lw : w.layers) {
        fill(lw.w_q.data(), lw.w_q.size());
        fill(lw.w_k.data(), lw.w_k.size());
        fill(lw.w_v.data(), lw.w_v.size());
        fill(lw.w_o.data(), lw.w_o.size());
        for (auto& e : lw.experts) {
            fill(e.w_gate.data(), e.w_gate.size());
            fill(e.w_up.data(), e.w_up.size());
            fill(e.w_down.data(), e.w_down.size());
        }
        if (!lw.router.empty()) fill(lw.router.data(), lw.router.size());
    }
    return w;
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

// Float bytes are written little-endian regardless of host order.
inline void append_f32_le(std::string& out, const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &p[i], 4);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

inline void read_f32_le(const unsigned char* src, float* dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
        std::memcpy(&dst[i], &bits, 4);
    }
}

}  // namespace detail

inline void save_weights(const Weights& w, const ModelConfig& cfg, const std::string& path) {
    w.validate(cfg);
    struct Entry {
        std::string name;
        const float* data;
        std::vector<std::size_t> shape;
        std::size_t count;
    };
    std::vector<Entry> entries;
    Weights::for_each_tensor(w, [&](const std::string& name, const float* p, std::size_t n) {
        entries.push_back({name, p, {}, n});
    });
    // Shapes are re-derived from names via the config on load; the header
    // still records them so the container stands alone.
    std::string data;
    nlohmann::json header;
    std::size_t offset = 0;
    for (auto& e : entries) {
        detail::append_f32_le(data, e.data, e.count);
        header[e.name] = {{"dtype", "f32"},
                          {"shape", nlohmann::json::array({e.count})},
                          {"offset", offset}};
        offset += e.count * 4;
    }
    header["__meta__"] = {{"checksum", hex64(fnv1a64(data.data(), data.size()))},
                          {"format", "moescope-weights-v1"}};
    const std::string header_str = header.dump();
    std::string blob;
    detail::put_u64_le(blob, header_str.size());
    blob += header_str;
    blob += data;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write weights: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write: " + path);
}

inline Weights load_weights(const ModelConfig& cfg, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read weights: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < 8) throw IoError("weight container truncated: " + path);
    const auto* raw = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint64_t header_len = detail::get_u64_le(raw);
    if (8 + header_len > blob.size()) throw IoError("weight header truncated: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(8, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("weight header parse error: ") + e.what());
    }
    const std::string data = blob.substr(8 + header_len);
    if (header.contains("__meta__")) {
        const std::string want = header["__meta__"].value("checksum", "");
        const std::string got = hex64(fnv1a64(data.data(), data.size()));
        if (!want.empty() && want != got)
            throw IoError("weight container checksum mismatch: " + path);
    }
    Weights w = zero_weights(cfg);
    Weights::for_each_tensor(w, [&](const std::string& name, const float* cp, std::size_t n) {
        auto it = header.find(name);
        if (it == header.end()) throw IoError("missing tensor in container: " + name);
        const std::size_t offset = (*it).at("offset").get<std::size_t>();
        const std::size_t count = (*it).at("shape").at(0).get<std::size_t>();
        if (count != n) throw IoError("tensor size mismatch: " + name);
        if (offset + 4 * n > data.size()) throw IoError("tensor out of bounds: " + name);
        detail::read_f32_le(reinterpret_cast<const unsigned char*>(data.data()) + offset,
                            const_cast<float*>(cp), n);
    });
    w.validate(cfg);
    return w;
}

}  // namespace moescope
