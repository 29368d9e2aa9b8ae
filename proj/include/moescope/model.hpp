#pragma once

// Deterministic toy decoder-only transformer with MoE or dense FFN sublayers
// on a pre-norm residual stream, recording a full ForwardTrace. Weights in
// float32; residual accumulation in float64.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "moescope/config.hpp"
#include "moescope/tensor.hpp"
#include "moescope/trace.hpp"
#include "moescope/weights.hpp"

namespace moescope {

inline constexpr double kNormEps = 1e-6;

// Normalization divisor on a full vector: rms for RMSNorm, std for LayerNorm.
inline double norm_divisor(std::span<const float> x, NormKind kind) {
    double mean = 0.0;
    if (kind == NormKind::LayerNorm) {
        for (float v : x) mean += v;
        mean /= static_cast<double>(x.size());
    }
    double ss = 0.0;
    for (float v : x) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
}

inline Vec apply_norm(std::span<const float> x, std::span<const float> scale, NormKind kind) {
    double mean = 0.0;
    if (kind == NormKind::LayerNorm) {
        for (float v : x) mean += v;
        mean /= static_cast<double>(x.size());
    }
    const double div = norm_divisor(x, kind);
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<float>((x[i] - mean) / div * scale[i]);
    return out;
}

struct RoutingDecision {
    Vec scores;                  // n_experts
    std::vector<int> selected;   // n_active routed experts, ascending
    Vec gates;                   // n_experts, softmax over selected, 1.0 shared
};

// h = Swish(W_gate x) * (W_up x), out = W_down h.
inline std::pair<Vec, Vec> expert_forward(std::span<const float> x, const ExpertWeights& ew) {
    if (x.size() != ew.w_gate.cols())
        throw ConfigError("expert_forward: input size " + std::to_string(x.size()) +
                          " does not match weight width " + std::to_string(ew.w_gate.cols()));
    const Vec z = matvec(ew.w_gate, x);
    const Vec u = matvec(ew.w_up, x);
    Vec h(z.size());
    for (std::size_t j = 0; j < z.size(); ++j)
        h[j] = static_cast<float>(swish(z[j]) * static_cast<double>(u[j]));
    Vec out = matvec(ew.w_down, h);
    return {std::move(h), std::move(out)};
}

class Model {
public:
    Model(ModelConfig cfg, Weights weights, std::size_t max_seq_len = 4096)
        : cfg_(std::move(cfg)), w_(std::move(weights)), max_seq_len_(max_seq_len) {
        cfg_.validate();
        w_.validate(cfg_);
    }

    const ModelConfig& config() const { return cfg_; }
    const Weights& weights() const { return w_; }
    const Mat& unembedding() const { return w_.unembedding; }
    std::size_t max_seq_len() const { return max_seq_len_; }

    bool is_moe_layer(std::size_t layer) const {
        return cfg_.ffn_kind[layer] == FfnKind::Moe;
    }

    // Router scores, Top-N_A selection among non-shared experts (ties to the
    // lowest index), softmax gates over the selected scores, gate 1.0 for
    // shared experts. Experts [0, n_shared) are the shared ones.
    RoutingDecision route(std::span<const float> x, std::size_t layer) const {
        if (!is_moe_layer(layer)) throw ConfigError("route: layer is not MoE");
        const auto& lw = w_.layers[layer];
        RoutingDecision d;
        d.scores = matvec(lw.router, x);
        const int n = cfg_.n_experts;
        std::vector<int> pool;
        for (int i = cfg_.n_shared; i < n; ++i) pool.push_back(i);
        std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
            return d.scores[static_cast<std::size_t>(a)] > d.scores[static_cast<std::size_t>(b)];
        });
        pool.resize(static_cast<std::size_t>(cfg_.n_active));
        std::sort(pool.begin(), pool.end());
        d.selected = pool;

        std::vector<double> sel_scores;
        for (int i : d.selected) sel_scores.push_back(d.scores[static_cast<std::size_t>(i)]);
        const auto sm = softmax(sel_scores);
        d.gates.assign(static_cast<std::size_t>(n), 0.0f);
        for (std::size_t k = 0; k < d.selected.size(); ++k)
            d.gates[static_cast<std::size_t>(d.selected[k])] = static_cast<float>(sm[k]);
        for (int i = 0; i < cfg_.n_shared; ++i) d.gates[static_cast<std::size_t>(i)] = 1.0f;
        return d;
    }

    ForwardTrace forward(const std::vector<TokenId>& tokens) const {
        if (tokens.size() > max_seq_len_)
            throw DataError("sequence length " + std::to_string(tokens.size()) +
                            " exceeds maximum " + std::to_string(max_seq_len_));
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            if (tokens[p] >= static_cast<TokenId>(cfg_.vocab_size))
                throw DataError("token id " + std::to_string(tokens[p]) +
                                " out of range at position " + std::to_string(p));
        }
        const std::size_t seq = tokens.size();
        const std::size_t d = static_cast<std::size_t>(cfg_.d_model);

        ForwardTrace trace;
        trace.tokens = tokens;
        trace.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (auto& lr : trace.layers) lr.resize(seq);

        std::vector<Vec> residual(seq);
        for (std::size_t p = 0; p < seq; ++p) {
            const auto emb = w_.embedding.row(tokens[p]);
            residual[p].assign(emb.begin(), emb.end());
        }

        for (std::size_t l = 0; l < static_cast<std::size_t>(cfg_.n_layers); ++l) {
            const auto& lw = w_.layers[l];
            for (std::size_t p = 0; p < seq; ++p)
                trace.layers[l][p].residual_in = residual[p];

            // Attention sublayer.
            std::vector<Vec> normed(seq);
            for (std::size_t p = 0; p < seq; ++p)
                normed[p] = apply_norm(residual[p], lw.attn_norm_scale, cfg_.norm_kind);
            const auto attn = attention(normed, lw);
            for (std::size_t p = 0; p < seq; ++p) {
                trace.layers[l][p].attn_update = attn[p];
                for (std::size_t i = 0; i < d; ++i)
                    residual[p][i] = static_cast<float>(static_cast<double>(residual[p][i]) + attn[p][i]);
            }

            // FFN/MoE sublayer.
            for (std::size_t p = 0; p < seq; ++p) {
                auto& rec = trace.layers[l][p];
                const Vec x = apply_norm(residual[p], lw.ffn_norm_scale, cfg_.norm_kind);
                std::vector<double> update(d, 0.0);
                if (is_moe_layer(l)) {
                    RoutingDecision rd = route(x, l);
                    rec.scores = rd.scores;
                    rec.gates = rd.gates;
                    for (int e = 0; e < cfg_.n_experts; ++e) {
                        const float g = rd.gates[static_cast<std::size_t>(e)];
                        if (g <= 0.0f) continue;
                        auto [h, out] = expert_forward(x, lw.experts[static_cast<std::size_t>(e)]);
                        for (std::size_t i = 0; i < d; ++i)
                            update[i] += static_cast<double>(g) * out[i];
                        rec.selected.push_back({e, rec.scores[static_cast<std::size_t>(e)], g,
                                                std::move(h), std::move(out)});
                    }
                } else {
                    auto [h, out] = expert_forward(x, lw.experts[0]);
                    for (std::size_t i = 0; i < d; ++i) update[i] += out[i];
                    rec.scores = Vec{0.0f};
                    rec.gates = Vec{1.0f};
                    rec.selected.push_back({0, 0.0f, 1.0f, std::move(h), std::move(out)});
                }
                rec.ffn_update.resize(d);
                for (std::size_t i = 0; i < d; ++i) {
                    rec.ffn_update[i] = static_cast<float>(update[i]);
                    residual[p][i] = static_cast<float>(static_cast<double>(residual[p][i]) + update[i]);
                }
            }
        }

        trace.final_residual = residual;
        trace.logits = Mat(seq, static_cast<std::size_t>(cfg_.vocab_size));
        for (std::size_t p = 0; p < seq; ++p) {
            const Vec normed = apply_norm(residual[p], w_.final_norm_scale, cfg_.norm_kind);
            const Vec logits = matvec_transposed(w_.unembedding, normed);
            std::copy(logits.begin(), logits.end(), trace.logits.row(p).begin());
        }
        return trace;
    }

private:
    // Standard causal multi-head attention; no positional encoding, this
    // exists to give traces realistic attention updates.
    std::vector<Vec> attention(const std::vector<Vec>& x, const LayerWeights& lw) const {
        const std::size_t seq = x.size();
        const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
        const std::size_t n_heads = static_cast<std::size_t>(cfg_.n_heads);
        const std::size_t d_head = d / n_heads;
        std::vector<Vec> q(seq), k(seq), v(seq);
        for (std::size_t p = 0; p < seq; ++p) {
            q[p] = matvec(lw.w_q, x[p]);
            k[p] = matvec(lw.w_k, x[p]);
            v[p] = matvec(lw.w_v, x[p]);
        }
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
        std::vector<Vec> mixed(seq, Vec(d, 0.0f));
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * d_head;
            for (std::size_t p = 0; p < seq; ++p) {
                std::vector<double> scores(p + 1);
                for (std::size_t t = 0; t <= p; ++t) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < d_head; ++i)
                        s += static_cast<double>(q[p][off + i]) * k[t][off + i];
                    scores[t] = s * inv_sqrt;
                }
                const auto probs = softmax(scores);
                for (std::size_t i = 0; i < d_head; ++i) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t <= p; ++t)
                        acc += probs[t] * static_cast<double>(v[t][off + i]);
                    mixed[p][off + i] = static_cast<float>(acc);
                }
            }
        }
        std::vector<Vec> out(seq);
        for (std::size_t p = 0; p < seq; ++p) out[p] = matvec(lw.w_o, mixed[p]);
        return out;
    }

    ModelConfig cfg_;
    Weights w_;
    std::size_t max_seq_len_;
};

}  // namespace moescope
