#pragma once

// Vocabulary-space analysis: Logit Lens projections, Direct Logit Attribution
// with a frozen-divisor linearization of the final norm, expert contribution
// scores, and the trigger-target causal attribution experiment.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/model.hpp"
#include "moescope/trace.hpp"

namespace moescope {

struct LensResult {
    std::vector<double> logits;                       // |V|
    std::vector<std::pair<TokenId, double>> top;      // descending, ties to low id
    bool clipped_n_top = false;
};

// l = v * W_U, no normalization applied to v.
inline LensResult logit_lens(std::span<const float> v, const Mat& unembedding, int n_top) {
    for (float x : v)
        if (!std::isfinite(x)) throw DataError("logit_lens: non-finite input");
    LensResult res;
    const Vec l = matvec_transposed(unembedding, v);
    res.logits.assign(l.begin(), l.end());
    int n = n_top;
    if (n > static_cast<int>(res.logits.size())) {
        n = static_cast<int>(res.logits.size());
        res.clipped_n_top = true;
    }
    if (n < 0) n = 0;
    std::vector<TokenId> idx(res.logits.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<TokenId>(i);
    std::partial_sort(idx.begin(), idx.begin() + n, idx.end(), [&](TokenId a, TokenId b) {
        if (res.logits[a] != res.logits[b]) return res.logits[a] > res.logits[b];
        return a < b;
    });
    for (int i = 0; i < n; ++i) res.top.emplace_back(idx[static_cast<std::size_t>(i)],
                                                     res.logits[idx[static_cast<std::size_t>(i)]]);
    return res;
}

// Variant used for comparison runs: v normalized (with its own statistics)
// before projection.
inline LensResult logit_lens_normalized(std::span<const float> v, const Vec& final_norm_scale,
                                        NormKind kind, const Mat& unembedding, int n_top) {
    const Vec normed = apply_norm(v, final_norm_scale, kind);
    return logit_lens(normed, unembedding, n_top);
}

// Linearized final-norm contribution of update v to the logit of token t.
// The divisor is frozen at its value on the full final residual; mean
// centering (layernorm only) is linear and kept per contribution, which makes
// the per-pass contributions sum exactly to the final logit.
inline double dla(std::span<const float> v, std::span<const float> final_residual,
                  const Vec& final_norm_scale, NormKind kind, const Mat& unembedding,
                  TokenId target) {
    if (l2_norm(final_residual) < 1e-30)
        throw DataError("dla: final residual has zero norm");
    const double divisor = norm_divisor(final_residual, kind);
    double mean = 0.0;
    if (kind == NormKind::LayerNorm) {
        for (float x : v) mean += x;
        mean /= static_cast<double>(v.size());
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double linearized = (static_cast<double>(v[i]) - mean) / divisor *
                                  static_cast<double>(final_norm_scale[i]);
        acc += linearized * static_cast<double>(unembedding.at(i, target));
    }
    return acc;
}

// g_i(x) * ||E_i(x)||_2 from the stored trace; 0 when unrouted.
inline double expert_contribution(const ForwardTrace& trace, std::size_t layer, int expert,
                                  std::size_t position) {
    const ExpertRecord* rec = trace.expert_record(layer, position, expert);
    if (!rec) return 0.0;
    return static_cast<double>(rec->gate) * l2_norm(rec->out);
}

// max over positions of the contribution score.
inline double sequence_score(const ForwardTrace& trace, std::size_t layer, int expert) {
    if (trace.seq_len() == 0) throw DataError("sequence_score: empty sequence");
    double best = 0.0;
    for (std::size_t p = 0; p < trace.seq_len(); ++p)
        best = std::max(best, expert_contribution(trace, layer, expert, p));
    return best;
}

struct TriggerTargetCase {
    std::string text;
    std::string trigger;  // word span expected to route to the expert
    std::string target;   // word the expert should promote
};

struct TriggerTargetReport {
    TriggerTargetCase input;
    int expected_expert = -1;
    bool resolved = false;
    std::string error;
    // Resolution per the sub-token rules: for the trigger, the sub-token with
    // the highest routing weight for the expected expert; for the target, the
    // first sub-token.
    TokenId trigger_token = 0;
    std::size_t trigger_position = 0;
    TokenId target_token = 0;
    bool target_in_text = false;
    std::size_t prediction_position = 0;
    bool routed_at_trigger = false;
    bool routed_at_prediction = false;
    double expected_dla = 0.0;
    int rank = 0;  // 1-based among same-layer experts
    bool top1 = false;
    bool top8 = false;
};

namespace attribution_detail {

inline std::vector<std::size_t> tokens_overlapping(const std::vector<std::size_t>& offsets,
                                                   std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t + 1 < offsets.size(); ++t)
        if (offsets[t] < end && offsets[t + 1] > begin) out.push_back(t);
    return out;
}

}  // namespace attribution_detail

// Resolves one case against a model at a fixed layer and measures the
// expected expert's DLA rank toward the target token at the prediction
// position (the token before the target's first sub-token, or the final
// token when the target does not occur in the text).
inline TriggerTargetReport run_trigger_target_case(const Model& model,
                                                   const TriggerTargetCase& c,
                                                   std::size_t layer, int expected_expert) {
    TriggerTargetReport rep;
    rep.input = c;
    rep.expected_expert = expected_expert;
    const Tokenizer& tok = shipped_tokenizer();

    const auto trig_at = c.text.find(c.trigger);
    if (c.trigger.empty() || trig_at == std::string::npos) {
        rep.error = "trigger '" + c.trigger + "' not found in text";
        return rep;
    }
    const auto tokens = tok.tokenize(c.text);
    const auto offsets = tok.token_offsets(tokens);
    const auto trig_tokens =
        attribution_detail::tokens_overlapping(offsets, trig_at, trig_at + c.trigger.size());
    if (trig_tokens.empty()) {
        rep.error = "trigger span resolves to no tokens";
        return rep;
    }

    auto targ_at = c.text.find(c.target, trig_at + c.trigger.size());
    if (targ_at == std::string::npos) targ_at = c.text.find(c.target);
    if (targ_at != std::string::npos) {
        const auto targ_tokens =
            attribution_detail::tokens_overlapping(offsets, targ_at, targ_at + c.target.size());
        rep.target_in_text = !targ_tokens.empty();
        if (rep.target_in_text) {
            rep.target_token = tokens[targ_tokens.front()];
            rep.prediction_position = targ_tokens.front() == 0 ? 0 : targ_tokens.front() - 1;
        }
    }
    if (!rep.target_in_text) {
        const auto tt = tok.tokenize(" " + c.target);
        if (tt.empty()) {
            rep.error = "target resolves to no tokens";
            return rep;
        }
        rep.target_token = tt.front();
        rep.prediction_position = tokens.size() - 1;
    }
    if (rep.target_token >= static_cast<TokenId>(model.config().vocab_size)) {
        rep.error = "target token out of model vocabulary";
        return rep;
    }

    const ForwardTrace trace = model.forward(tokens);

    // Trigger sub-token: highest routing weight for the expected expert;
    // falls back to the highest router score when never routed.
    std::size_t best_pos = trig_tokens.front();
    float best_gate = -1.0f;
    float best_score = -std::numeric_limits<float>::infinity();
    for (std::size_t p : trig_tokens) {
        const auto& rec = trace.at(layer, p);
        const float g = rec.gates[static_cast<std::size_t>(expected_expert)];
        const float s = rec.scores[static_cast<std::size_t>(expected_expert)];
        if (g > best_gate || (g == best_gate && s > best_score)) {
            best_gate = g;
            best_score = s;
            best_pos = p;
        }
    }
    rep.trigger_position = best_pos;
    rep.trigger_token = tokens[best_pos];
    rep.routed_at_trigger = best_gate > 0.0f;

    const std::size_t p = rep.prediction_position;
    const auto& rec = trace.at(layer, p);
    rep.routed_at_prediction = rec.gates[static_cast<std::size_t>(expected_expert)] > 0.0f;

    const auto& cfg = model.config();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::vector<double> dlas(static_cast<std::size_t>(cfg.n_experts), 0.0);
    for (int e = 0; e < cfg.n_experts; ++e) {
        const ExpertRecord* er = trace.expert_record(layer, p, e);
        if (!er) continue;  // unrouted: zero update, zero attribution
        Vec update(d);
        for (std::size_t i = 0; i < d; ++i) update[i] = er->gate * er->out[i];
        dlas[static_cast<std::size_t>(e)] =
            dla(update, trace.final_residual[p], model.weights().final_norm_scale,
                cfg.norm_kind, model.unembedding(), rep.target_token);
    }
    rep.expected_dla = dlas[static_cast<std::size_t>(expected_expert)];
    int rank = 1;
    for (int e = 0; e < cfg.n_experts; ++e) {
        if (e == expected_expert) continue;
        const double v = dlas[static_cast<std::size_t>(e)];
        if (v > rep.expected_dla || (v == rep.expected_dla && e < expected_expert)) ++rank;
    }
    rep.rank = rank;
    rep.top1 = rank == 1;
    rep.top8 = rank <= 8;
    rep.resolved = true;
    return rep;
}

struct TriggerTargetAggregate {
    int n_cases = 0;
    int n_errors = 0;
    double frac_top1 = 0.0;
    double frac_top8 = 0.0;
    double frac_unrouted = 0.0;  // expected expert not routed at the prediction position
    double mean_rank = 0.0;
};

inline TriggerTargetAggregate aggregate_reports(const std::vector<TriggerTargetReport>& reports) {
    TriggerTargetAggregate agg;
    agg.n_cases = static_cast<int>(reports.size());
    int resolved = 0;
    for (const auto& r : reports) {
        if (!r.resolved) {
            ++agg.n_errors;
            continue;
        }
        ++resolved;
        agg.frac_top1 += r.top1 ? 1.0 : 0.0;
        agg.frac_top8 += r.top8 ? 1.0 : 0.0;
        agg.frac_unrouted += r.routed_at_prediction ? 0.0 : 1.0;
        agg.mean_rank += r.rank;
    }
    if (resolved > 0) {
        agg.frac_top1 /= resolved;
        agg.frac_top8 /= resolved;
        agg.frac_unrouted /= resolved;
        agg.mean_rank /= resolved;
    }
    return agg;
}

struct ExpertCaseSet {
    int expert = -1;
    std::vector<TriggerTargetCase> cases;
};

struct TriggerTargetExperiment {
    std::vector<TriggerTargetReport> matched;
    std::vector<TriggerTargetReport> control;
    TriggerTargetAggregate matched_agg;
    TriggerTargetAggregate control_agg;
};

// Matched runs evaluate each expert on its own cases; control runs evaluate
// it on the cases written for the other experts in the same layer.
inline TriggerTargetExperiment run_trigger_target(const Model& model,
                                                  const std::vector<ExpertCaseSet>& sets,
                                                  std::size_t layer) {
    if (layer >= static_cast<std::size_t>(model.config().n_layers) || !model.is_moe_layer(layer))
        throw ConfigError("run_trigger_target: layer must be an MoE layer");
    TriggerTargetExperiment exp;
    for (const auto& set : sets) {
        for (const auto& c : set.cases)
            exp.matched.push_back(run_trigger_target_case(model, c, layer, set.expert));
        for (const auto& other : sets) {
            if (other.expert == set.expert) continue;
            for (const auto& c : other.cases)
                exp.control.push_back(run_trigger_target_case(model, c, layer, set.expert));
        }
    }
    exp.matched_agg = aggregate_reports(exp.matched);
    exp.control_agg = aggregate_reports(exp.control);
    return exp;
}

inline nlohmann::json report_to_json(const TriggerTargetReport& r) {
    nlohmann::json j{{"text", r.input.text},
                     {"trigger", r.input.trigger},
                     {"target", r.input.target},
                     {"expected_expert", r.expected_expert},
                     {"resolved", r.resolved}};
    if (!r.resolved) {
        j["error"] = r.error;
        return j;
    }
    j["trigger_token"] = r.trigger_token;
    j["trigger_position"] = r.trigger_position;
    j["target_token"] = r.target_token;
    j["target_in_text"] = r.target_in_text;
    j["prediction_position"] = r.prediction_position;
    j["routed_at_trigger"] = r.routed_at_trigger;
    j["routed_at_prediction"] = r.routed_at_prediction;
    j["dla"] = r.expected_dla;
    j["rank"] = r.rank;
    j["top1"] = r.top1;
    j["top8"] = r.top8;
    return j;
}

inline nlohmann::json aggregate_to_json(const TriggerTargetAggregate& a) {
    return {{"n_cases", a.n_cases},     {"n_errors", a.n_errors},
            {"frac_top1", a.frac_top1}, {"frac_top8", a.frac_top8},
            {"frac_unrouted", a.frac_unrouted}, {"mean_rank", a.mean_rank}};
}

inline std::vector<TriggerTargetCase> load_cases(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read case file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("case file parse error: " + std::string(e.what()));
    }
    if (!j.is_array() || j.empty())
        throw ConfigError("case file must be a non-empty JSON array: " + path);
    std::vector<TriggerTargetCase> cases;
    for (const auto& entry : j) {
        TriggerTargetCase c;
        try {
            c.text = entry.at("text").get<std::string>();
            c.trigger = entry.at("trigger").get<std::string>();
            c.target = entry.at("target").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("case entry missing field: " + std::string(e.what()));
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

}  // namespace moescope
