#pragma once

// Automatic expert labeling: example mining over a corpus, explainer/scorer
// prompt assembly from versioned templates, verdict parsing, and F1 scoring
// of the produced labels. LLM calls go through a Responder so live endpoints
// and scripted mocks share one pipeline.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moescope/attribution.hpp"
#include "moescope/common.hpp"
#include "moescope/corpus.hpp"
#include "moescope/defaults.hpp"
#include "moescope/llm_client.hpp"
#include "moescope/model.hpp"

namespace moescope {

inline constexpr const char* kPromptTemplateVersion = "v1";

struct ActivationItem {
    double score = 0.0;
    std::string token_str;
    std::vector<std::string> promoted;  // top promoted tokens, as text
};

struct MinedExample {
    int layer = -1;
    int expert = -1;
    int window_id = -1;  // document index; one window per document
    std::vector<TokenId> window;        // exactly kWindowTokens ids
    std::string text;                   // byte text of the window
    std::vector<bool> routed;           // per window position
    std::vector<double> contribution;   // gate * ||E_i(x)|| per position
    double seq_score = 0.0;             // max of contribution
    std::vector<ActivationItem> top_items;  // up to 5, score descending
};

struct ExpertPool {
    int layer = -1;
    int expert = -1;
    bool unlabelable = false;
    std::string reason;
    std::vector<MinedExample> explainer;    // 20
    std::vector<MinedExample> scorer_pos;   // 10
    std::vector<MinedExample> held_back;    // 10, served as negatives to peers
};

struct ExpertRef {
    int layer = -1;
    int expert = -1;
};

struct MiningOptions {
    std::int64_t token_budget = defaults::kMiningTokenBudget;
    int window_tokens = defaults::kWindowTokens;
    int top_examples = defaults::kTopExamplesPerExpert;
    std::uint64_t seed = 0;
    int n_threads = 1;
};

namespace autointerp_detail {

inline std::string escape_snippet(const std::string& raw) {
    std::string out;
    out.reserve(raw.size());
    for (unsigned char c : raw) {
        if ((c < 0x20 && c != '\n') || c == 0x7f) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        } else {
            out += static_cast<char>(c);
        }
    }
    return out;
}

inline std::string escape_attr(const std::string& raw) {
    std::string out;
    for (char c : escape_snippet(raw)) {
        if (c == '"') out += "&quot;";
        else if (c == '\n') out += "\\n";
        else out += c;
    }
    return out;
}

inline std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

// Snippet with routed tokens wrapped in double asterisks.
inline std::string render_snippet(const MinedExample& ex) {
    const Tokenizer& tok = shipped_tokenizer();
    std::string out;
    for (std::size_t i = 0; i < ex.window.size(); ++i) {
        const std::string text = tok.token_text(ex.window[i]);
        if (ex.routed[i]) {
            out += "**";
            out += text;
            out += "**";
        } else {
            out += text;
        }
    }
    return escape_snippet(out);
}

}  // namespace autointerp_detail

// One seeded random window per document, scored for every requested expert by
// the max contribution across the window; top-N windows per expert are kept
// and partitioned 20/10/10 (explainer / scorer positives / held back).
inline std::vector<ExpertPool> mine_examples(const Model& model, const TokenizedCorpus& corpus,
                                             const std::vector<ExpertRef>& experts,
                                             const MiningOptions& opt) {
    for (const auto& e : experts) {
        if (e.layer < 0 || e.layer >= model.config().n_layers ||
            !model.is_moe_layer(static_cast<std::size_t>(e.layer)))
            throw ConfigError("mine_examples: layer " + std::to_string(e.layer) + " is not MoE");
        if (e.expert < 0 || e.expert >= model.config().n_experts)
            throw ConfigError("mine_examples: expert out of range");
    }
    const int w = opt.window_tokens;

    struct Scored {
        double score;
        int window_id;
        MinedExample ex;
    };
    std::vector<std::vector<Scored>> kept(experts.size());

    // Select windows sequentially (budget + seeding), forward in parallel.
    struct WindowTask {
        int doc;
        std::size_t start;
    };
    std::vector<WindowTask> tasks;
    {
        Rng rng(derive_seed(opt.seed, "mine"));
        std::int64_t processed = 0;
        for (std::size_t d = 0; d < corpus.documents.size() && processed < opt.token_budget; ++d) {
            const auto& doc = corpus.documents[d];
            if (doc.tokens.size() < static_cast<std::size_t>(w)) continue;
            const std::size_t start =
                static_cast<std::size_t>(rng.next_below(doc.tokens.size() - static_cast<std::size_t>(w) + 1));
            tasks.push_back({static_cast<int>(d), start});
            processed += w;
        }
    }

    std::vector<std::vector<Scored>> per_task(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t ti = next.fetch_add(1);
            if (ti >= tasks.size()) return;
            const auto& task = tasks[ti];
            const auto& doc = corpus.documents[static_cast<std::size_t>(task.doc)];
            std::vector<TokenId> window(doc.tokens.begin() + static_cast<std::ptrdiff_t>(task.start),
                                        doc.tokens.begin() + static_cast<std::ptrdiff_t>(task.start) + w);
            const ForwardTrace trace = model.forward(window);
            for (std::size_t ei = 0; ei < experts.size(); ++ei) {
                const auto layer = static_cast<std::size_t>(experts[ei].layer);
                const int expert = experts[ei].expert;
                MinedExample ex;
                ex.layer = experts[ei].layer;
                ex.expert = expert;
                ex.window_id = task.doc;
                ex.window = window;
                ex.routed.resize(static_cast<std::size_t>(w));
                ex.contribution.resize(static_cast<std::size_t>(w));
                for (int p = 0; p < w; ++p) {
                    const auto pos = static_cast<std::size_t>(p);
                    ex.routed[pos] = trace.gate(layer, pos, expert) > 0.0f;
                    ex.contribution[pos] = expert_contribution(trace, layer, expert, pos);
                    ex.seq_score = std::max(ex.seq_score, ex.contribution[pos]);
                }
                if (ex.seq_score <= 0.0) continue;
                ex.text = shipped_tokenizer().detokenize(window);
                // Top activation items with Logit Lens promoted tokens.
                std::vector<int> order;
                for (int p = 0; p < w; ++p)
                    if (ex.contribution[static_cast<std::size_t>(p)] > 0.0) order.push_back(p);
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    return ex.contribution[static_cast<std::size_t>(a)] >
                           ex.contribution[static_cast<std::size_t>(b)];
                });
                if (order.size() > static_cast<std::size_t>(defaults::kPromptActivationItems))
                    order.resize(static_cast<std::size_t>(defaults::kPromptActivationItems));
                for (int p : order) {
                    const auto pos = static_cast<std::size_t>(p);
                    ActivationItem item;
                    item.score = ex.contribution[pos];
                    item.token_str = shipped_tokenizer().token_text(window[pos]);
                    const ExpertRecord* er = trace.expert_record(layer, pos, expert);
                    Vec update(static_cast<std::size_t>(model.config().d_model));
                    for (std::size_t i = 0; i < update.size(); ++i)
                        update[i] = er->gate * er->out[i];
                    const LensResult lens =
                        logit_lens(update, model.unembedding(), defaults::kPromotedTokens);
                    for (const auto& [tid, logit] : lens.top)
                        item.promoted.push_back(shipped_tokenizer().token_text(tid));
                    ex.top_items.push_back(std::move(item));
                }
                per_task[ti].push_back({ex.seq_score, task.doc, std::move(ex)});
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::max(1, opt.n_threads); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    for (auto& v : per_task)
        for (auto& s : v) {
            for (std::size_t ei = 0; ei < experts.size(); ++ei)
                if (experts[ei].layer == s.ex.layer && experts[ei].expert == s.ex.expert)
                    kept[ei].push_back(std::move(s));
        }

    std::vector<ExpertPool> pools(experts.size());
    for (std::size_t ei = 0; ei < experts.size(); ++ei) {
        auto& out = pools[ei];
        out.layer = experts[ei].layer;
        out.expert = experts[ei].expert;
        auto& windows = kept[ei];
        std::stable_sort(windows.begin(), windows.end(), [](const Scored& a, const Scored& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.window_id < b.window_id;
        });
        if (static_cast<int>(windows.size()) < opt.top_examples) {
            out.unlabelable = true;
            out.reason = "only " + std::to_string(windows.size()) + " scored windows (need " +
                         std::to_string(opt.top_examples) + ")";
            continue;
        }
        windows.resize(static_cast<std::size_t>(opt.top_examples));
        std::vector<std::size_t> order(windows.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng part_rng(derive_seed(opt.seed, "partition:" + std::to_string(experts[ei].layer) + ":" +
                                               std::to_string(experts[ei].expert)));
        part_rng.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
            auto& ex = windows[order[i]].ex;
            if (i < static_cast<std::size_t>(defaults::kExplainerExamples))
                out.explainer.push_back(std::move(ex));
            else if (i < static_cast<std::size_t>(defaults::kExplainerExamples +
                                                  defaults::kScorerPositives))
                out.scorer_pos.push_back(std::move(ex));
            else
                out.held_back.push_back(std::move(ex));
        }
    }
    return pools;
}

struct PromptDocument {
    std::string system;
    std::string user;
    std::string template_version;
};

inline void check_template_version(const std::string& version) {
    if (version != kPromptTemplateVersion)
        throw ConfigError("prompt template version mismatch: have " +
                          std::string(kPromptTemplateVersion) + ", requested " + version);
}

inline PromptDocument build_explainer_prompt(const ExpertPool& pool,
                                             const std::string& version = kPromptTemplateVersion) {
    check_template_version(version);
    if (pool.explainer.size() != static_cast<std::size_t>(defaults::kExplainerExamples))
        throw ConfigError("explainer prompt needs exactly " +
                          std::to_string(defaults::kExplainerExamples) + " examples");
    namespace ad = autointerp_detail;
    PromptDocument doc;
    doc.template_version = version;
    doc.system =
        "<role>\n"
        "You are an interpretability assistant studying one expert inside a\n"
        "Mixture-of-Experts transformer language model.\n"
        "</role>\n"
        "\n"
        "<task>\n"
        "You will see several text snippets, each 32 tokens long. In every snippet the\n"
        "expert under study was active on one or more tokens.\n"
        "Write a single, precise hypothesis for this expert's computational role:\n"
        "one concise sentence of 3-12 words.\n"
        "</task>\n"
        "\n"
        "<data_structure>\n"
        "Each example consists of:\n"
        "1. <snippet>: the raw text. Tokens routed to this expert are wrapped in double\n"
        "asterisks (e.g., **token**).\n"
        "2. <top_activations>: the strongest tokens in that snippet (up to 5), sorted by\n"
        "an importance score (router weight * output L2 norm).\n"
        "- 'score': the importance score for that token.\n"
        "- 'token_str': the token as text.\n"
        "- 'promoted_tokens': the top 3 tokens the expert promotes next (Logit Lens).\n"
        "</data_structure>\n"
        "\n"
        "<guidelines>\n"
        "1. Check firing density: isolated tokens suggest specific entities, contiguous\n"
        "spans suggest syntactic blocks.\n"
        "2. Use 'promoted_tokens' to infer the expert's effect on the next-token\n"
        "distribution, not just its inputs.\n"
        "3. Generalize: find the common thread across all examples instead of fitting a\n"
        "single snippet.\n"
        "4. The ** markers are highlighting only; read the text as if they were absent.\n"
        "</guidelines>\n";

    std::string user;
    user += "<context>\nHere are the maximal activating examples for expert L" +
            std::to_string(pool.layer) + ":E" + std::to_string(pool.expert) + ".\n</context>\n\n";
    user += "<data>\n";
    for (std::size_t i = 0; i < pool.explainer.size(); ++i) {
        const auto& ex = pool.explainer[i];
        user += "<example id=\"" + std::to_string(i + 1) + "\">\n";
        user += "<snippet>\n" + ad::render_snippet(ex) + "\n</snippet>\n";
        user += "<top_activations>\n";
        for (const auto& item : ex.top_items) {
            std::string promoted;
            for (std::size_t j = 0; j < item.promoted.size(); ++j) {
                if (j) promoted += ", ";
                promoted += item.promoted[j];
            }
            user += "<item token_str=\"" + ad::escape_attr(item.token_str) + "\" score=\"" +
                    ad::format_score(item.score) + "\" promoted_tokens=\"" +
                    ad::escape_attr(promoted) + "\"/>\n";
        }
        user += "</top_activations>\n</example>\n\n";
    }
    user += "</data>\n\n";
    user +=
        "<instruction>\n"
        "Based strictly on the data above, analyze the <top_activations> together with\n"
        "their context in each <snippet> and reply with your one-sentence hypothesis.\n"
        "</instruction>\n";
    doc.user = user;
    return doc;
}

struct ScorerPrompt {
    PromptDocument prompt;
    std::vector<int> answer_key;  // hidden; aligned with presented order
};

inline ScorerPrompt build_scorer_prompt(const std::string& hypothesis,
                                        const std::vector<MinedExample>& positives,
                                        const std::vector<MinedExample>& negatives,
                                        std::uint64_t seed,
                                        const std::string& version = kPromptTemplateVersion) {
    check_template_version(version);
    if (positives.size() != static_cast<std::size_t>(defaults::kScorerPositives) ||
        negatives.size() != static_cast<std::size_t>(defaults::kScorerNegatives))
        throw ConfigError("scorer prompt needs " + std::to_string(defaults::kScorerPositives) +
                          " positives and " + std::to_string(defaults::kScorerNegatives) +
                          " negatives");
    namespace ad = autointerp_detail;
    struct Entry {
        const MinedExample* ex;
        int truth;
    };
    std::vector<Entry> entries;
    for (const auto& e : positives) entries.push_back({&e, 1});
    for (const auto& e : negatives) entries.push_back({&e, 0});
    Rng rng(derive_seed(seed, "scorer-shuffle"));
    rng.shuffle(entries);

    ScorerPrompt sp;
    sp.prompt.template_version = version;
    sp.prompt.system =
        "<role>\n"
        "You are an automated grader for interpretability hypotheses.\n"
        "</role>\n"
        "\n"
        "<task>\n"
        "You will be given:\n"
        "1. A **Hypothesis** describing the function of a specific MoE expert.\n"
        "2. A list of **Test Examples**. Each example contains a text snippet where the\n"
        "active tokens are highlighted with double asterisks (e.g., **token**).\n"
        "\n"
        "Decide for each example: does the highlighted token pattern match the\n"
        "Hypothesis?\n"
        "- If the highlighted tokens fit the hypothesis: output 1.\n"
        "- If they are unrelated to it or contradict it: output 0.\n"
        "</task>\n"
        "\n"
        "<constraints>\n"
        "- Judge strictly against the provided Hypothesis.\n"
        "- The Hypothesis must describe the **BOLDED tokens** themselves, not merely the\n"
        "general topic of the sentence.\n"
        "</constraints>\n";

    std::string user;
    user += "<hypothesis>\n" + hypothesis + "\n</hypothesis>\n\n<examples>\n\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
        user += "<example id=\"" + std::to_string(i + 1) + "\">\n";
        user += "<snippet>\n" + ad::render_snippet(*entries[i].ex) + "\n</snippet>\n";
        user += "</example>\n\n";
        sp.answer_key.push_back(entries[i].truth);
    }
    user += "</examples>\n\n";
    user += "<instruction>\nEvaluate the " + std::to_string(entries.size()) +
            " examples above against the hypothesis.\n"
            "First, perform your analysis.\n"
            "Then, output the final list of verdicts. Ensure it contains exactly " +
            std::to_string(entries.size()) +
            " integers,\neach 0 or 1, for example: [1, 0, 1, ...].\n</instruction>\n";
    sp.prompt.user = user;
    return sp;
}

// Extracts the last bracketed or whitespace/comma-separated run of exactly
// `expected` values from {0,1}. Anything else is a parse failure.
inline std::optional<std::vector<int>> parse_verdicts(const std::string& text,
                                                      int expected = defaults::kScorerPositives +
                                                                     defaults::kScorerNegatives) {
    std::vector<std::vector<int>> runs;
    std::vector<int> current;
    std::size_t i = 0;
    auto flush = [&]() {
        if (!current.empty()) runs.push_back(current);
        current.clear();
    };
    while (i < text.size()) {
        const char c = text[i];
        if (c == '0' || c == '1') {
            // A lone 0/1 digit; longer numbers break the run.
            const bool prev_digit = i > 0 && std::isdigit(static_cast<unsigned char>(text[i - 1]));
            std::size_t j = i;
            while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
            if (!prev_digit && j == i + 1) {
                current.push_back(c - '0');
            } else {
                flush();
            }
            i = j;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == ',' || c == '[' || c == ']') {
            ++i;
            continue;
        }
        flush();
        ++i;
    }
    flush();
    for (auto it = runs.rbegin(); it != runs.rend(); ++it)
        if (static_cast<int>(it->size()) == expected) return *it;
    return std::nullopt;
}

struct LabelScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// F1 of the positive class over the scorer's choices against the hidden key.
inline LabelScore score_label(const std::vector<int>& verdicts, const std::vector<int>& key) {
    if (verdicts.size() != key.size())
        throw DataError("score_label: verdicts and key length mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < key.size(); ++i) {
        if (verdicts[i] == 1 && key[i] == 1) ++tp;
        else if (verdicts[i] == 1 && key[i] == 0) ++fp;
        else if (verdicts[i] == 0 && key[i] == 1) ++fn;
    }
    LabelScore s;
    s.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    s.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0
                                         : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

struct LabelRecord {
    int layer = -1;
    int expert = -1;
    std::string hypothesis;
    std::vector<int> explainer_ids;   // window ids shown to the explainer
    std::vector<int> positive_ids;    // scorer positives
    std::vector<int> negative_ids;    // scorer negatives (peers' held-back)
    std::vector<int> verdicts;
    std::vector<int> answer_key;
    LabelScore score;
    bool skipped = false;   // unlabelable expert
    bool failed = false;    // scorer output unparseable after one re-prompt
    std::string note;
    std::string endpoint_id;
};

// What a pipeline call needs answered. The answer key is exposed so scripted
// mock scorers can be exact; the HTTP responder only ever serializes the
// messages.
struct LlmTask {
    std::string kind;  // "explainer" | "scorer"
    int layer = -1;
    int expert = -1;
    std::vector<ChatMessage> messages;
    std::vector<int> answer_key;  // scorer tasks only
};

using Responder = std::function<std::string(const LlmTask&)>;

struct AutointerpOptions {
    std::uint64_t seed = 0;
    int max_in_flight = defaults::kLlmMaxInFlight;
    std::string template_version = kPromptTemplateVersion;
    std::string endpoint_id = "mock";
};

// Explainer strictly before scorer per expert; experts run with a bounded
// number in flight. Negatives come from same-layer peers' held-back pools.
inline std::vector<LabelRecord> run_autointerp(const std::vector<ExpertPool>& pools,
                                               const Responder& responder,
                                               const AutointerpOptions& opt) {
    check_template_version(opt.template_version);
    // Same-layer peer negatives, per pool.
    std::vector<std::vector<const MinedExample*>> peer_negatives(pools.size());
    for (std::size_t i = 0; i < pools.size(); ++i) {
        for (std::size_t j = 0; j < pools.size(); ++j) {
            if (i == j || pools[j].layer != pools[i].layer || pools[j].unlabelable) continue;
            for (const auto& ex : pools[j].held_back) peer_negatives[i].push_back(&ex);
        }
    }

    std::vector<LabelRecord> records(pools.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= pools.size()) return;
            const auto& pool = pools[i];
            auto& rec = records[i];
            rec.layer = pool.layer;
            rec.expert = pool.expert;
            rec.endpoint_id = opt.endpoint_id;
            if (pool.unlabelable) {
                rec.skipped = true;
                rec.note = pool.reason;
                continue;
            }
            if (peer_negatives[i].size() < static_cast<std::size_t>(defaults::kScorerNegatives)) {
                rec.skipped = true;
                rec.note = "insufficient same-layer negatives: " +
                           std::to_string(peer_negatives[i].size());
                continue;
            }

            // Disjointness is structural (explainer/scorer_pos/held_back split
            // the top-40 three ways); verify anyway.
            std::set<int> explainer_ids, scorer_ids;
            for (const auto& ex : pool.explainer) explainer_ids.insert(ex.window_id);
            for (const auto& ex : pool.scorer_pos) scorer_ids.insert(ex.window_id);
            for (int id : scorer_ids)
                if (explainer_ids.count(id))
                    throw DataError("explainer/scorer example sets overlap for expert L" +
                                    std::to_string(pool.layer) + ":E" +
                                    std::to_string(pool.expert));

            const PromptDocument ep = build_explainer_prompt(pool, opt.template_version);
            LlmTask etask{"explainer", pool.layer, pool.expert,
                          {{"system", ep.system}, {"user", ep.user}},
                          {}};
            std::string hypothesis = responder(etask);
            while (!hypothesis.empty() &&
                   (hypothesis.back() == '\n' || hypothesis.back() == ' '))
                hypothesis.pop_back();
            rec.hypothesis = hypothesis;
            for (const auto& ex : pool.explainer) rec.explainer_ids.push_back(ex.window_id);

            // Seeded draw of 10 peer negatives.
            std::vector<const MinedExample*> negs = peer_negatives[i];
            Rng rng(derive_seed(opt.seed, "negatives:" + std::to_string(pool.layer) + ":" +
                                              std::to_string(pool.expert)));
            rng.shuffle(negs);
            negs.resize(static_cast<std::size_t>(defaults::kScorerNegatives));
            std::vector<MinedExample> negatives;
            for (const auto* ex : negs) negatives.push_back(*ex);

            const ScorerPrompt sp = build_scorer_prompt(
                rec.hypothesis, pool.scorer_pos, negatives,
                derive_seed(opt.seed, "scorer:" + std::to_string(pool.layer) + ":" +
                                          std::to_string(pool.expert)),
                opt.template_version);
            for (const auto& ex : pool.scorer_pos) rec.positive_ids.push_back(ex.window_id);
            for (const auto& ex : negatives) rec.negative_ids.push_back(ex.window_id);
            rec.answer_key = sp.answer_key;

            LlmTask stask{"scorer", pool.layer, pool.expert,
                          {{"system", sp.prompt.system}, {"user", sp.prompt.user}},
                          sp.answer_key};
            std::string reply = responder(stask);
            auto verdicts = parse_verdicts(reply);
            if (!verdicts) {
                // One re-prompt with a terse format reminder, then hard fail.
                LlmTask retry = stask;
                retry.messages.push_back({"assistant", reply});
                retry.messages.push_back(
                    {"user", "Your previous reply could not be parsed. Output only the final "
                             "list of exactly " +
                                 std::to_string(sp.answer_key.size()) + " integers (0 or 1)."});
                reply = responder(retry);
                verdicts = parse_verdicts(reply);
            }
            if (!verdicts) {
                rec.failed = true;
                rec.note = "scorer output unparseable after re-prompt";
                continue;
            }
            rec.verdicts = *verdicts;
            rec.score = score_label(rec.verdicts, rec.answer_key);
        }
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < std::max(1, opt.max_in_flight); ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    return records;
}

inline Responder http_responder(const LlmEndpoint& endpoint, TranscriptStore* transcripts) {
    return [endpoint, transcripts](const LlmTask& task) {
        return call_llm(endpoint, task.messages, transcripts);
    };
}

enum class MockScorerMode { GroundTruth, AllPositive };

// Scripted offline responder: the explainer answers with a deterministic
// hypothesis derived from the prompt's own top tokens, the scorer replies per
// the requested mode. Transcripts are recorded like a live endpoint's.
inline Responder mock_responder(MockScorerMode mode, TranscriptStore* transcripts = nullptr) {
    return [mode, transcripts](const LlmTask& task) {
        std::string reply;
        if (task.kind == "explainer") {
            reply = "Tokens routed to expert L" + std::to_string(task.layer) + ":E" +
                    std::to_string(task.expert) + " sharing one activation pattern.";
        } else {
            std::string list = "[";
            for (std::size_t i = 0; i < task.answer_key.size(); ++i) {
                if (i) list += ", ";
                list += mode == MockScorerMode::GroundTruth ? std::to_string(task.answer_key[i])
                                                            : "1";
            }
            list += "]";
            reply = "Analysis complete.\n" + list;
        }
        if (transcripts) {
            nlohmann::json req = nlohmann::json::array();
            for (const auto& m : task.messages)
                req.push_back({{"role", m.role}, {"content", m.content}});
            transcripts->append({{"endpoint", "mock"},
                                 {"attempt", 0},
                                 {"status", 200},
                                 {"request", {{"model", "mock"}, {"messages", req}}},
                                 {"response", reply}});
        }
        return reply;
    };
}

inline void write_labels_csv(const std::vector<LabelRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write labels csv: " + path);
    out << "layer,expert,hypothesis,precision,recall,f1,skipped,failed\n";
    for (const auto& r : records) {
        std::string hyp = r.hypothesis;
        for (auto& c : hyp)
            if (c == ',' || c == '\n') c = ' ';
        out << r.layer << "," << r.expert << "," << hyp << "," << r.score.precision << ","
            << r.score.recall << "," << r.score.f1 << "," << (r.skipped ? 1 : 0) << ","
            << (r.failed ? 1 : 0) << "\n";
    }
}

inline nlohmann::json labels_json(const std::vector<LabelRecord>& records) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : records) {
        arr.push_back({{"layer", r.layer},
                       {"expert", r.expert},
                       {"hypothesis", r.hypothesis},
                       {"explainer_ids", r.explainer_ids},
                       {"positive_ids", r.positive_ids},
                       {"negative_ids", r.negative_ids},
                       {"verdicts", r.verdicts},
                       {"answer_key", r.answer_key},
                       {"precision", r.score.precision},
                       {"recall", r.score.recall},
                       {"f1", r.score.f1},
                       {"skipped", r.skipped},
                       {"failed", r.failed},
                       {"note", r.note},
                       {"endpoint", r.endpoint_id}});
    }
    return arr;
}

// Per-layer mean F1 over scored experts, with coverage (labelled fraction).
inline nlohmann::json labels_series_json(const std::vector<LabelRecord>& records) {
    std::map<int, std::pair<double, int>> sums;
    std::map<int, int> totals;
    for (const auto& r : records) {
        totals[r.layer]++;
        if (r.skipped || r.failed) continue;
        sums[r.layer].first += r.score.f1;
        sums[r.layer].second++;
    }
    nlohmann::json series = nlohmann::json::array();
    for (const auto& [layer, total] : totals) {
        const auto [sum, n] = sums[layer];
        series.push_back({{"layer", layer},
                          {"mean_f1", n > 0 ? sum / n : 0.0},
                          {"n_scored", n},
                          {"coverage", total > 0 ? static_cast<double>(n) / total : 0.0}});
    }
    return {{"series", series}};
}

}  // namespace moescope
