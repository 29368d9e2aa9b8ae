// moescope CLI: reproducible pipelines over the toy MoE toolkit. Subcommands
// map onto the library modules; every run writes one manifest into its
// artifact directory. Exit codes: 0 success, 1 runtime failure, 2 usage or
// config error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "moescope/attribution.hpp"
#include "moescope/autointerp.hpp"
#include "moescope/config.hpp"
#include "moescope/corpus.hpp"
#include "moescope/defaults.hpp"
#include "moescope/llm_client.hpp"
#include "moescope/manifest.hpp"
#include "moescope/model.hpp"
#include "moescope/plant.hpp"
#include "moescope/probing.hpp"
#include "moescope/specialization.hpp"
#include "moescope/version.hpp"

namespace fs = std::filesystem;
using namespace moescope;

namespace {

nlohmann::json json_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("JSON parse error in " + path + ": " + e.what());
    }
    return j;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
}

Model load_model(const std::string& dir) {
    const auto cfg_path = (fs::path(dir) / "model.json").string();
    const auto w_path = (fs::path(dir) / "weights.bin").string();
    ModelConfig cfg = load_config(cfg_path);
    Weights w = load_weights(cfg, w_path);
    return Model(std::move(cfg), std::move(w));
}

std::vector<TokenId> resolve_word_tokens(const std::string& word) {
    auto ids = shipped_tokenizer().tokenize(word);
    if (ids.empty()) throw ConfigError("word resolves to no tokens: '" + word + "'");
    return ids;
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write: " + path);
    out << j.dump(2) << "\n";
}

int g_workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

// ---------------------------------------------------------------- model ----

int cmd_model_init(const std::string& config_path, const std::string& out_dir) {
    ensure_dir(out_dir);
    RunManifest m;
    m.command = "model init";
    const ModelConfig cfg = load_config(config_path);
    m.effective_config = to_json(cfg);
    m.seed = cfg.seed;
    m.input_hashes["config"] = hash_file(config_path);
    {
        StageTimer t(m, "init");
        const Weights w = random_weights(cfg);
        save_config(cfg, (fs::path(out_dir) / "model.json").string());
        save_weights(w, cfg, (fs::path(out_dir) / "weights.bin").string());
    }
    m.outputs = {(fs::path(out_dir) / "model.json").string(),
                 (fs::path(out_dir) / "weights.bin").string()};
    write_manifest(m, out_dir);
    std::cout << "initialized model in " << out_dir << "\n";
    return 0;
}

PlantSpec plant_spec_from_json(const nlohmann::json& j) {
    PlantSpec s;
    s.layer = j.at("layer").get<int>();
    s.expert = j.value("expert", 0);
    if (j.contains("trigger_tokens"))
        for (const auto& t : j["trigger_tokens"]) s.trigger_tokens.push_back(t.get<TokenId>());
    if (j.contains("trigger_words"))
        for (const auto& w : j["trigger_words"])
            for (TokenId t : resolve_word_tokens(w.get<std::string>()))
                s.trigger_tokens.push_back(t);
    s.neuron = j.at("neuron").get<int>();
    if (j.contains("promoted_token")) s.promoted_token = j["promoted_token"].get<TokenId>();
    else if (j.contains("promoted_word"))
        s.promoted_token = resolve_word_tokens(j["promoted_word"].get<std::string>()).front();
    else
        throw ConfigError("plant spec needs promoted_token or promoted_word");
    s.ambient_routing = j.value("ambient_routing", false);
    s.smear = j.value("smear", 1);
    s.signal_noise = j.value("signal_noise", 0.0);
    return s;
}

int cmd_model_plant(const std::string& config_path, const std::string& plant_path,
                    const std::string& out_dir) {
    ensure_dir(out_dir);
    RunManifest m;
    m.command = "model plant";
    const ModelConfig cfg = load_config(config_path);
    const nlohmann::json pj = json_from_file(plant_path);
    std::vector<PlantSpec> specs;
    for (const auto& e : pj.at("experts")) specs.push_back(plant_spec_from_json(e));
    const std::uint64_t seed = pj.value("seed", cfg.seed);
    m.effective_config = {{"model", to_json(cfg)}, {"plant", pj}};
    m.seed = seed;
    m.input_hashes["config"] = hash_file(config_path);
    m.input_hashes["plant"] = hash_file(plant_path);
    {
        StageTimer t(m, "plant");
        const Weights w = plant_experts(cfg, specs, seed);
        save_config(cfg, (fs::path(out_dir) / "model.json").string());
        save_weights(w, cfg, (fs::path(out_dir) / "weights.bin").string());
    }
    m.outputs = {(fs::path(out_dir) / "model.json").string(),
                 (fs::path(out_dir) / "weights.bin").string()};
    write_manifest(m, out_dir);
    std::cout << "planted " << specs.size() << " expert(s) in " << out_dir << "\n";
    return 0;
}

int cmd_model_inspect(const std::string& model_dir) {
    const Model model = load_model(model_dir);
    const auto& cfg = model.config();
    std::cout << "model: " << model_dir << "\n";
    std::cout << "d_model=" << cfg.d_model << " n_layers=" << cfg.n_layers
              << " n_heads=" << cfg.n_heads << " d_ff=" << cfg.d_ff
              << " vocab_size=" << cfg.vocab_size << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", cfg.routing_sparsity());
    std::cout << "routing: N=" << cfg.n_experts << " N_A=" << cfg.n_active
              << " N_SE=" << cfg.n_shared << " sparsity=" << buf << "\n";
    std::cout << "ffn_kind:";
    for (auto k : cfg.ffn_kind) std::cout << " " << to_string(k);
    std::cout << "\nnorm_kind: " << to_string(cfg.norm_kind) << "\n";
    std::size_t params = 0;
    Weights::for_each_tensor(model.weights(),
                             [&](const std::string&, const float*, std::size_t n) { params += n; });
    std::cout << "parameters: " << params << "\n";
    return 0;
}

// ---------------------------------------------------------------- probe ----

int cmd_probe(const std::string& config_path, const std::string& out_dir, bool plot_data) {
    ensure_dir(out_dir);
    const nlohmann::json cj = json_from_file(config_path);
    RunManifest m;
    m.command = "probe";
    m.input_hashes["config"] = hash_file(config_path);

    const Model model = load_model(cj.at("model_dir").get<std::string>());
    const std::string corpus_path = cj.at("corpus").get<std::string>();
    m.input_hashes["corpus"] = hash_file(corpus_path);
    const TokenizedCorpus corpus = load_corpus(corpus_path);

    std::vector<ConceptSpec> concepts;
    if (cj.contains("concepts_file"))
        concepts = load_concept_file(cj["concepts_file"].get<std::string>());
    else
        concepts = load_concept_registry(cj.at("concepts_dir").get<std::string>());
    if (cj.contains("concept_names")) {
        std::vector<ConceptSpec> filtered;
        for (const auto& n : cj["concept_names"]) {
            const auto name = n.get<std::string>();
            bool found = false;
            for (const auto& c : concepts)
                if (c.name == name) {
                    filtered.push_back(c);
                    found = true;
                }
            if (!found) throw ConfigError("unknown concept: " + name);
        }
        concepts = std::move(filtered);
    }

    SweepOptions opt;
    opt.n_samples = cj.value("n_samples", defaults::kProbeSampleCount);
    if (cj.contains("k_values")) {
        opt.k_values.clear();
        for (const auto& k : cj["k_values"]) opt.k_values.push_back(k.get<int>());
    }
    if (cj.contains("lambda")) opt.lambda = cj["lambda"].get<double>();
    opt.seed = cj.value("seed", 0);
    opt.n_threads = g_workers;

    std::vector<ProbeSite> sites;
    if (!cj.contains("sites") || cj["sites"] == "all") {
        sites = all_sites(model.config());
    } else {
        for (const auto& s : cj["sites"])
            sites.push_back({s.at("layer").get<int>(), s.value("expert", -1)});
    }

    m.effective_config = {{"model_dir", cj.at("model_dir")},
                          {"corpus", corpus_path},
                          {"n_samples", opt.n_samples},
                          {"k_values", opt.k_values},
                          {"lambda", opt.lambda ? nlohmann::json(*opt.lambda) : nlohmann::json()},
                          {"seed", opt.seed},
                          {"n_concepts", concepts.size()},
                          {"n_sites", sites.size()}};
    m.seed = opt.seed;

    SweepResult sweep;
    {
        StageTimer t(m, "sweep");
        sweep = run_sweep(model, corpus, concepts, sites, opt);
    }
    const auto csv = (fs::path(out_dir) / "probes.csv").string();
    const auto best = (fs::path(out_dir) / "best_sites.json").string();
    write_sweep_csv(sweep, csv);
    write_json_file(best_sites_json(sweep), best);
    m.outputs = {csv, best};
    if (plot_data) {
        const auto series = (fs::path(out_dir) / "series.json").string();
        write_json_file(sweep_series_json(sweep), series);
        m.outputs.push_back(series);
    }
    write_manifest(m, out_dir);
    std::cout << "probe sweep: " << sweep.grid.size() << " probes over " << concepts.size()
              << " concept(s), " << sites.size() << " site(s)\n";
    return 0;
}

// ------------------------------------------------------------ attribute ----

int cmd_attribute(const std::string& config_path, const std::string& out_dir,
                  bool normalized_lens) {
    ensure_dir(out_dir);
    const nlohmann::json cj = json_from_file(config_path);
    RunManifest m;
    m.command = "attribute";
    m.input_hashes["config"] = hash_file(config_path);
    const Model model = load_model(cj.at("model_dir").get<std::string>());

    m.effective_config = cj;
    m.seed = cj.value("seed", 0);
    nlohmann::json out_json;

    if (cj.contains("experts")) {
        const auto layer = cj.at("layer").get<std::size_t>();
        std::vector<ExpertCaseSet> sets;
        for (const auto& e : cj["experts"]) {
            ExpertCaseSet set;
            set.expert = e.at("expert").get<int>();
            const auto path = e.at("cases").get<std::string>();
            m.input_hashes["cases:" + std::to_string(set.expert)] = hash_file(path);
            set.cases = load_cases(path);
            sets.push_back(std::move(set));
        }
        TriggerTargetExperiment exp;
        {
            StageTimer t(m, "trigger_target");
            exp = run_trigger_target(model, sets, layer);
        }
        nlohmann::json matched = nlohmann::json::array();
        for (const auto& r : exp.matched) matched.push_back(report_to_json(r));
        nlohmann::json control = nlohmann::json::array();
        for (const auto& r : exp.control) control.push_back(report_to_json(r));
        out_json["trigger_target"] = {{"layer", layer},
                                      {"matched", matched},
                                      {"control", control},
                                      {"matched_aggregate", aggregate_to_json(exp.matched_agg)},
                                      {"control_aggregate", aggregate_to_json(exp.control_agg)}};
        std::cout << "trigger-target: matched top1=" << exp.matched_agg.frac_top1 * 100.0
                  << "% top8=" << exp.matched_agg.frac_top8 * 100.0
                  << "% unrouted=" << exp.matched_agg.frac_unrouted * 100.0 << "%\n";
        std::cout << "trigger-target: control unrouted=" << exp.control_agg.frac_unrouted * 100.0
                  << "%\n";
    }

    if (cj.contains("lens")) {
        const auto& lj = cj["lens"];
        const auto text = lj.at("text").get<std::string>();
        const auto layer = lj.at("layer").get<std::size_t>();
        const int n_top = lj.value("n_top", 10);
        const auto tokens = shipped_tokenizer().tokenize(text);
        const ForwardTrace trace = model.forward(tokens);
        nlohmann::json lens_out = nlohmann::json::array();
        for (std::size_t p = 0; p < trace.seq_len(); ++p) {
            const auto& rec = trace.at(layer, p);
            const LensResult lens =
                normalized_lens
                    ? logit_lens_normalized(rec.ffn_update, model.weights().final_norm_scale,
                                            model.config().norm_kind, model.unembedding(), n_top)
                    : logit_lens(rec.ffn_update, model.unembedding(), n_top);
            nlohmann::json top = nlohmann::json::array();
            for (const auto& [tid, logit] : lens.top)
                top.push_back({{"token", shipped_tokenizer().token_text(tid)}, {"logit", logit}});
            lens_out.push_back({{"position", p},
                                {"token", shipped_tokenizer().token_text(tokens[p])},
                                {"top", top}});
            if (lens.clipped_n_top)
                std::cerr << "warning: n_top clipped to vocabulary size\n";
        }
        out_json["lens"] = {{"layer", layer}, {"normalized", normalized_lens}, {"per_position", lens_out}};
    }

    if (out_json.empty())
        throw ConfigError("attribute config must define 'experts' (trigger-target) or 'lens'");

    const auto path = (fs::path(out_dir) / "attribution.json").string();
    write_json_file(out_json, path);
    m.outputs = {path};
    write_manifest(m, out_dir);
    return 0;
}

// ------------------------------------------------------------ specialize ----

int cmd_specialize(const std::string& config_path, const std::string& out_dir) {
    ensure_dir(out_dir);
    const nlohmann::json cj = json_from_file(config_path);
    RunManifest m;
    m.command = "specialize";
    m.input_hashes["config"] = hash_file(config_path);
    const Model model = load_model(cj.at("model_dir").get<std::string>());
    const std::string corpus_path = cj.at("corpus").get<std::string>();
    m.input_hashes["corpus"] = hash_file(corpus_path);
    const TokenizedCorpus corpus = load_corpus(corpus_path);

    std::vector<int> k_values;
    if (cj.contains("k_values"))
        for (const auto& k : cj["k_values"]) k_values.push_back(k.get<int>());
    else
        k_values.assign(defaults::kClusterPreset.begin(), defaults::kClusterPreset.end());

    std::vector<int> layers;
    if (cj.contains("layers"))
        for (const auto& l : cj["layers"]) layers.push_back(l.get<int>());
    else if (cj.contains("layer"))
        layers.push_back(cj["layer"].get<int>());
    else
        for (int l = 0; l < model.config().n_layers; ++l)
            if (model.is_moe_layer(static_cast<std::size_t>(l))) layers.push_back(l);
    for (int l : layers)
        if (l < 0 || l >= model.config().n_layers || !model.is_moe_layer(static_cast<std::size_t>(l)))
            throw ConfigError("specialize: layer " + std::to_string(l) + " is not an MoE layer");

    const std::string kind_str = cj.value("kind", std::string("both"));
    const bool do_routing = kind_str == "routing" || kind_str == "both";
    const bool do_functional = kind_str == "functional" || kind_str == "both";
    if (!do_routing && !do_functional) throw ConfigError("kind must be routing|functional|both");

    SpecializationParams params;
    params.mc_samples = cj.value("mc_samples", defaults::kBaselineMcSamples);
    params.seed = cj.value("seed", 0);
    params.n_top = cj.value("n_top", defaults::kFunctionalTopN);
    params.weighted_base_rate = cj.value("weighted_base_rate", false);
    params.n_threads = g_workers;
    const std::int64_t budget = cj.value("token_budget", defaults::kAnalysisTokenBudget);

    m.effective_config = {{"model_dir", cj.at("model_dir")}, {"corpus", corpus_path},
                          {"k_values", k_values},           {"layers", layers},
                          {"kind", kind_str},               {"n_top", params.n_top},
                          {"mc_samples", params.mc_samples}, {"seed", params.seed},
                          {"token_budget", budget},
                          {"weighted_base_rate", params.weighted_base_rate}};
    m.seed = params.seed;

    // Cluster maps per k.
    std::vector<ClusterMap> cmaps;
    {
        StageTimer t(m, "clustering");
        for (int k : k_values)
            cmaps.push_back(cluster_unembedding(model.unembedding(), k, params.seed));
    }
    for (std::size_t i = 0; i < cmaps.size(); ++i) {
        const auto jp = (fs::path(out_dir) / ("clusters_k" + std::to_string(cmaps[i].k) + ".json")).string();
        const auto bp = (fs::path(out_dir) / ("centroids_k" + std::to_string(cmaps[i].k) + ".bin")).string();
        save_cluster_map(cmaps[i], jp, bp);
        m.outputs.push_back(jp);
    }

    // One pass over the corpus (up to the token budget), accumulating counts
    // for every (k, layer, expert, kind).
    const int n_exp = model.config().n_experts;
    using Counts = std::vector<std::int64_t>;
    auto make_grid = [&]() {
        std::vector<std::vector<std::vector<Counts>>> g(cmaps.size());
        for (std::size_t ki = 0; ki < cmaps.size(); ++ki) {
            g[ki].resize(layers.size());
            for (auto& per_layer : g[ki])
                per_layer.assign(static_cast<std::size_t>(n_exp),
                                 Counts(static_cast<std::size_t>(cmaps[ki].k), 0));
        }
        return g;
    };
    auto routing_grid = make_grid();
    auto functional_grid = make_grid();
    {
        StageTimer t(m, "distributions");
        std::int64_t processed = 0;
        for (const auto& doc : corpus.documents) {
            if (processed >= budget) break;
            if (doc.tokens.empty()) continue;
            std::vector<TokenId> tokens = doc.tokens;
            if (tokens.size() > model.max_seq_len()) tokens.resize(model.max_seq_len());
            const ForwardTrace trace = model.forward(tokens);
            processed += static_cast<std::int64_t>(tokens.size());
            for (std::size_t li = 0; li < layers.size(); ++li) {
                const auto layer = static_cast<std::size_t>(layers[li]);
                for (int e = 0; e < n_exp; ++e) {
                    for (std::size_t ki = 0; ki < cmaps.size(); ++ki) {
                        if (do_routing)
                            accumulate_routing_counts(trace, layer, e, cmaps[ki],
                                                      routing_grid[ki][li][static_cast<std::size_t>(e)]);
                        if (do_functional)
                            accumulate_functional_counts(model, trace, layer, e, params.n_top,
                                                         cmaps[ki],
                                                         functional_grid[ki][li][static_cast<std::size_t>(e)]);
                    }
                }
            }
        }
        m.effective_config["tokens_processed"] = processed;
    }

    std::vector<SpecializationReport> reports;
    {
        StageTimer t(m, "reports");
        for (std::size_t ki = 0; ki < cmaps.size(); ++ki) {
            for (std::size_t li = 0; li < layers.size(); ++li) {
                auto build = [&](const std::vector<Counts>& grid, DistributionKind kind) {
                    std::vector<ClusterDistribution> dists;
                    for (int e = 0; e < n_exp; ++e)
                        dists.push_back(spec_detail::distribution_from_counts(
                            grid[static_cast<std::size_t>(e)], cmaps[ki].k, kind));
                    reports.push_back(specialization_report(dists, layers[li], cmaps[ki], kind,
                                                            params));
                };
                if (do_routing) build(routing_grid[ki][li], DistributionKind::Routing);
                if (do_functional) build(functional_grid[ki][li], DistributionKind::Functional);
            }
        }
    }

    const auto csv = (fs::path(out_dir) / "specialization.csv").string();
    const auto series = (fs::path(out_dir) / "series.json").string();
    write_specialization_csv(reports, csv);
    write_json_file(specialization_series_json(reports), series);
    m.outputs.push_back(csv);
    m.outputs.push_back(series);
    write_manifest(m, out_dir);
    std::cout << "specialization: " << reports.size() << " report(s) written\n";
    return 0;
}

// ------------------------------------------------------------ autointerp ----

int cmd_autointerp(const std::string& config_path, const std::string& out_dir, bool mock) {
    ensure_dir(out_dir);
    const nlohmann::json cj = json_from_file(config_path);
    RunManifest m;
    m.command = "autointerp";
    m.input_hashes["config"] = hash_file(config_path);
    const Model model = load_model(cj.at("model_dir").get<std::string>());
    const std::string corpus_path = cj.at("corpus").get<std::string>();
    m.input_hashes["corpus"] = hash_file(corpus_path);
    const TokenizedCorpus corpus = load_corpus(corpus_path);

    std::vector<ExpertRef> experts;
    if (cj.contains("experts")) {
        for (const auto& e : cj["experts"])
            experts.push_back({e.at("layer").get<int>(), e.at("expert").get<int>()});
    } else {
        const int layer = cj.at("layer").get<int>();
        for (int e = 0; e < model.config().n_experts; ++e) experts.push_back({layer, e});
    }

    MiningOptions mopt;
    mopt.token_budget = cj.value("token_budget", defaults::kMiningTokenBudget);
    mopt.seed = cj.value("seed", 0);
    mopt.n_threads = g_workers;

    AutointerpOptions aopt;
    aopt.seed = mopt.seed;
    aopt.max_in_flight = std::min(g_workers, cj.value("max_in_flight", defaults::kLlmMaxInFlight));

    m.effective_config = {{"model_dir", cj.at("model_dir")},
                          {"corpus", corpus_path},
                          {"token_budget", mopt.token_budget},
                          {"seed", mopt.seed},
                          {"n_experts", experts.size()},
                          {"mock_endpoint", mock},
                          {"partition",
                           {{"top", defaults::kTopExamplesPerExpert},
                            {"explainer", defaults::kExplainerExamples},
                            {"scorer_positive", defaults::kScorerPositives},
                            {"scorer_negative", defaults::kScorerNegatives}}}};
    m.seed = mopt.seed;

    TranscriptStore transcripts((fs::path(out_dir) / "transcripts.jsonl").string());
    Responder responder;
    if (mock) {
        aopt.endpoint_id = "mock";
        responder = mock_responder(MockScorerMode::GroundTruth, &transcripts);
    } else {
        if (!cj.contains("endpoint"))
            throw ConfigError("autointerp config needs an 'endpoint' block (or --mock-endpoint)");
        const LlmEndpoint endpoint = endpoint_from_json(cj["endpoint"]);
        if (!endpoint.auth_env.empty() && !std::getenv(endpoint.auth_env.c_str()))
            throw ConfigError("auth environment variable not set: " + endpoint.auth_env);
        aopt.endpoint_id = endpoint.id();
        responder = http_responder(endpoint, &transcripts);
    }

    std::vector<ExpertPool> pools;
    {
        StageTimer t(m, "mining");
        pools = mine_examples(model, corpus, experts, mopt);
    }
    std::vector<LabelRecord> records;
    {
        StageTimer t(m, "labeling");
        records = run_autointerp(pools, responder, aopt);
    }

    const auto csv = (fs::path(out_dir) / "labels.csv").string();
    const auto lj = (fs::path(out_dir) / "labels.json").string();
    const auto series = (fs::path(out_dir) / "series.json").string();
    write_labels_csv(records, csv);
    write_json_file(labels_json(records), lj);
    write_json_file(labels_series_json(records), series);
    m.outputs = {csv, lj, series, transcripts.path()};
    write_manifest(m, out_dir);

    int scored = 0;
    double mean_f1 = 0.0;
    for (const auto& r : records)
        if (!r.skipped && !r.failed) {
            ++scored;
            mean_f1 += r.score.f1;
        }
    if (scored > 0) mean_f1 /= scored;
    std::cout << "autointerp: " << scored << "/" << records.size()
              << " experts labeled, mean F1=" << mean_f1 << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"moescope: a Mixture-of-Experts interpretability toolkit"};
    app.set_version_flag("--version", kToolkitVersion);
    app.add_option("--workers", g_workers, "worker budget for parallel stages");
    app.require_subcommand(1);

    std::string config_path, out_dir, model_dir, plant_path;
    bool plot_data = false, mock = false, normalized_lens = false;

    auto* model_cmd = app.add_subcommand("model", "build or inspect toy models");
    model_cmd->require_subcommand(1);
    auto* init_cmd = model_cmd->add_subcommand("init", "seeded random weights from a config");
    init_cmd->add_option("--config", config_path, "ModelConfig JSON")->required();
    init_cmd->add_option("--out", out_dir, "artifact directory")->required();
    auto* plant_cmd = model_cmd->add_subcommand("plant", "planted-expert weights from a spec");
    plant_cmd->add_option("--config", config_path, "ModelConfig JSON")->required();
    plant_cmd->add_option("--plant", plant_path, "plant spec JSON")->required();
    plant_cmd->add_option("--out", out_dir, "artifact directory")->required();
    auto* inspect_cmd = model_cmd->add_subcommand("inspect", "print shapes and routing sparsity");
    inspect_cmd->add_option("--model", model_dir, "model directory")->required();

    auto* probe_cmd = app.add_subcommand("probe", "k-sparse probing sweep");
    probe_cmd->add_option("--config", config_path, "sweep config JSON")->required();
    probe_cmd->add_option("--out", out_dir, "artifact directory")->required();
    probe_cmd->add_flag("--plot-data", plot_data, "emit mean-F1-per-k series");

    auto* attr_cmd = app.add_subcommand("attribute", "Logit Lens / DLA / trigger-target");
    attr_cmd->add_option("--config", config_path, "attribution config JSON")->required();
    attr_cmd->add_option("--out", out_dir, "artifact directory")->required();
    attr_cmd->add_flag("--normalized-lens", normalized_lens,
                       "apply the final norm to vectors before the lens projection");

    auto* spec_cmd = app.add_subcommand("specialize", "routing/functional specialization scores");
    spec_cmd->add_option("--config", config_path, "specialization config JSON")->required();
    spec_cmd->add_option("--out", out_dir, "artifact directory")->required();

    auto* ai_cmd = app.add_subcommand("autointerp", "automatic expert labeling");
    ai_cmd->add_option("--config", config_path, "autointerp config JSON")->required();
    ai_cmd->add_option("--out", out_dir, "artifact directory")->required();
    ai_cmd->add_flag("--mock-endpoint", mock, "scripted offline explainer/scorer");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (init_cmd->parsed()) return cmd_model_init(config_path, out_dir);
        if (plant_cmd->parsed()) return cmd_model_plant(config_path, plant_path, out_dir);
        if (inspect_cmd->parsed()) return cmd_model_inspect(model_dir);
        if (probe_cmd->parsed()) return cmd_probe(config_path, out_dir, plot_data);
        if (attr_cmd->parsed()) return cmd_attribute(config_path, out_dir, normalized_lens);
        if (spec_cmd->parsed()) return cmd_specialize(config_path, out_dir);
        if (ai_cmd->parsed()) return cmd_autointerp(config_path, out_dir, mock);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
