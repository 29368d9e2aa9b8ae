#pragma once

// Run manifests: every artifact directory gets exactly one manifest recording
// the command, effective config hash, seeds, input hashes, outputs and
// timings. A rerun that lands on the same config hash is flagged as a
// reproduction.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "moescope/common.hpp"
#include "moescope/version.hpp"

namespace moescope {

struct RunManifest {
    std::string command;
    nlohmann::json effective_config;
    std::uint64_t seed = 0;
    nlohmann::json input_hashes = nlohmann::json::object();
    nlohmann::json outputs = nlohmann::json::array();
    nlohmann::json timings_ms = nlohmann::json::object();

    std::string config_hash() const { return hex64(fnv1a64(effective_config.dump())); }
};

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot hash input: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(bytes));
}

inline void write_manifest(const RunManifest& m, const std::string& out_dir) {
    const auto path = std::filesystem::path(out_dir) / "manifest.json";
    bool reproduction = false;
    if (std::filesystem::exists(path)) {
        try {
            std::ifstream in(path);
            nlohmann::json old;
            in >> old;
            reproduction = old.value("config_hash", "") == m.config_hash();
        } catch (...) {
            reproduction = false;
        }
    }
    nlohmann::json j{{"command", m.command},
                     {"config_hash", m.config_hash()},
                     {"effective_config", m.effective_config},
                     {"seed", m.seed},
                     {"toolkit_version", kToolkitVersion},
                     {"input_hashes", m.input_hashes},
                     {"outputs", m.outputs},
                     {"timings_ms", m.timings_ms},
                     {"reproduction", reproduction},
                     {"unix_ms", std::chrono::duration_cast<std::chrono::milliseconds>(
                                     std::chrono::system_clock::now().time_since_epoch())
                                     .count()}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

class StageTimer {
public:
    explicit StageTimer(RunManifest& m, std::string stage)
        : m_(m), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - start_)
                            .count();
        m_.timings_ms[stage_] = ms;
    }

private:
    RunManifest& m_;
    std::string stage_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace moescope
