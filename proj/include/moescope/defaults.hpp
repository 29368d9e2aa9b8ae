#pragma once

// Protocol constants. Every pipeline default lives here so a single audit can
// confirm the configured protocol; CLI flags and config files override these
// at call sites, never by editing this header.

#include <array>
#include <cstddef>
#include <cstdint>

namespace moescope::defaults {

// Probing protocol.
inline constexpr int kProbeSampleCount = 5000;        // balanced token samples per concept
inline constexpr double kTrainFraction = 0.75;        // 75/25 train-test split
inline constexpr std::array<int, 7> kSweepK = {1, 2, 4, 8, 16, 32, 64};
inline constexpr double kProbeTol = 1e-8;
inline constexpr int kProbeMaxIter = 500;
inline constexpr double kDecisionThreshold = 0.5;
inline constexpr int kMinSamplesPerClass = 8;         // below this a probe site is skipped

// Example mining protocol.
inline constexpr int kWindowTokens = 32;              // snippet length shown to the LLMs
inline constexpr std::int64_t kMiningTokenBudget = 2'000'000;
inline constexpr int kTopExamplesPerExpert = 40;
inline constexpr int kExplainerExamples = 20;
inline constexpr int kScorerPositives = 10;
inline constexpr int kScorerNegatives = 10;
inline constexpr int kHeldBackExamples = 10;          // served as negatives to peer experts
inline constexpr int kPromptActivationItems = 5;      // top activation items per snippet
inline constexpr int kPromotedTokens = 3;             // Logit Lens tokens per activation item

// Specialization protocol.
inline constexpr std::array<int, 5> kClusterPreset = {10, 50, 100, 1000, 5000};
inline constexpr std::int64_t kAnalysisTokenBudget = 1'000'000;
inline constexpr int kKmeansMaxIter = 100;
inline constexpr int kBaselineMcSamples = 100;
inline constexpr int kFunctionalTopN = kPromotedTokens;

// Endpoint plumbing.
inline constexpr int kEndpointMaxRetries = 3;
inline constexpr int kEndpointTimeoutMs = 60'000;
inline constexpr double kEndpointTemperature = 0.0;
inline constexpr int kLlmMaxInFlight = 4;

}  // namespace moescope::defaults
