#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cted/control.hpp"
#include "cted/keyval.hpp"
#include "cted/session.hpp"

namespace cted {

// Flat experiment record: every knob the CLI exposes. All randomness flows
// from the single seed (weights = seed, noise = seed + 1, embeddings =
// seed + 2).
struct RunConfig {
    ModelConfig model;
    int steps = kDefaultSteps;
    uint64_t seed = 7;
    std::string source_prompt = "a standing horse";
    std::string target_prompt;
    std::vector<std::string> edit_words;
    double alpha = kAlphaStructurePreserving;
    ControlMode mode = ControlMode::ConsistEdit;
    std::string blocks = "all";
    bool guidance = false;
    double cfg_scale = double(kCfgScaleGenerated);
    double mask_threshold = double(kDefaultMaskThreshold);
    std::string mask_path;
    std::string out_dir = "out";
    int invert_refine = kDefaultInvertRefine;

    struct Round {
        std::string prompt;
        std::vector<std::string> words;
        double alpha = kAlphaStructurePreserving;
        ControlMode mode = ControlMode::ConsistEdit;
        bool operator==(const Round&) const = default;
    };
    std::vector<Round> rounds;

    uint64_t weight_seed() const { return seed; }
    uint64_t noise_seed() const { return seed + 1; }
    uint64_t embed_seed() const { return seed + 2; }

    SessionConfig session() const;
    EditRequest request() const;
    void validate() const;

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_run_config(const KeyValueFile& kv);
KeyValueFile serialize_run_config(const RunConfig& cfg);

}  // namespace cted
