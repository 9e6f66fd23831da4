#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cted/control.hpp"
#include "cted/mask.hpp"
#include "cted/sampler.hpp"

namespace cted {

inline constexpr double kAlphaStructurePreserving = 1.0;
inline constexpr double kAlphaShapeChanging = 0.3;

struct NfeCounter {
    int count = 0;
    void add(int n = 1) { count += n; }
};

// Per-(step, layer, branch) store of Q/K/V triples captured while a pass
// runs, plus the averaged editing mask and the pass trace. Complete and
// immutable once the pass finishes; any number of edit passes may consume
// it concurrently.
class SourceCache {
public:
    SourceCache() = default;
    SourceCache(int total_steps, std::vector<int> block_subset, int branches);

    void put(int step, int layer, int branch, QkvTriple triple);
    const QkvTriple& at(int step, int layer, int branch) const;
    bool has(int step, int layer, int branch) const;

    bool complete() const;
    size_t entry_count() const { return filled_; }
    size_t expected_count() const { return size_t(total_steps_) * subset_.size() * size_t(branches_); }
    uint64_t content_hash() const;

    int total_steps() const { return total_steps_; }
    int branches() const { return branches_; }
    const std::vector<int>& block_subset() const { return subset_; }

    void save(const std::filesystem::path& dir, const Schedule& sched) const;
    static SourceCache load(const std::filesystem::path& dir);

    EditMask mask;
    Trace trace;
    Tensor prompt_emb;
    std::string prompt;
    int nfe = 0;

private:
    int total_steps_ = 0;
    int branches_ = 1;
    std::vector<int> subset_;
    std::vector<QkvTriple> entries_;  // [step-1][subset pos][branch], step-contiguous
    std::vector<uint8_t> present_;
    size_t filled_ = 0;

    size_t index_of(int step, int layer, int branch) const;
};

struct SessionConfig {
    ModelConfig model;
    Schedule schedule = Schedule::uniform(kDefaultSteps);
    GuidanceConfig guidance;
    std::vector<int> block_subset;  // empty = all layers
    float mask_threshold = kDefaultMaskThreshold;
    uint64_t embed_seed = 0;

    std::vector<int> resolved_subset() const;
    void validate() const;
};

struct EditRequest {
    std::string target_prompt;
    std::vector<std::string> edit_words;
    double alpha = kAlphaStructurePreserving;
    ControlMode mode = ControlMode::ConsistEdit;
    GuidanceConfig guidance;
    std::optional<EditMask> external_mask;  // overrides the cached mask
    // Diagnostic sub-mode: also source the text rows, making an alpha = 1
    // all-ones-mask star edit reproduce the source rollout bitwise.
    bool diag_swap_text = false;
};

// Called after fusion at every (step, layer) of every branch.
using FusionObserver =
    std::function<void(const QkvTriple& fused, const QkvTriple& target, int layer, int step, int branch)>;

// Full sampling pass with a recording controller: caches every in-subset
// QkvTriple and accumulates the editing mask for edit_words (conditional
// branch), all within the pass itself — no extra model evaluations.
SourceCache run_source(const ToyMmdit& model, const SessionConfig& cfg, const Tensor& z_T,
                       const std::string& source_prompt,
                       const std::vector<std::string>& edit_words);

struct EditResult {
    Tensor z0;
    Trace trace;
    int nfe = 0;
    EditMask mask_used;
    SourceCache next_cache;  // recorded during the pass for multi-round chaining
};

// Samples from the cache's own z_T with a fusion controller; mask
// precedence: external > cached. next_edit_words select the mask to
// accumulate for the following round.
EditResult run_edit(const ToyMmdit& model, const SessionConfig& cfg, const SourceCache& cache,
                    const EditRequest& request,
                    const std::vector<std::string>* next_edit_words = nullptr,
                    const FusionObserver* observer = nullptr);

// Chains edits: each round's recorded triples become the next round's
// source cache, so the latents never get re-inverted and total NFE stays
// (rounds + 1) * NFE(single pass).
std::vector<EditResult> multi_round(const ToyMmdit& model, const SessionConfig& cfg,
                                    const Tensor& z_T, const std::string& source_prompt,
                                    const std::vector<EditRequest>& requests);

// patchify -> invert -> run_source from the recovered noise -> run_edit ->
// unpatchify. Inversion runs without guidance.
Tensor edit_real(const ToyMmdit& model, const SessionConfig& cfg, const Tensor& input_image,
                 const std::string& source_prompt, const EditRequest& request,
                 int invert_refine = kDefaultInvertRefine);

// Indices of the edit words in the prompt's whitespace tokens (all
// occurrences). Throws when a requested word does not appear.
std::vector<int> match_word_indices(const std::string& prompt,
                                    const std::vector<std::string>& edit_words);

}  // namespace cted
