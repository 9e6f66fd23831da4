#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cted/tensor.hpp"

namespace cted {

inline constexpr float kDefaultMaskThreshold = 0.1f;

// Per-vision-token editing mask. binary[j] = 1 iff scores[j] >= threshold.
struct EditMask {
    std::vector<float> scores;    // in [0, 1]
    std::vector<uint8_t> binary;  // {0, 1}
    float threshold = kDefaultMaskThreshold;
    std::vector<int> word_indices;

    size_t size() const { return binary.size(); }
    size_t count_set() const;
    static EditMask all_ones(size_t n);
    static EditMask all_zeros(size_t n);
    void validate() const;
};

// Running sum of vision->word attention, averaged at finalize. Single
// writer during the source pass; the finalized mask is immutable.
class AttentionAccumulator {
public:
    explicit AttentionAccumulator(int n_vis);

    // attn is post-softmax, rank-3 [heads, n, n] (or rank-2 [n, n] for a
    // single head); adds, for each vision query row j, the attention mass
    // it puts on the given text key columns, summed over heads.
    void accumulate(const Tensor& attn, const std::vector<int>& word_indices, int split);

    // Mean over contributions, max-normalized, thresholded to binary.
    EditMask finalize(float threshold = kDefaultMaskThreshold) const;

    int count() const { return count_; }
    int n_vis() const { return int(sum_.size()); }

private:
    std::vector<float> sum_;
    int count_ = 0;
};

// Binary OR; scores are the elementwise max. Inputs must share a length;
// the result carries the max input threshold (inputs sharing one threshold
// preserve the binary/scores invariant).
EditMask union_masks(const std::vector<EditMask>& masks);

// CTED tensor of total length n_vis; values clamped to [0,1] and
// thresholded at 0.5.
EditMask load_external_mask(const std::filesystem::path& path, int n_vis);

void save_mask(const std::filesystem::path& path, const EditMask& mask);

}  // namespace cted
