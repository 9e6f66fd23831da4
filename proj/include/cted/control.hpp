#pragma once

#include <string>
#include <vector>

#include "cted/mask.hpp"
#include "cted/model.hpp"

namespace cted {

enum class ControlMode {
    None,
    BaselineKV,       // output-level K/V swap with masked attentions
    StructureFusion,  // source Q,K into the edit region during active steps
    ConsistEdit,      // structure fusion + source Q,K,V into non-edit rows
    ConsistEditStar,  // ConsistEdit that also transfers edit-region V when active
};

ControlMode control_mode_from_string(const std::string& s);
std::string control_mode_to_string(ControlMode m);

struct ControlConfig {
    ControlMode mode = ControlMode::ConsistEdit;
    std::vector<int> block_subset;  // empty = all layers

    bool layer_active(int layer) const;
    void validate(int layers) const;
};

// "all" | "last-half" | comma list of layer indices.
std::vector<int> parse_block_subset(const std::string& spec, int layers);

// Inputs to one fusion call at (step, layer). Fusion is applied to the
// un-headed token matrices, strictly on vision rows.
struct FusionContext {
    int step = 0;         // t, counts down T..1
    int total_steps = 0;  // T
    double alpha = 1.0;   // consistency strength
    const EditMask* mask = nullptr;
    const QkvTriple* source = nullptr;  // cached source triple at (step, layer)

    void validate(const QkvTriple& target) const;
};

// Vision rows from source, text rows from target, per q/k/v independently.
QkvTriple make_hat(const QkvTriple& source, const QkvTriple& target);

// Structure injection is active iff t > (1 - alpha) * T (strict).
bool schedule_active(int step, int total_steps, double alpha);

// Active: edit-region Q,K vision rows from the source hat; V untouched.
QkvTriple fuse_structure(const FusionContext& ctx, const QkvTriple& target);

// Adds content preservation: non-edit Q,K,V vision rows always come from
// the source hat; the V rule carries no step condition.
QkvTriple fuse_consistedit(const FusionContext& ctx, const QkvTriple& target);

// Like fuse_consistedit, but active steps also transfer edit-region V, so
// alpha = 1 reproduces the source when prompts match.
QkvTriple fuse_consistedit_star(const FusionContext& ctx, const QkvTriple& target);

// Output-level control: f_o = Attention(Q_tg, K_s, V_s | m_c) and
// f_b = Attention(Q_tg, K_s, V_s | 1-m_c); vision rows of the result are
// blended by m_attn, text rows follow f_o. K_s, V_s are taken from
// ctx.source. Returns the pre-output-projection attention matrix.
Tensor baseline_kv(const FusionContext& ctx, const QkvTriple& target,
                   const std::vector<uint8_t>& m_c, const std::vector<uint8_t>& m_attn, int heads);

// (1-M) .* source + M .* edited with a binary pixel mask (h x w),
// broadcast over channels.
Tensor hard_blend(const Tensor& source_img, const Tensor& edited_img, const Tensor& pixel_mask);

}  // namespace cted
