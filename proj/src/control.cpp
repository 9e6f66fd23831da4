#include "cted/control.hpp"

#include <algorithm>
#include <cstring>

#include "cted/keyval.hpp"

namespace cted {

ControlMode control_mode_from_string(const std::string& s) {
    if (s == "none") return ControlMode::None;
    if (s == "kv") return ControlMode::BaselineKV;
    if (s == "structure") return ControlMode::StructureFusion;
    if (s == "consistedit") return ControlMode::ConsistEdit;
    if (s == "star") return ControlMode::ConsistEditStar;
    throw ConfigError("unknown mode: " + s + " (expected none|kv|structure|consistedit|star)");
}

std::string control_mode_to_string(ControlMode m) {
    switch (m) {
        case ControlMode::None: return "none";
        case ControlMode::BaselineKV: return "kv";
        case ControlMode::StructureFusion: return "structure";
        case ControlMode::ConsistEdit: return "consistedit";
        case ControlMode::ConsistEditStar: return "star";
    }
    throw ConfigError("bad mode value");
}

bool ControlConfig::layer_active(int layer) const {
    if (block_subset.empty()) return true;
    return std::find(block_subset.begin(), block_subset.end(), layer) != block_subset.end();
}

void ControlConfig::validate(int layers) const {
    for (int l : block_subset) {
        if (l < 0 || l >= layers) {
            throw ConfigError("block subset index " + std::to_string(l) + " outside [0, " +
                              std::to_string(layers) + ")");
        }
    }
}

std::vector<int> parse_block_subset(const std::string& spec, int layers) {
    if (spec.empty() || spec == "all") return {};
    std::vector<int> out;
    if (spec == "last-half") {
        for (int l = layers / 2; l < layers; ++l) out.push_back(l);
        return out;
    }
    for (const std::string& part : split_on(spec, ',')) {
        try {
            size_t pos = 0;
            int l = std::stoi(part, &pos);
            if (pos != part.size()) throw std::invalid_argument(part);
            out.push_back(l);
        } catch (const std::exception&) {
            throw ConfigError("bad block subset entry: " + part);
        }
    }
    ControlConfig check;
    check.block_subset = out;
    check.validate(layers);
    return out;
}

void FusionContext::validate(const QkvTriple& target) const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0, 1]");
    if (step < 1 || step > total_steps) throw ContractError("fusion step outside [1, T]");
    if (mask == nullptr || source == nullptr) throw ContractError("fusion context incomplete");
    if (int(mask->size()) != target.n_vis()) throw ShapeError("mask length != vision row count");
    if (!source->q.same_shape(target.q) || source->split != target.split) {
        throw ShapeError("source/target triple shapes differ");
    }
}

namespace {

void copy_row(Tensor& dst, const Tensor& src, size_t row) {
    std::memcpy(dst.row(row), src.row(row), dst.dim(1) * sizeof(float));
}

}  // namespace

QkvTriple make_hat(const QkvTriple& source, const QkvTriple& target) {
    if (source.q.rank() != 2 || !source.q.same_shape(target.q) || !source.k.same_shape(target.k) ||
        !source.v.same_shape(target.v) || source.split != target.split) {
        throw ShapeError("make_hat: shape/split mismatch");
    }
    QkvTriple hat = source;  // vision rows [split, end)
    hat.split = target.split;
    for (size_t i = 0; i < size_t(target.split); ++i) {
        copy_row(hat.q, target.q, i);
        copy_row(hat.k, target.k, i);
        copy_row(hat.v, target.v, i);
    }
    return hat;
}

bool schedule_active(int step, int total_steps, double alpha) {
    return double(step) > (1.0 - alpha) * double(total_steps);
}

QkvTriple fuse_structure(const FusionContext& ctx, const QkvTriple& target) {
    ctx.validate(target);
    if (!schedule_active(ctx.step, ctx.total_steps, ctx.alpha)) return target;
    const QkvTriple hat = make_hat(*ctx.source, target);
    QkvTriple out = target;
    const size_t split = size_t(target.split);
    for (size_t j = 0; j < ctx.mask->size(); ++j) {
        if (ctx.mask->binary[j]) {
            copy_row(out.q, hat.q, split + j);
            copy_row(out.k, hat.k, split + j);
        }
    }
    return out;
}

QkvTriple fuse_consistedit(const FusionContext& ctx, const QkvTriple& target) {
    ctx.validate(target);
    const bool active = schedule_active(ctx.step, ctx.total_steps, ctx.alpha);
    const QkvTriple hat = make_hat(*ctx.source, target);
    QkvTriple out = target;
    const size_t split = size_t(target.split);
    for (size_t j = 0; j < ctx.mask->size(); ++j) {
        const size_t row = split + j;
        if (ctx.mask->binary[j]) {
            if (active) {
                copy_row(out.q, hat.q, row);
                copy_row(out.k, hat.k, row);
            }
        } else {
            copy_row(out.q, hat.q, row);
            copy_row(out.k, hat.k, row);
            copy_row(out.v, hat.v, row);
        }
    }
    return out;
}

QkvTriple fuse_consistedit_star(const FusionContext& ctx, const QkvTriple& target) {
    QkvTriple out = fuse_consistedit(ctx, target);
    if (!schedule_active(ctx.step, ctx.total_steps, ctx.alpha)) return out;
    const size_t split = size_t(target.split);
    for (size_t j = 0; j < ctx.mask->size(); ++j) {
        if (ctx.mask->binary[j]) copy_row(out.v, ctx.source->v, split + j);
    }
    return out;
}

Tensor baseline_kv(const FusionContext& ctx, const QkvTriple& target,
                   const std::vector<uint8_t>& m_c, const std::vector<uint8_t>& m_attn, int heads) {
    if (ctx.source == nullptr) throw ContractError("baseline_kv: no source triple");
    if (!ctx.source->q.same_shape(target.q) || ctx.source->split != target.split) {
        throw ShapeError("baseline_kv: source/target mismatch");
    }
    const size_t n_vis = size_t(target.n_vis());
    if (m_c.size() != n_vis || m_attn.size() != n_vis) {
        throw ShapeError("baseline_kv: mask length != vision row count");
    }
    QkvTriple swapped;
    swapped.q = target.q;
    swapped.k = ctx.source->k;
    swapped.v = ctx.source->v;
    swapped.split = target.split;

    std::vector<uint8_t> inverse(n_vis);
    for (size_t j = 0; j < n_vis; ++j) inverse[j] = m_c[j] ? 0 : 1;

    const Tensor f_edit = multi_head_attention(swapped, heads, &m_c);
    const Tensor f_background = multi_head_attention(swapped, heads, &inverse);

    // Text rows follow the edit branch; vision rows blend by m_attn.
    Tensor out = f_edit;
    const size_t split = size_t(target.split);
    for (size_t j = 0; j < n_vis; ++j) {
        if (!m_attn[j]) copy_row(out, f_background, split + j);
    }
    return out;
}

Tensor hard_blend(const Tensor& source_img, const Tensor& edited_img, const Tensor& pixel_mask) {
    if (!source_img.same_shape(edited_img)) throw ShapeError("hard_blend: image shapes differ");
    if (pixel_mask.rank() != 2 || pixel_mask.dim(0) != source_img.dim(0) ||
        (source_img.rank() >= 2 && pixel_mask.dim(1) != source_img.dim(1))) {
        throw ShapeError("hard_blend: mask must be h x w");
    }
    const size_t channels = source_img.rank() == 3 ? source_img.dim(2) : 1;
    Tensor out = source_img;
    for (size_t y = 0; y < pixel_mask.dim(0); ++y) {
        for (size_t x = 0; x < pixel_mask.dim(1); ++x) {
            if (pixel_mask.at(y, x) == 0.0f) continue;
            for (size_t c = 0; c < channels; ++c) {
                const size_t idx = (y * pixel_mask.dim(1) + x) * channels + c;
                out[idx] = edited_img[idx];
            }
        }
    }
    return out;
}

}  // namespace cted
