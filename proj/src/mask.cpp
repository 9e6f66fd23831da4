#include "cted/mask.hpp"

#include <algorithm>

namespace cted {

size_t EditMask::count_set() const {
    size_t n = 0;
    for (uint8_t b : binary) n += b;
    return n;
}

EditMask EditMask::all_ones(size_t n) {
    EditMask m;
    m.scores.assign(n, 1.0f);
    m.binary.assign(n, 1);
    return m;
}

EditMask EditMask::all_zeros(size_t n) {
    EditMask m;
    m.scores.assign(n, 0.0f);
    m.binary.assign(n, 0);
    return m;
}

void EditMask::validate() const {
    if (scores.size() != binary.size()) throw ContractError("mask scores/binary size mismatch");
    for (size_t j = 0; j < scores.size(); ++j) {
        const bool hit = scores[j] >= threshold;
        if (hit != (binary[j] != 0)) throw ContractError("mask binary/threshold invariant broken");
    }
}

AttentionAccumulator::AttentionAccumulator(int n_vis) {
    if (n_vis <= 0) throw ShapeError("accumulator needs a positive vision token count");
    sum_.assign(size_t(n_vis), 0.0f);
}

void AttentionAccumulator::accumulate(const Tensor& attn, const std::vector<int>& word_indices,
                                      int split) {
    if (word_indices.empty()) throw ContractError("accumulate: empty word index set");
    size_t heads = 1, n = 0;
    if (attn.rank() == 3) {
        heads = attn.dim(0);
        n = attn.dim(1);
        if (attn.dim(2) != n) throw ShapeError("accumulate: attention must be square");
    } else if (attn.rank() == 2) {
        n = attn.dim(0);
        if (attn.dim(1) != n) throw ShapeError("accumulate: attention must be square");
    } else {
        throw ShapeError("accumulate: attention must be rank 2 or 3");
    }
    if (size_t(split) + sum_.size() != n) throw ShapeError("accumulate: split/n_vis mismatch");
    for (int w : word_indices) {
        if (w < 0 || w >= split) throw ShapeError("accumulate: word index outside text rows");
    }
    for (size_t h = 0; h < heads; ++h) {
        for (size_t j = 0; j < sum_.size(); ++j) {
            const size_t qrow = size_t(split) + j;
            float add = 0.0f;
            for (int w : word_indices) {
                add += (attn.rank() == 3) ? attn.at(h, qrow, size_t(w)) : attn.at(qrow, size_t(w));
            }
            sum_[j] += add;
        }
    }
    ++count_;
}

EditMask AttentionAccumulator::finalize(float threshold) const {
    if (count_ == 0) throw ContractError("finalize: no contributions accumulated");
    EditMask m;
    m.threshold = threshold;
    m.scores.resize(sum_.size());
    float mx = 0.0f;
    for (size_t j = 0; j < sum_.size(); ++j) {
        m.scores[j] = sum_[j] / float(count_);
        mx = std::max(mx, m.scores[j]);
    }
    if (mx > 0.0f) {
        for (float& s : m.scores) s /= mx;
    }
    m.binary.resize(m.scores.size());
    for (size_t j = 0; j < m.scores.size(); ++j) m.binary[j] = m.scores[j] >= threshold ? 1 : 0;
    return m;
}

EditMask union_masks(const std::vector<EditMask>& masks) {
    if (masks.empty()) throw ContractError("union of zero masks");
    const size_t n = masks.front().size();
    EditMask out = EditMask::all_zeros(n);
    out.threshold = masks.front().threshold;
    for (const EditMask& m : masks) {
        if (m.size() != n) throw ShapeError("union: mask length mismatch");
        out.threshold = std::max(out.threshold, m.threshold);
        for (size_t j = 0; j < n; ++j) {
            out.scores[j] = std::max(out.scores[j], m.scores[j]);
            out.binary[j] = out.binary[j] | m.binary[j];
        }
        for (int w : m.word_indices) {
            if (std::find(out.word_indices.begin(), out.word_indices.end(), w) ==
                out.word_indices.end()) {
                out.word_indices.push_back(w);
            }
        }
    }
    std::sort(out.word_indices.begin(), out.word_indices.end());
    return out;
}

EditMask load_external_mask(const std::filesystem::path& path, int n_vis) {
    const Tensor t = load_tensor(path);
    if (int(t.size()) != n_vis) {
        throw ShapeError("external mask has " + std::to_string(t.size()) + " values, expected " +
                         std::to_string(n_vis));
    }
    EditMask m;
    m.threshold = 0.5f;
    m.scores.resize(size_t(n_vis));
    m.binary.resize(size_t(n_vis));
    for (int j = 0; j < n_vis; ++j) {
        const float v = std::clamp(t[size_t(j)], 0.0f, 1.0f);
        m.scores[size_t(j)] = v;
        m.binary[size_t(j)] = v >= 0.5f ? 1 : 0;
    }
    return m;
}

void save_mask(const std::filesystem::path& path, const EditMask& mask) {
    Tensor t({mask.size()});
    for (size_t j = 0; j < mask.size(); ++j) t[j] = float(mask.binary[j]);
    save_tensor(path, t);
}

}  // namespace cted
