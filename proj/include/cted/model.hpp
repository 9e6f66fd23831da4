#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cted/tensor.hpp"

namespace cted {

struct ModelConfig {
    int layers = 4;
    int dim = 32;
    int heads = 4;
    int text_len = 8;
    int grid_h = 8;
    int grid_w = 8;
    int patch = 2;
    int channels = 3;

    int n_vis() const { return grid_h * grid_w; }
    int n_tokens() const { return text_len + n_vis(); }
    int patch_dim() const { return patch * patch * channels; }
    int image_h() const { return grid_h * patch; }
    int image_w() const { return grid_w * patch; }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Text rows always precede vision rows; no op may permute across the split.
struct TokenBatch {
    Tensor text;    // text_len x dim
    Tensor vision;  // n_vis x dim
};

struct QkvTriple {
    Tensor q, k, v;  // (text_len + n_vis) x dim
    int split = 0;   // first vision row

    int rows() const { return int(q.dim(0)); }
    int cols() const { return int(q.dim(1)); }
    int n_vis() const { return rows() - split; }
};

// Pre-attention hook. on_qkv runs exactly once per block per evaluation and
// must be a pure function of its arguments plus read-only captured state.
// override_attention may replace the (pre-output-projection) attention
// result computed from the fused triple.
class AttentionController {
public:
    virtual ~AttentionController() = default;
    virtual QkvTriple on_qkv(const QkvTriple& qkv, int layer, int step) = 0;
    virtual std::optional<Tensor> override_attention(const QkvTriple& fused, int layer, int step) {
        (void)fused;
        (void)layer;
        (void)step;
        return std::nullopt;
    }
};

struct BlockWeights {
    Tensor norm1_gain, norm1_bias;
    Tensor norm2_gain, norm2_bias;
    Tensor mod_w1, mod_b1;  // dim x dim, dim
    Tensor mod_w2, mod_b2;  // dim x 2*dim, 2*dim
    Tensor wq, wk, wv, wo;  // dim x dim
    Tensor ff_w1, ff_w2;    // dim x 4*dim, 4*dim x dim
};

class ToyMmdit {
public:
    // Gaussian init of block/head weights at block_scale; the patch
    // projection keeps its own 1/sqrt(patch_dim) scale so patchify stays
    // invertible even for a zero-velocity model (block_scale = 0).
    ToyMmdit(const ModelConfig& cfg, uint64_t weight_seed, float block_scale = 0.02f);

    static ToyMmdit load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<BlockWeights>& blocks() const { return blocks_; }
    const Tensor& head_w() const { return head_w_; }
    const Tensor& head_b() const { return head_b_; }
    BlockWeights& block_mut(int layer) { return blocks_[size_t(layer)]; }
    Tensor& head_w_mut() { return head_w_; }

    // Rectified-flow velocity for the vision tokens. Text rows are
    // consumed, not emitted. Pure in (weights, z, prompt_emb, step).
    Tensor forward(const Tensor& z, const Tensor& prompt_emb, int step,
                   AttentionController* controller = nullptr) const;

    TokenBatch block_forward(int layer, const TokenBatch& tokens, int step,
                             AttentionController* controller) const;
    QkvTriple pre_attention(int layer, const TokenBatch& tokens, int step) const;

    // image is (grid_h*patch) x (grid_w*patch) x channels
    Tensor patchify(const Tensor& image) const;
    Tensor unpatchify(const Tensor& tokens) const;

private:
    ModelConfig cfg_;
    std::vector<BlockWeights> blocks_;
    Tensor head_w_, head_b_;
    Tensor patch_w_;     // patch_dim x dim
    Tensor patch_pinv_;  // dim x patch_dim

    ToyMmdit() = default;
    void compute_patch_pinv();
};

// Word -> d-dim Gaussian seeded by fnv1a64(word) ^ seed, unused slots zero,
// sinusoidal position encodings added everywhere. Throws ConfigError when
// the prompt has more than text_len whitespace words.
Tensor embed_prompt(const std::string& prompt, const ModelConfig& cfg, uint64_t seed);

// The position-independent embedding of one word.
Tensor word_vector(const std::string& word, int dim, uint64_t seed);

Tensor positional_encoding(int rows, int dim);
Tensor sinusoidal_step_embedding(int step, int dim);

// Joint multi-head attention over all rows at scale 1/sqrt(dim/heads).
// vision_key_mask, when given, has one entry per vision row; masked vision
// keys are unattendable (-inf logits) while text keys always stay
// attendable. A row left with no attendable key falls back to uniform
// attention over text keys, or throws when there are none.
Tensor multi_head_attention(const QkvTriple& qkv, int heads,
                            const std::vector<uint8_t>* vision_key_mask = nullptr);

// Post-softmax weights per head: rank-3 [heads, n, n].
Tensor attention_weights(const QkvTriple& qkv, int heads);

Tensor concat_rows(const Tensor& top, const Tensor& bottom);

}  // namespace cted
