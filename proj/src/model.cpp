#include "cted/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "cted/keyval.hpp"

namespace cted {

void ModelConfig::validate() const {
    // layers = 0 is the degenerate head-only model, useful in tests.
    if (layers < 0) throw ConfigError("layers must be >= 0");
    if (dim <= 0 || heads <= 0 || text_len <= 0 || grid_h <= 0 || grid_w <= 0 || patch <= 0 ||
        channels <= 0) {
        throw ConfigError("model dims must be positive");
    }
    if (dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (patch_dim() > dim) {
        throw ConfigError("patch*patch*channels must not exceed dim (invertible projection)");
    }
}

namespace {

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    Tensor out = a;
    const size_t n = a.dim(1);
    for (size_t i = 0; i < a.dim(0); ++i) {
        float* r = out.row(i);
        for (size_t j = 0; j < n; ++j) r[j] += bias[j];
    }
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out = a;
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = double(out[i]);
        out[i] = float(x / (1.0 + std::exp(-x)));
    }
    return out;
}

Tensor scaled_randn(Prng& prng, std::vector<size_t> dims, float scale) {
    Tensor t = randn(prng, std::move(dims));
    for (size_t i = 0; i < t.size(); ++i) t[i] *= scale;
    return t;
}

// Row softmax over attendable entries; weights of unattendable entries are 0.
void masked_row_softmax(const std::vector<float>& logits, const std::vector<uint8_t>& ok,
                        int split, std::vector<float>& w) {
    const size_t n = logits.size();
    w.assign(n, 0.0f);
    float mx = -std::numeric_limits<float>::infinity();
    size_t attendable = 0;
    for (size_t j = 0; j < n; ++j) {
        if (!ok[j]) continue;
        ++attendable;
        mx = std::max(mx, logits[j]);
    }
    if (attendable == 0) {
        if (split <= 0) throw ContractError("attention row has no attendable keys and no text keys");
        const float u = 1.0f / float(split);
        for (int j = 0; j < split; ++j) w[size_t(j)] = u;
        return;
    }
    float sum = 0.0f;
    for (size_t j = 0; j < n; ++j) {
        if (!ok[j]) continue;
        w[j] = float(std::exp(double(logits[j]) - double(mx)));
        sum += w[j];
    }
    for (size_t j = 0; j < n; ++j) {
        if (ok[j]) w[j] /= sum;
    }
}

void check_triple_shape(const QkvTriple& t, size_t rows, size_t cols, int split,
                        const char* what) {
    if (t.q.rank() != 2 || !t.q.same_shape(t.k) || !t.q.same_shape(t.v) || t.q.dim(0) != rows ||
        t.q.dim(1) != cols || t.split != split) {
        throw ContractError(std::string(what) + ": triple shape/split mismatch");
    }
}

}  // namespace

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
    if (top.rank() != 2 || bottom.rank() != 2 || top.dim(1) != bottom.dim(1)) {
        throw ShapeError("concat_rows expects rank-2 tensors of equal width");
    }
    Tensor out(top.dim(0) + bottom.dim(0), top.dim(1));
    std::memcpy(out.data(), top.data(), top.size() * sizeof(float));
    std::memcpy(out.data() + top.size(), bottom.data(), bottom.size() * sizeof(float));
    return out;
}

Tensor positional_encoding(int rows, int dim) {
    Tensor pe{size_t(rows), size_t(dim)};
    for (int pos = 0; pos < rows; ++pos) {
        for (int j = 0; j < dim; j += 2) {
            const double angle = double(pos) / std::pow(10000.0, double(j) / double(dim));
            pe.at(size_t(pos), size_t(j)) = float(std::sin(angle));
            if (j + 1 < dim) pe.at(size_t(pos), size_t(j + 1)) = float(std::cos(angle));
        }
    }
    return pe;
}

Tensor sinusoidal_step_embedding(int step, int dim) {
    Tensor e{size_t(1), size_t(dim)};
    for (int j = 0; j < dim; j += 2) {
        const double angle = double(step) / std::pow(10000.0, double(j) / double(dim));
        e[size_t(j)] = float(std::sin(angle));
        if (j + 1 < dim) e[size_t(j + 1)] = float(std::cos(angle));
    }
    return e;
}

Tensor word_vector(const std::string& word, int dim, uint64_t seed) {
    Prng prng(fnv1a64(word) ^ seed);
    return randn(prng, {size_t(dim)});
}

Tensor embed_prompt(const std::string& prompt, const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const std::vector<std::string> words = split_whitespace(prompt);
    if (int(words.size()) > cfg.text_len) {
        throw ConfigError("prompt has " + std::to_string(words.size()) + " words, text_len is " +
                          std::to_string(cfg.text_len));
    }
    Tensor out{size_t(cfg.text_len), size_t(cfg.dim)};
    for (size_t i = 0; i < words.size(); ++i) {
        const Tensor row = word_vector(words[i], cfg.dim, seed);
        std::memcpy(out.row(i), row.data(), size_t(cfg.dim) * sizeof(float));
    }
    const Tensor pe = positional_encoding(cfg.text_len, cfg.dim);
    for (size_t i = 0; i < out.size(); ++i) out[i] += pe[i];
    return out;
}

ToyMmdit::ToyMmdit(const ModelConfig& cfg, uint64_t weight_seed, float block_scale) : cfg_(cfg) {
    cfg_.validate();
    const size_t d = size_t(cfg.dim);
    Prng prng(weight_seed);
    blocks_.reserve(size_t(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        BlockWeights b;
        b.norm1_gain = Tensor::filled({d}, 1.0f);
        b.norm1_bias = Tensor({d});
        b.norm2_gain = Tensor::filled({d}, 1.0f);
        b.norm2_bias = Tensor({d});
        b.mod_w1 = scaled_randn(prng, {d, d}, block_scale);
        b.mod_b1 = Tensor({d});
        b.mod_w2 = scaled_randn(prng, {d, 2 * d}, block_scale);
        b.mod_b2 = Tensor({2 * d});
        b.wq = scaled_randn(prng, {d, d}, block_scale);
        b.wk = scaled_randn(prng, {d, d}, block_scale);
        b.wv = scaled_randn(prng, {d, d}, block_scale);
        b.wo = scaled_randn(prng, {d, d}, block_scale);
        b.ff_w1 = scaled_randn(prng, {d, 4 * d}, block_scale);
        b.ff_w2 = scaled_randn(prng, {4 * d, d}, block_scale);
        blocks_.push_back(std::move(b));
    }
    head_w_ = scaled_randn(prng, {d, d}, block_scale);
    head_b_ = Tensor({d});
    const float patch_scale = float(1.0 / std::sqrt(double(cfg.patch_dim())));
    patch_w_ = scaled_randn(prng, {size_t(cfg.patch_dim()), d}, patch_scale);
    compute_patch_pinv();
}

void ToyMmdit::compute_patch_pinv() {
    // Right inverse of the (full row rank) patch projection:
    // pinv = W^T (W W^T)^-1, computed in double via Gauss-Jordan.
    const int p = cfg_.patch_dim();
    const int d = cfg_.dim;
    std::vector<double> g(size_t(p) * size_t(p), 0.0);
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < p; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                acc += double(patch_w_.at(size_t(i), size_t(c))) * double(patch_w_.at(size_t(j), size_t(c)));
            }
            g[size_t(i) * size_t(p) + size_t(j)] = acc;
        }
    }
    std::vector<double> inv(size_t(p) * size_t(p), 0.0);
    for (int i = 0; i < p; ++i) inv[size_t(i) * size_t(p) + size_t(i)] = 1.0;
    for (int col = 0; col < p; ++col) {
        int pivot = col;
        for (int r = col + 1; r < p; ++r) {
            if (std::abs(g[size_t(r) * size_t(p) + size_t(col)]) >
                std::abs(g[size_t(pivot) * size_t(p) + size_t(col)])) {
                pivot = r;
            }
        }
        if (std::abs(g[size_t(pivot) * size_t(p) + size_t(col)]) < 1e-12) {
            throw ContractError("patch projection is rank-deficient");
        }
        if (pivot != col) {
            for (int c = 0; c < p; ++c) {
                std::swap(g[size_t(pivot) * size_t(p) + size_t(c)], g[size_t(col) * size_t(p) + size_t(c)]);
                std::swap(inv[size_t(pivot) * size_t(p) + size_t(c)], inv[size_t(col) * size_t(p) + size_t(c)]);
            }
        }
        const double piv = g[size_t(col) * size_t(p) + size_t(col)];
        for (int c = 0; c < p; ++c) {
            g[size_t(col) * size_t(p) + size_t(c)] /= piv;
            inv[size_t(col) * size_t(p) + size_t(c)] /= piv;
        }
        for (int r = 0; r < p; ++r) {
            if (r == col) continue;
            const double f = g[size_t(r) * size_t(p) + size_t(col)];
            if (f == 0.0) continue;
            for (int c = 0; c < p; ++c) {
                g[size_t(r) * size_t(p) + size_t(c)] -= f * g[size_t(col) * size_t(p) + size_t(c)];
                inv[size_t(r) * size_t(p) + size_t(c)] -= f * inv[size_t(col) * size_t(p) + size_t(c)];
            }
        }
    }
    patch_pinv_ = Tensor(size_t(d), size_t(p));
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < p; ++c) {
            double acc = 0.0;
            for (int i = 0; i < p; ++i) {
                acc += double(patch_w_.at(size_t(i), size_t(r))) * inv[size_t(i) * size_t(p) + size_t(c)];
            }
            patch_pinv_.at(size_t(r), size_t(c)) = float(acc);
        }
    }
}

QkvTriple ToyMmdit::pre_attention(int layer, const TokenBatch& tokens, int step) const {
    if (layer < 0 || layer >= cfg_.layers) throw ShapeError("layer out of range");
    const BlockWeights& b = blocks_[size_t(layer)];
    const Tensor x = concat_rows(tokens.text, tokens.vision);
    Tensor h = layer_norm(x, b.norm1_gain, b.norm1_bias);

    const Tensor se = sinusoidal_step_embedding(step, cfg_.dim);
    const Tensor m1 = silu(add_rowvec(matmul(se, b.mod_w1), b.mod_b1));
    const Tensor ms = add_rowvec(matmul(m1, b.mod_w2), b.mod_b2);  // 1 x 2d: [scale, shift]
    const size_t d = size_t(cfg_.dim);
    for (size_t i = 0; i < h.dim(0); ++i) {
        float* r = h.row(i);
        for (size_t j = 0; j < d; ++j) {
            r[j] = r[j] * (1.0f + ms[j]) + ms[d + j];
        }
    }
    QkvTriple out;
    out.q = matmul(h, b.wq);
    out.k = matmul(h, b.wk);
    out.v = matmul(h, b.wv);
    out.split = cfg_.text_len;
    return out;
}

Tensor multi_head_attention(const QkvTriple& qkv, int heads,
                            const std::vector<uint8_t>* vision_key_mask) {
    const size_t n = qkv.q.dim(0);
    const size_t d = qkv.q.dim(1);
    if (heads <= 0 || d % size_t(heads) != 0) throw ShapeError("heads must divide dim");
    if (vision_key_mask && vision_key_mask->size() != n - size_t(qkv.split)) {
        throw ShapeError("vision key mask length mismatch");
    }
    const size_t dh = d / size_t(heads);
    const float scale = float(1.0 / std::sqrt(double(dh)));

    std::vector<uint8_t> ok(n, 1);
    if (vision_key_mask) {
        for (size_t j = size_t(qkv.split); j < n; ++j) ok[j] = (*vision_key_mask)[j - size_t(qkv.split)];
    }

    Tensor out(n, d);
    std::vector<float> logits(n), w(n);
    for (int h = 0; h < heads; ++h) {
        const size_t c0 = size_t(h) * dh;
        for (size_t i = 0; i < n; ++i) {
            const float* qi = qkv.q.row(i) + c0;
            for (size_t j = 0; j < n; ++j) {
                if (!ok[j]) {
                    logits[j] = -std::numeric_limits<float>::infinity();
                    continue;
                }
                const float* kj = qkv.k.row(j) + c0;
                float acc = 0.0f;
                for (size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                logits[j] = acc * scale;
            }
            masked_row_softmax(logits, ok, qkv.split, w);
            float* oi = out.row(i) + c0;
            for (size_t c = 0; c < dh; ++c) {
                float acc = 0.0f;
                for (size_t j = 0; j < n; ++j) {
                    if (w[j] != 0.0f) acc += w[j] * (qkv.v.row(j) + c0)[c];
                }
                oi[c] = acc;
            }
        }
    }
    return out;
}

Tensor attention_weights(const QkvTriple& qkv, int heads) {
    const size_t n = qkv.q.dim(0);
    const size_t d = qkv.q.dim(1);
    if (heads <= 0 || d % size_t(heads) != 0) throw ShapeError("heads must divide dim");
    const size_t dh = d / size_t(heads);
    const float scale = float(1.0 / std::sqrt(double(dh)));
    const std::vector<uint8_t> ok(n, 1);

    Tensor out({size_t(heads), n, n});
    std::vector<float> logits(n), w(n);
    for (int h = 0; h < heads; ++h) {
        const size_t c0 = size_t(h) * dh;
        for (size_t i = 0; i < n; ++i) {
            const float* qi = qkv.q.row(i) + c0;
            for (size_t j = 0; j < n; ++j) {
                const float* kj = qkv.k.row(j) + c0;
                float acc = 0.0f;
                for (size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                logits[j] = acc * scale;
            }
            masked_row_softmax(logits, ok, qkv.split, w);
            for (size_t j = 0; j < n; ++j) out.at(size_t(h), i, j) = w[j];
        }
    }
    return out;
}

TokenBatch ToyMmdit::block_forward(int layer, const TokenBatch& tokens, int step,
                                   AttentionController* controller) const {
    const BlockWeights& b = blocks_[size_t(layer)];
    const size_t n = size_t(cfg_.n_tokens());
    const size_t d = size_t(cfg_.dim);

    QkvTriple qkv = pre_attention(layer, tokens, step);
    QkvTriple fused = controller ? controller->on_qkv(qkv, layer, step) : std::move(qkv);
    if (controller) check_triple_shape(fused, n, d, cfg_.text_len, "controller on_qkv");

    Tensor attn;
    std::optional<Tensor> replaced =
        controller ? controller->override_attention(fused, layer, step) : std::nullopt;
    if (replaced) {
        if (replaced->rank() != 2 || replaced->dim(0) != n || replaced->dim(1) != d) {
            throw ContractError("controller override_attention: bad output shape");
        }
        attn = std::move(*replaced);
    } else {
        attn = multi_head_attention(fused, cfg_.heads);
    }

    Tensor x = concat_rows(tokens.text, tokens.vision);
    const Tensor attn_proj = matmul(attn, b.wo);
    for (size_t i = 0; i < x.size(); ++i) x[i] += attn_proj[i];

    const Tensor h2 = layer_norm(x, b.norm2_gain, b.norm2_bias);
    const Tensor ff = matmul(silu(matmul(h2, b.ff_w1)), b.ff_w2);
    for (size_t i = 0; i < x.size(); ++i) x[i] += ff[i];

    TokenBatch out;
    out.text = Tensor(size_t(cfg_.text_len), d);
    out.vision = Tensor(size_t(cfg_.n_vis()), d);
    std::memcpy(out.text.data(), x.data(), out.text.size() * sizeof(float));
    std::memcpy(out.vision.data(), x.data() + out.text.size(), out.vision.size() * sizeof(float));
    return out;
}

Tensor ToyMmdit::forward(const Tensor& z, const Tensor& prompt_emb, int step,
                         AttentionController* controller) const {
    if (z.rank() != 2 || int(z.dim(0)) != cfg_.n_vis() || int(z.dim(1)) != cfg_.dim) {
        throw ShapeError("forward: z must be n_vis x dim");
    }
    if (prompt_emb.rank() != 2 || int(prompt_emb.dim(0)) != cfg_.text_len ||
        int(prompt_emb.dim(1)) != cfg_.dim) {
        throw ShapeError("forward: prompt_emb must be text_len x dim");
    }
    TokenBatch tb{prompt_emb, z};
    for (int l = 0; l < cfg_.layers; ++l) {
        tb = block_forward(l, tb, step, controller);
    }
    return add_rowvec(matmul(tb.vision, head_w_), head_b_);
}

Tensor ToyMmdit::patchify(const Tensor& image) const {
    if (image.rank() != 3 || int(image.dim(0)) != cfg_.image_h() ||
        int(image.dim(1)) != cfg_.image_w() || int(image.dim(2)) != cfg_.channels) {
        throw ShapeError("patchify: image must be (grid_h*patch) x (grid_w*patch) x channels");
    }
    const int p = cfg_.patch;
    Tensor flat{size_t(cfg_.n_vis()), size_t(cfg_.patch_dim())};
    for (int gy = 0; gy < cfg_.grid_h; ++gy) {
        for (int gx = 0; gx < cfg_.grid_w; ++gx) {
            float* r = flat.row(size_t(gy * cfg_.grid_w + gx));
            size_t c = 0;
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    for (int ch = 0; ch < cfg_.channels; ++ch) {
                        r[c++] = image.at(size_t(gy * p + dy), size_t(gx * p + dx), size_t(ch));
                    }
                }
            }
        }
    }
    return matmul(flat, patch_w_);
}

Tensor ToyMmdit::unpatchify(const Tensor& tokens) const {
    if (tokens.rank() != 2 || int(tokens.dim(0)) != cfg_.n_vis() || int(tokens.dim(1)) != cfg_.dim) {
        throw ShapeError("unpatchify: tokens must be n_vis x dim");
    }
    const Tensor flat = matmul(tokens, patch_pinv_);
    const int p = cfg_.patch;
    Tensor image({size_t(cfg_.image_h()), size_t(cfg_.image_w()), size_t(cfg_.channels)});
    for (int gy = 0; gy < cfg_.grid_h; ++gy) {
        for (int gx = 0; gx < cfg_.grid_w; ++gx) {
            const float* r = flat.row(size_t(gy * cfg_.grid_w + gx));
            size_t c = 0;
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    for (int ch = 0; ch < cfg_.channels; ++ch) {
                        image.at(size_t(gy * p + dy), size_t(gx * p + dx), size_t(ch)) = r[c++];
                    }
                }
            }
        }
    }
    return image;
}

namespace {

std::vector<std::pair<std::string, Tensor BlockWeights::*>> block_tensor_fields() {
    return {
        {"norm1_gain", &BlockWeights::norm1_gain}, {"norm1_bias", &BlockWeights::norm1_bias},
        {"norm2_gain", &BlockWeights::norm2_gain}, {"norm2_bias", &BlockWeights::norm2_bias},
        {"mod_w1", &BlockWeights::mod_w1},         {"mod_b1", &BlockWeights::mod_b1},
        {"mod_w2", &BlockWeights::mod_w2},         {"mod_b2", &BlockWeights::mod_b2},
        {"wq", &BlockWeights::wq},                 {"wk", &BlockWeights::wk},
        {"wv", &BlockWeights::wv},                 {"wo", &BlockWeights::wo},
        {"ff_w1", &BlockWeights::ff_w1},           {"ff_w2", &BlockWeights::ff_w2},
    };
}

}  // namespace

void ToyMmdit::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    KeyValueFile manifest;
    manifest.set_int("layers", cfg_.layers);
    manifest.set_int("dim", cfg_.dim);
    manifest.set_int("heads", cfg_.heads);
    manifest.set_int("text_len", cfg_.text_len);
    manifest.set("grid", std::to_string(cfg_.grid_h) + "x" + std::to_string(cfg_.grid_w));
    manifest.set_int("patch", cfg_.patch);
    manifest.set_int("channels", cfg_.channels);
    manifest.write_file(dir / "model_manifest.txt");
    for (int l = 0; l < cfg_.layers; ++l) {
        for (const auto& [name, field] : block_tensor_fields()) {
            save_tensor(dir / ("blk" + std::to_string(l) + "_" + name + ".cted"),
                        blocks_[size_t(l)].*field);
        }
    }
    save_tensor(dir / "head_w.cted", head_w_);
    save_tensor(dir / "head_b.cted", head_b_);
    save_tensor(dir / "patch_w.cted", patch_w_);
    save_tensor(dir / "patch_pinv.cted", patch_pinv_);
}

ToyMmdit ToyMmdit::load(const std::filesystem::path& dir) {
    const KeyValueFile manifest = KeyValueFile::parse_file(dir / "model_manifest.txt");
    ToyMmdit m;
    m.cfg_.layers = int(manifest.require_int("layers"));
    m.cfg_.dim = int(manifest.require_int("dim"));
    m.cfg_.heads = int(manifest.require_int("heads"));
    m.cfg_.text_len = int(manifest.require_int("text_len"));
    const auto grid = split_on(manifest.require("grid"), 'x');
    if (grid.size() != 2) throw ConfigError("grid must look like 8x8");
    m.cfg_.grid_h = std::stoi(grid[0]);
    m.cfg_.grid_w = std::stoi(grid[1]);
    m.cfg_.patch = int(manifest.require_int("patch"));
    m.cfg_.channels = int(manifest.require_int("channels"));
    m.cfg_.validate();
    m.blocks_.resize(size_t(m.cfg_.layers));
    for (int l = 0; l < m.cfg_.layers; ++l) {
        for (const auto& [name, field] : block_tensor_fields()) {
            m.blocks_[size_t(l)].*field =
                load_tensor(dir / ("blk" + std::to_string(l) + "_" + name + ".cted"));
        }
    }
    m.head_w_ = load_tensor(dir / "head_w.cted");
    m.head_b_ = load_tensor(dir / "head_b.cted");
    m.patch_w_ = load_tensor(dir / "patch_w.cted");
    m.patch_pinv_ = load_tensor(dir / "patch_pinv.cted");
    return m;
}

}  // namespace cted
