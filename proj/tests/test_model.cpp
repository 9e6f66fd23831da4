#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "cted/model.hpp"

using namespace cted;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.text_len = 2;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    cfg.patch = 2;
    cfg.channels = 1;
    return cfg;
}

struct IdentityController : AttentionController {
    int calls = 0;
    QkvTriple on_qkv(const QkvTriple& qkv, int, int) override {
        ++calls;
        return qkv;
    }
};

struct ZeroVController : AttentionController {
    QkvTriple on_qkv(const QkvTriple& qkv, int, int) override {
        QkvTriple out = qkv;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = 0.0f;
        return out;
    }
};

struct ZeroAttnController : AttentionController {
    QkvTriple on_qkv(const QkvTriple& qkv, int, int) override { return qkv; }
    std::optional<Tensor> override_attention(const QkvTriple& fused, int, int) override {
        return Tensor(fused.q.dim(0), fused.q.dim(1));
    }
};

struct BadShapeController : AttentionController {
    QkvTriple on_qkv(const QkvTriple& qkv, int, int) override {
        QkvTriple out = qkv;
        out.q = Tensor(1, qkv.q.dim(1));
        return out;
    }
};

}  // namespace

TEST_CASE("embed_prompt shares vectors for repeated words") {
    const ModelConfig cfg;
    // The pre-position embedding of a repeated word is the same vector.
    CHECK(word_vector("cat", cfg.dim, 5).bitwise_equal(word_vector("cat", cfg.dim, 5)));
    CHECK_FALSE(word_vector("cat", cfg.dim, 5).bitwise_equal(word_vector("dog", cfg.dim, 5)));

    const Tensor emb = embed_prompt("cat cat dog", cfg, 5);
    const Tensor pe = positional_encoding(cfg.text_len, cfg.dim);
    const Tensor cat = word_vector("cat", cfg.dim, 5);
    for (size_t slot : {size_t(0), size_t(1)}) {
        for (size_t j = 0; j < size_t(cfg.dim); ++j) {
            CHECK(emb.at(slot, j) == cat[j] + pe.at(slot, j));
        }
    }
}

TEST_CASE("embed_prompt empty prompt is positions only") {
    const ModelConfig cfg;
    const Tensor emb = embed_prompt("", cfg, 5);
    CHECK(emb.bitwise_equal(positional_encoding(cfg.text_len, cfg.dim)));
}

TEST_CASE("embed_prompt rejects over-long prompts") {
    ModelConfig cfg;
    cfg.text_len = 2;
    CHECK_THROWS_AS(embed_prompt("one two three", cfg, 0), ConfigError);
}

TEST_CASE("embed_prompt golden fixture for horse under seed 0") {
    const fs::path path = fs::path(CTED_FIXTURE_DIR) / "golden" / "embed_horse_seed0.cted";
    REQUIRE(fs::exists(path));
    const Tensor emb = embed_prompt("horse", ModelConfig{}, 0);
    CHECK(emb.bitwise_equal(load_tensor(path)));
}

TEST_CASE("patchify round trip") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 11);

    Tensor zero({size_t(cfg.image_h()), size_t(cfg.image_w()), size_t(cfg.channels)});
    const Tensor zero_tokens = model.patchify(zero);
    CHECK(int(zero_tokens.dim(0)) == cfg.n_vis());
    for (size_t i = 0; i < zero_tokens.size(); ++i) CHECK(zero_tokens[i] == 0.0f);
    const Tensor zero_back = model.unpatchify(zero_tokens);
    for (size_t i = 0; i < zero_back.size(); ++i) CHECK(zero_back[i] == 0.0f);

    Prng prng(3);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor img = randn(prng, {size_t(cfg.image_h()), size_t(cfg.image_w()), size_t(cfg.channels)});
        for (size_t i = 0; i < img.size(); ++i) img[i] = std::fabs(img[i]) - std::floor(std::fabs(img[i]));
        const Tensor back = model.unpatchify(model.patchify(img));
        float max_err = 0.0f;
        for (size_t i = 0; i < img.size(); ++i) max_err = std::max(max_err, std::fabs(back[i] - img[i]));
        CHECK(max_err <= 1e-4f);
    }

    CHECK_THROWS_AS(model.patchify(Tensor({3, 3, 3})), ShapeError);
}

TEST_CASE("pre_attention zero weights give zero qkv") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 11, /*block_scale=*/0.0f);
    Prng prng(1);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const QkvTriple qkv = model.pre_attention(0, tokens, 5);
    CHECK(qkv.split == cfg.text_len);
    for (size_t i = 0; i < qkv.q.size(); ++i) {
        CHECK(qkv.q[i] == 0.0f);
        CHECK(qkv.k[i] == 0.0f);
        CHECK(qkv.v[i] == 0.0f);
    }
}

TEST_CASE("pre_attention split stays text_len on every layer") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 19);
    Prng prng(2);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(model.pre_attention(l, tokens, 3).split == cfg.text_len);
    }
}

TEST_CASE("pre_attention golden fixture") {
    const fs::path path = fs::path(CTED_FIXTURE_DIR) / "golden" / "preattn_l0.cted";
    REQUIRE(fs::exists(path));
    const ModelConfig cfg;
    const ToyMmdit model(cfg, 7);
    Prng noise(8);
    const Tensor z = randn(noise, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("a standing horse", cfg, 9);
    const QkvTriple qkv = model.pre_attention(0, {prompt, z}, 28);

    const Tensor want = load_tensor(path);
    REQUIRE(want.rank() == 3);
    const size_t plane = qkv.q.size();
    CHECK(std::memcmp(want.data(), qkv.q.data(), plane * sizeof(float)) == 0);
    CHECK(std::memcmp(want.data() + plane, qkv.k.data(), plane * sizeof(float)) == 0);
    CHECK(std::memcmp(want.data() + 2 * plane, qkv.v.data(), plane * sizeof(float)) == 0);
}

TEST_CASE("block_forward identity controller is transparent") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 23);
    Prng prng(4);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});

    IdentityController identity;
    const TokenBatch plain = model.block_forward(0, tokens, 7, nullptr);
    const TokenBatch hooked = model.block_forward(0, tokens, 7, &identity);
    CHECK(identity.calls == 1);
    CHECK(plain.text.bitwise_equal(hooked.text));
    CHECK(plain.vision.bitwise_equal(hooked.vision));
}

TEST_CASE("block_forward zero V equals zero attention override") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 29);
    Prng prng(5);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});

    ZeroVController zero_v;
    ZeroAttnController zero_attn;
    const TokenBatch a = model.block_forward(0, tokens, 7, &zero_v);
    const TokenBatch b = model.block_forward(0, tokens, 7, &zero_attn);
    CHECK(a.text.bitwise_equal(b.text));
    CHECK(a.vision.bitwise_equal(b.vision));
}

TEST_CASE("block_forward rejects controllers that break the contract") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 31);
    Prng prng(6);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    BadShapeController bad;
    CHECK_THROWS_AS(model.block_forward(0, tokens, 7, &bad), ContractError);
}

TEST_CASE("single-head attention matches a scalar oracle") {
    Prng prng(12);
    QkvTriple qkv;
    qkv.q = randn(prng, {3, 4});
    qkv.k = randn(prng, {3, 4});
    qkv.v = randn(prng, {3, 4});
    qkv.split = 1;
    const Tensor out = multi_head_attention(qkv, 1);

    const double scale = 1.0 / std::sqrt(4.0);
    for (size_t i = 0; i < 3; ++i) {
        double logits[3];
        for (size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (size_t c = 0; c < 4; ++c) acc += double(qkv.q.at(i, c)) * double(qkv.k.at(j, c));
            logits[j] = acc * scale;
        }
        const double mx = std::max({logits[0], logits[1], logits[2]});
        double w[3], sum = 0.0;
        for (size_t j = 0; j < 3; ++j) {
            w[j] = std::exp(logits[j] - mx);
            sum += w[j];
        }
        for (size_t j = 0; j < 3; ++j) w[j] /= sum;
        for (size_t c = 0; c < 4; ++c) {
            double want = 0.0;
            for (size_t j = 0; j < 3; ++j) want += w[j] * double(qkv.v.at(j, c));
            CHECK(std::abs(double(out.at(i, c)) - want) < 1e-5);
        }
    }
}

TEST_CASE("attention with all keys masked and no text rows throws") {
    Prng prng(13);
    QkvTriple qkv;
    qkv.q = randn(prng, {2, 4});
    qkv.k = randn(prng, {2, 4});
    qkv.v = randn(prng, {2, 4});
    qkv.split = 0;
    const std::vector<uint8_t> none(2, 0);
    CHECK_THROWS_AS(multi_head_attention(qkv, 1, &none), ContractError);
}

TEST_CASE("model_forward with zero layers is the head alone") {
    ModelConfig cfg = tiny_config();
    cfg.layers = 0;
    const ToyMmdit model(cfg, 37);
    Prng prng(7);
    const Tensor z = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("x", cfg, 0);
    const Tensor v = model.forward(z, prompt, 1);
    const Tensor want = matmul(z, model.head_w());
    CHECK(v.bitwise_equal(want));  // head bias is zero-initialized
}

TEST_CASE("model_forward purity") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 41);
    Prng prng(8);
    const Tensor z = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("a b", cfg, 1);
    const Tensor v1 = model.forward(z, prompt, 14);
    const Tensor v2 = model.forward(z, prompt, 14);
    CHECK(v1.bitwise_equal(v2));
}

TEST_CASE("model_forward golden fixture") {
    const fs::path path = fs::path(CTED_FIXTURE_DIR) / "golden" / "velocity_t28.cted";
    REQUIRE(fs::exists(path));
    const ModelConfig cfg;
    const ToyMmdit model(cfg, 7);
    Prng noise(8);
    const Tensor z = randn(noise, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("a standing horse", cfg, 9);
    CHECK(model.forward(z, prompt, 28).bitwise_equal(load_tensor(path)));
}

TEST_CASE("weight bundle save/load round trip") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 47);
    const fs::path dir = fs::temp_directory_path() / "cted_model_bundle";
    fs::remove_all(dir);
    model.save(dir);
    const ToyMmdit loaded = ToyMmdit::load(dir);
    CHECK(loaded.config() == cfg);

    Prng prng(9);
    const Tensor z = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("same words", cfg, 2);
    CHECK(model.forward(z, prompt, 3).bitwise_equal(loaded.forward(z, prompt, 3)));
}

TEST_CASE("vision token count is conserved through blocks") {
    const ModelConfig cfg = tiny_config();
    const ToyMmdit model(cfg, 53);
    Prng prng(10);
    TokenBatch tokens;
    tokens.text = randn(prng, {size_t(cfg.text_len), size_t(cfg.dim)});
    tokens.vision = randn(prng, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    for (int l = 0; l < cfg.layers; ++l) {
        tokens = model.block_forward(l, tokens, 2, nullptr);
        CHECK(int(tokens.vision.dim(0)) == cfg.n_vis());
        CHECK(int(tokens.text.dim(0)) == cfg.text_len);
    }
}

TEST_CASE("model config validation") {
    ModelConfig cfg;
    cfg.dim = 30;
    cfg.heads = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.layers = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.text_len = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
