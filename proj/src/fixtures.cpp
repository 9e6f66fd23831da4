#include "cted/fixtures.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "cted/keyval.hpp"
#include "cted/session.hpp"

namespace cted {

void dump_fixtures(const std::filesystem::path& out_dir, uint64_t seed) {
    std::filesystem::create_directories(out_dir);
    const ModelConfig cfg;

    // Prompt embedding of "horse" under fixed seed 0.
    save_tensor(out_dir / "embed_horse_seed0.cted", embed_prompt("horse", cfg, 0));

    const ToyMmdit model(cfg, seed);
    Prng noise(seed + 1);
    const Tensor z_T = randn(noise, {size_t(cfg.n_vis()), size_t(cfg.dim)});
    const Tensor prompt = embed_prompt("a standing horse", cfg, seed + 2);

    {
        const TokenBatch tokens{prompt, z_T};
        const QkvTriple qkv = model.pre_attention(0, tokens, kDefaultSteps);
        Tensor stacked({3, qkv.q.dim(0), qkv.q.dim(1)});
        std::copy(qkv.q.data(), qkv.q.data() + qkv.q.size(), stacked.data());
        std::copy(qkv.k.data(), qkv.k.data() + qkv.k.size(), stacked.data() + qkv.q.size());
        std::copy(qkv.v.data(), qkv.v.data() + qkv.v.size(), stacked.data() + 2 * qkv.q.size());
        save_tensor(out_dir / "preattn_l0.cted", stacked);
    }

    save_tensor(out_dir / "velocity_t28.cted", model.forward(z_T, prompt, kDefaultSteps));

    SessionConfig session;
    session.model = cfg;
    session.schedule = Schedule::uniform(kDefaultSteps);
    session.embed_seed = seed + 2;
    const SourceCache cache = run_source(model, session, z_T, "a standing horse", {"horse"});
    save_tensor(out_dir / "sample_z0.cted", cache.trace.latents.back());
    {
        Tensor scores({cache.mask.size()});
        for (size_t j = 0; j < cache.mask.size(); ++j) scores[j] = cache.mask.scores[j];
        save_tensor(out_dir / "mask_scores.cted", scores);
    }

    KeyValueFile manifest;
    manifest.set_int("seed", int64_t(seed));
    manifest.set("files",
                 "embed_horse_seed0.cted,preattn_l0.cted,velocity_t28.cted,sample_z0.cted,"
                 "mask_scores.cted");
    manifest.write_file(out_dir / "fixtures_manifest.txt");
}

std::string hash_directory(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::vector<std::pair<std::string, std::filesystem::path>> named;
    named.reserve(files.size());
    for (const auto& p : files) {
        named.emplace_back(p.lexically_relative(dir).generic_string(), p);
    }
    std::sort(named.begin(), named.end());

    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_bytes = [&h](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, path] : named) {
        mix_bytes(name.data(), name.size());
        const char zero = 0;
        mix_bytes(&zero, 1);
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open: " + path.string());
        char buf[4096];
        while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
            mix_bytes(buf, size_t(f.gcount()));
            if (!f) break;
        }
    }
    char out[32];
    std::snprintf(out, sizeof(out), "%016llx", (unsigned long long)h);
    return out;
}

}  // namespace cted
