#include "cted/session.hpp"

#include <algorithm>
#include <cstring>

#include "cted/keyval.hpp"

namespace cted {

SourceCache::SourceCache(int total_steps, std::vector<int> block_subset, int branches)
    : total_steps_(total_steps), branches_(branches), subset_(std::move(block_subset)) {
    if (total_steps <= 0 || branches < 1 || branches > 2 || subset_.empty()) {
        throw ContractError("bad cache geometry");
    }
    entries_.resize(expected_count());
    present_.assign(expected_count(), 0);
}

size_t SourceCache::index_of(int step, int layer, int branch) const {
    if (step < 1 || step > total_steps_ || branch < 0 || branch >= branches_) {
        throw ContractError("cache key out of range");
    }
    const auto it = std::find(subset_.begin(), subset_.end(), layer);
    if (it == subset_.end()) throw ContractError("layer " + std::to_string(layer) + " not cached");
    const size_t pos = size_t(it - subset_.begin());
    return (size_t(step - 1) * subset_.size() + pos) * size_t(branches_) + size_t(branch);
}

void SourceCache::put(int step, int layer, int branch, QkvTriple triple) {
    const size_t i = index_of(step, layer, branch);
    if (!present_[i]) ++filled_;
    present_[i] = 1;
    entries_[i] = std::move(triple);
}

const QkvTriple& SourceCache::at(int step, int layer, int branch) const {
    const size_t i = index_of(step, layer, branch);
    if (!present_[i]) {
        throw ContractError("cache incomplete at step " + std::to_string(step) + " layer " +
                            std::to_string(layer) + " branch " + std::to_string(branch));
    }
    return entries_[i];
}

bool SourceCache::has(int step, int layer, int branch) const {
    return present_[index_of(step, layer, branch)] != 0;
}

bool SourceCache::complete() const { return filled_ == expected_count(); }

uint64_t SourceCache::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (!present_[i]) continue;
        mix(i);
        mix(tensor_hash(entries_[i].q));
        mix(tensor_hash(entries_[i].k));
        mix(tensor_hash(entries_[i].v));
    }
    for (size_t j = 0; j < mask.size(); ++j) mix(uint64_t(mask.binary[j]));
    for (const Tensor& z : trace.latents) mix(tensor_hash(z));
    return h;
}

std::vector<int> SessionConfig::resolved_subset() const {
    if (!block_subset.empty()) return block_subset;
    std::vector<int> all(size_t(model.layers));
    for (int l = 0; l < model.layers; ++l) all[size_t(l)] = l;
    return all;
}

void SessionConfig::validate() const {
    model.validate();
    schedule.validate();
    guidance.validate();
    if (model.layers == 0) throw ConfigError("sessions need at least one block to control");
    ControlConfig cc;
    cc.block_subset = block_subset;
    cc.validate(model.layers);
    if (mask_threshold < 0.0f || mask_threshold > 1.0f) {
        throw ConfigError("mask threshold must be in [0, 1]");
    }
}

std::vector<int> match_word_indices(const std::string& prompt,
                                    const std::vector<std::string>& edit_words) {
    const std::vector<std::string> tokens = split_whitespace(prompt);
    std::vector<int> idx;
    for (const std::string& w : edit_words) {
        bool found = false;
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] == w) {
                idx.push_back(int(i));
                found = true;
            }
        }
        if (!found) throw ConfigError("edit word not in prompt: " + w);
    }
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    return idx;
}

namespace {

class RecordingController : public AttentionController {
public:
    RecordingController(SourceCache* cache, int branch, const std::vector<int>& subset, int heads,
                        AttentionAccumulator* acc, const std::vector<int>* word_indices)
        : cache_(cache),
          branch_(branch),
          subset_(subset),
          heads_(heads),
          acc_(acc),
          word_indices_(word_indices) {}

    QkvTriple on_qkv(const QkvTriple& qkv, int layer, int step) override {
        if (std::find(subset_.begin(), subset_.end(), layer) != subset_.end()) {
            cache_->put(step, layer, branch_, qkv);
            if (acc_ && word_indices_ && !word_indices_->empty()) {
                acc_->accumulate(attention_weights(qkv, heads_), *word_indices_, qkv.split);
            }
        }
        return qkv;
    }

private:
    SourceCache* cache_;
    int branch_;
    const std::vector<int>& subset_;
    int heads_;
    AttentionAccumulator* acc_;
    const std::vector<int>* word_indices_;
};

class FusionController : public AttentionController {
public:
    FusionController(const SourceCache* cache, int branch, const std::vector<int>& subset,
                     int heads, ControlMode mode, double alpha, int total_steps,
                     const EditMask* mask, const std::vector<uint8_t>* baseline_attn_mask,
                     bool diag_swap_text, SourceCache* record_cache,
                     AttentionAccumulator* record_acc, const std::vector<int>* record_words,
                     const FusionObserver* observer)
        : cache_(cache),
          branch_(branch),
          subset_(subset),
          heads_(heads),
          mode_(mode),
          alpha_(alpha),
          total_steps_(total_steps),
          mask_(mask),
          baseline_attn_mask_(baseline_attn_mask),
          diag_swap_text_(diag_swap_text),
          record_cache_(record_cache),
          record_acc_(record_acc),
          record_words_(record_words),
          observer_(observer) {}

    QkvTriple on_qkv(const QkvTriple& target, int layer, int step) override {
        const bool in_subset =
            std::find(subset_.begin(), subset_.end(), layer) != subset_.end();
        QkvTriple fused = target;
        if (in_subset && mode_ != ControlMode::None) {
            const QkvTriple& source = cache_->at(step, layer, branch_);
            FusionContext ctx;
            ctx.step = step;
            ctx.total_steps = total_steps_;
            ctx.alpha = alpha_;
            ctx.mask = mask_;
            ctx.source = &source;
            switch (mode_) {
                case ControlMode::StructureFusion:
                    fused = fuse_structure(ctx, target);
                    break;
                case ControlMode::ConsistEdit:
                    fused = fuse_consistedit(ctx, target);
                    break;
                case ControlMode::ConsistEditStar:
                    fused = fuse_consistedit_star(ctx, target);
                    break;
                case ControlMode::BaselineKV:
                    // Hand the attention stage (Q_tg, K_hat, V_hat); the
                    // output blend happens in override_attention.
                    fused = make_hat(source, target);
                    fused.q = target.q;
                    break;
                default:
                    break;
            }
            if (diag_swap_text_) {
                for (int r = 0; r < fused.split; ++r) {
                    std::copy(source.q.row(size_t(r)), source.q.row(size_t(r)) + source.q.dim(1),
                              fused.q.row(size_t(r)));
                    std::copy(source.k.row(size_t(r)), source.k.row(size_t(r)) + source.k.dim(1),
                              fused.k.row(size_t(r)));
                    std::copy(source.v.row(size_t(r)), source.v.row(size_t(r)) + source.v.dim(1),
                              fused.v.row(size_t(r)));
                }
            }
        }
        if (observer_ && *observer_) (*observer_)(fused, target, layer, step, branch_);
        if (record_cache_ && in_subset) {
            record_cache_->put(step, layer, branch_, fused);
            if (record_acc_ && record_words_ && !record_words_->empty() && branch_ == 0) {
                record_acc_->accumulate(attention_weights(fused, heads_), *record_words_,
                                        fused.split);
            }
        }
        return fused;
    }

    std::optional<Tensor> override_attention(const QkvTriple& fused, int layer, int step) override {
        if (mode_ != ControlMode::BaselineKV) return std::nullopt;
        if (std::find(subset_.begin(), subset_.end(), layer) == subset_.end()) return std::nullopt;
        (void)step;
        // fused carries Q_tg with K_hat/V_hat; the conditioning mask
        // defaults to all-ones and the attention mask to the session mask
        // (all-ones unless externally supplied).
        FusionContext ctx;
        ctx.source = &fused;
        const std::vector<uint8_t> ones(size_t(fused.n_vis()), 1);
        const std::vector<uint8_t>& m_attn = baseline_attn_mask_ ? *baseline_attn_mask_ : ones;
        return baseline_kv(ctx, fused, ones, m_attn, heads_);
    }

private:
    const SourceCache* cache_;
    int branch_;
    const std::vector<int>& subset_;
    int heads_;
    ControlMode mode_;
    double alpha_;
    int total_steps_;
    const EditMask* mask_;
    const std::vector<uint8_t>* baseline_attn_mask_;
    bool diag_swap_text_;
    SourceCache* record_cache_;
    AttentionAccumulator* record_acc_;
    const std::vector<int>* record_words_;
    const FusionObserver* observer_;
};

EditMask finalize_or_full(const AttentionAccumulator& acc, float threshold, int n_vis) {
    if (acc.count() == 0) return EditMask::all_ones(size_t(n_vis));
    return acc.finalize(threshold);
}

}  // namespace

SourceCache run_source(const ToyMmdit& model, const SessionConfig& cfg, const Tensor& z_T,
                       const std::string& source_prompt,
                       const std::vector<std::string>& edit_words) {
    cfg.validate();
    const std::vector<int> subset = cfg.resolved_subset();
    const int branches = cfg.guidance.enabled ? 2 : 1;
    SourceCache cache(cfg.schedule.total_steps, subset, branches);
    cache.prompt = source_prompt;
    cache.prompt_emb = embed_prompt(source_prompt, cfg.model, cfg.embed_seed);

    std::vector<int> word_indices;
    if (!edit_words.empty()) word_indices = match_word_indices(source_prompt, edit_words);
    AttentionAccumulator acc(cfg.model.n_vis());

    RecordingController cond(&cache, 0, subset, cfg.model.heads, &acc, &word_indices);
    RecordingController uncond(&cache, 1, subset, cfg.model.heads, nullptr, nullptr);
    const Tensor uncond_emb = embed_prompt("", cfg.model, cfg.embed_seed);

    SampleResult res = sample(model, z_T, cache.prompt_emb, cfg.schedule, cfg.guidance, &cond,
                              &uncond, &uncond_emb);
    cache.trace = std::move(res.trace);
    cache.nfe = cache.trace.nfe;
    cache.mask = finalize_or_full(acc, cfg.mask_threshold, cfg.model.n_vis());
    cache.mask.word_indices = word_indices;
    if (!cache.complete()) throw ContractError("source cache incomplete after pass");
    return cache;
}

EditResult run_edit(const ToyMmdit& model, const SessionConfig& cfg, const SourceCache& cache,
                    const EditRequest& request, const std::vector<std::string>* next_edit_words,
                    const FusionObserver* observer) {
    cfg.validate();
    if (request.alpha < 0.0 || request.alpha > 1.0) throw ConfigError("alpha must be in [0, 1]");
    if (!cache.complete()) throw ContractError("edit pass needs a complete source cache");
    if (cache.total_steps() != cfg.schedule.total_steps) {
        throw ContractError("cache step count differs from schedule");
    }
    const int branches = request.guidance.enabled ? 2 : 1;
    if (branches != cache.branches()) {
        throw ContractError("guidance branch count differs from the cached pass");
    }
    const std::vector<int> subset = cfg.resolved_subset();
    if (subset != cache.block_subset()) throw ContractError("block subset differs from cache");

    const EditMask& mask = request.external_mask ? *request.external_mask : cache.mask;
    if (int(mask.size()) != cfg.model.n_vis()) throw ShapeError("mask length != n_vis");

    // DiTCtrl editing configuration: all-ones masks unless the user
    // supplied one explicitly.
    std::vector<uint8_t> baseline_attn(size_t(cfg.model.n_vis()), 1);
    if (request.external_mask) baseline_attn = request.external_mask->binary;

    const Tensor target_emb = embed_prompt(request.target_prompt, cfg.model, cfg.embed_seed);
    const Tensor uncond_emb = embed_prompt("", cfg.model, cfg.embed_seed);

    EditResult out;
    out.next_cache = SourceCache(cfg.schedule.total_steps, subset, cache.branches());
    out.next_cache.prompt = request.target_prompt;
    out.next_cache.prompt_emb = target_emb;

    std::vector<int> next_indices;
    if (next_edit_words && !next_edit_words->empty()) {
        next_indices = match_word_indices(request.target_prompt, *next_edit_words);
    }
    AttentionAccumulator next_acc(cfg.model.n_vis());

    FusionController cond(&cache, 0, subset, cfg.model.heads, request.mode, request.alpha,
                          cfg.schedule.total_steps, &mask, &baseline_attn, request.diag_swap_text,
                          &out.next_cache, &next_acc, &next_indices, observer);
    FusionController uncond(&cache, 1, subset, cfg.model.heads, request.mode, request.alpha,
                            cfg.schedule.total_steps, &mask, &baseline_attn,
                            request.diag_swap_text, &out.next_cache, nullptr, nullptr, observer);

    const Tensor& z_T = cache.trace.latents.front();  // same-noise anchoring
    SampleResult res =
        sample(model, z_T, target_emb, cfg.schedule, request.guidance, &cond, &uncond, &uncond_emb);

    out.z0 = std::move(res.z0);
    out.trace = std::move(res.trace);
    out.nfe = out.trace.nfe;
    out.mask_used = mask;
    out.next_cache.trace = out.trace;
    out.next_cache.nfe = out.nfe;
    out.next_cache.mask = finalize_or_full(next_acc, cfg.mask_threshold, cfg.model.n_vis());
    out.next_cache.mask.word_indices = next_indices;
    return out;
}

std::vector<EditResult> multi_round(const ToyMmdit& model, const SessionConfig& cfg,
                                    const Tensor& z_T, const std::string& source_prompt,
                                    const std::vector<EditRequest>& requests) {
    if (requests.empty()) throw ConfigError("multi_round needs at least one request");
    std::vector<EditResult> results;
    results.reserve(requests.size());
    SourceCache cache = run_source(model, cfg, z_T, source_prompt, requests.front().edit_words);
    for (size_t k = 0; k < requests.size(); ++k) {
        const std::vector<std::string>* next_words =
            (k + 1 < requests.size()) ? &requests[k + 1].edit_words : nullptr;
        EditResult r = run_edit(model, cfg, cache, requests[k], next_words);
        cache = r.next_cache;
        results.push_back(std::move(r));
    }
    return results;
}

Tensor edit_real(const ToyMmdit& model, const SessionConfig& cfg, const Tensor& input_image,
                 const std::string& source_prompt, const EditRequest& request, int invert_refine) {
    cfg.validate();
    const Tensor tokens = model.patchify(input_image);
    const Tensor src_emb = embed_prompt(source_prompt, cfg.model, cfg.embed_seed);
    const InvertResult inv = invert(model, tokens, src_emb, cfg.schedule, invert_refine);
    const SourceCache cache = run_source(model, cfg, inv.z_T, source_prompt, request.edit_words);
    const EditResult res = run_edit(model, cfg, cache, request);
    return model.unpatchify(res.z0);
}

void SourceCache::save(const std::filesystem::path& dir, const Schedule& sched) const {
    if (!complete()) throw ContractError("refusing to save an incomplete cache");
    std::filesystem::create_directories(dir);
    KeyValueFile manifest;
    manifest.set_int("steps", total_steps_);
    manifest.set_int("branches", branches_);
    std::string layers;
    for (size_t i = 0; i < subset_.size(); ++i) {
        if (i) layers += ",";
        layers += std::to_string(subset_[i]);
    }
    manifest.set("layers", layers);
    manifest.set("prompt", prompt);
    manifest.set_int("nfe", nfe);
    manifest.set_double("mask_threshold", double(mask.threshold));
    std::string words;
    for (size_t i = 0; i < mask.word_indices.size(); ++i) {
        if (i) words += ",";
        words += std::to_string(mask.word_indices[size_t(i)]);
    }
    manifest.set("mask_words", words);
    manifest.write_file(dir / "cache_manifest.txt");

    for (int t = 1; t <= total_steps_; ++t) {
        for (int l : subset_) {
            for (int b = 0; b < branches_; ++b) {
                const QkvTriple& e = at(t, l, b);
                Tensor stacked({3, e.q.dim(0), e.q.dim(1)});
                std::memcpy(stacked.data(), e.q.data(), e.q.size() * sizeof(float));
                std::memcpy(stacked.data() + e.q.size(), e.k.data(), e.k.size() * sizeof(float));
                std::memcpy(stacked.data() + 2 * e.q.size(), e.v.data(),
                            e.v.size() * sizeof(float));
                save_tensor(dir / ("qkv_t" + std::to_string(t) + "_l" + std::to_string(l) + "_b" +
                                   std::to_string(b) + ".cted"),
                            stacked);
            }
        }
    }
    {
        Tensor scores({mask.size()});
        for (size_t j = 0; j < mask.size(); ++j) scores[j] = mask.scores[j];
        save_tensor(dir / "mask_scores.cted", scores);
    }
    save_tensor(dir / "prompt_emb.cted", prompt_emb);
    save_trace(dir / "trace", trace, sched);

    KeyValueFile split_info;
    split_info.set_int("split", /*text rows*/ int(prompt_emb.dim(0)));
    split_info.write_file(dir / "split.txt");
}

SourceCache SourceCache::load(const std::filesystem::path& dir) {
    const KeyValueFile manifest = KeyValueFile::parse_file(dir / "cache_manifest.txt");
    const int T = int(manifest.require_int("steps"));
    const int branches = int(manifest.require_int("branches"));
    std::vector<int> subset;
    for (const std::string& s : split_on(manifest.require("layers"), ',')) {
        subset.push_back(std::stoi(s));
    }
    SourceCache cache(T, subset, branches);
    cache.prompt = manifest.get_or("prompt", "");
    cache.nfe = int(manifest.require_int("nfe"));

    const int split = int(KeyValueFile::parse_file(dir / "split.txt").require_int("split"));
    for (int t = 1; t <= T; ++t) {
        for (int l : subset) {
            for (int b = 0; b < branches; ++b) {
                const Tensor stacked =
                    load_tensor(dir / ("qkv_t" + std::to_string(t) + "_l" + std::to_string(l) +
                                       "_b" + std::to_string(b) + ".cted"));
                if (stacked.rank() != 3 || stacked.dim(0) != 3) {
                    throw IoError("bad cached triple shape");
                }
                QkvTriple e;
                e.q = Tensor(stacked.dim(1), stacked.dim(2));
                e.k = Tensor(stacked.dim(1), stacked.dim(2));
                e.v = Tensor(stacked.dim(1), stacked.dim(2));
                const size_t plane = e.q.size();
                std::memcpy(e.q.data(), stacked.data(), plane * sizeof(float));
                std::memcpy(e.k.data(), stacked.data() + plane, plane * sizeof(float));
                std::memcpy(e.v.data(), stacked.data() + 2 * plane, plane * sizeof(float));
                e.split = split;
                cache.put(t, l, b, std::move(e));
            }
        }
    }
    const Tensor scores = load_tensor(dir / "mask_scores.cted");
    cache.mask.threshold = float(manifest.require_double("mask_threshold"));
    cache.mask.scores.assign(scores.data(), scores.data() + scores.size());
    cache.mask.binary.resize(scores.size());
    for (size_t j = 0; j < scores.size(); ++j) {
        cache.mask.binary[j] = cache.mask.scores[j] >= cache.mask.threshold ? 1 : 0;
    }
    const std::string words = manifest.get_or("mask_words", "");
    if (!words.empty()) {
        for (const std::string& s : split_on(words, ',')) {
            cache.mask.word_indices.push_back(std::stoi(s));
        }
    }
    cache.prompt_emb = load_tensor(dir / "prompt_emb.cted");
    cache.trace = load_trace(dir / "trace");
    return cache;
}

}  // namespace cted
