#include "cted/runconfig.hpp"

#include <algorithm>
#include <set>

namespace cted {

namespace {

const std::set<std::string> kKnownKeys = {
    "layers",     "dim",        "heads",         "text_len",      "grid_h",
    "grid_w",     "patch",      "channels",      "steps",         "seed",
    "source_prompt", "target_prompt", "edit_words", "alpha",      "mode",
    "blocks",     "guidance",   "cfg_scale",     "mask_threshold", "mask",
    "out",        "invert_refine",
};

bool is_round_key(const std::string& key, int& round, std::string& field) {
    if (key.rfind("round", 0) != 0) return false;
    const size_t us = key.find('_');
    if (us == std::string::npos || us <= 5) return false;
    const std::string num = key.substr(5, us - 5);
    if (num.empty() || !std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return false;
    }
    round = std::stoi(num);
    field = key.substr(us + 1);
    return field == "prompt" || field == "words" || field == "alpha" || field == "mode";
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ",";
        out += words[i];
    }
    return out;
}

}  // namespace

SessionConfig RunConfig::session() const {
    SessionConfig s;
    s.model = model;
    s.schedule = Schedule::uniform(steps);
    s.guidance.enabled = guidance;
    s.guidance.scale = float(cfg_scale);
    s.block_subset = parse_block_subset(blocks, model.layers);
    s.mask_threshold = float(mask_threshold);
    s.embed_seed = embed_seed();
    return s;
}

EditRequest RunConfig::request() const {
    EditRequest r;
    r.target_prompt = target_prompt.empty() ? source_prompt : target_prompt;
    r.edit_words = edit_words;
    r.alpha = alpha;
    r.mode = mode;
    r.guidance.enabled = guidance;
    r.guidance.scale = float(cfg_scale);
    if (!mask_path.empty()) r.external_mask = load_external_mask(mask_path, model.n_vis());
    return r;
}

void RunConfig::validate() const {
    model.validate();
    if (steps <= 0) throw ConfigError("steps must be positive");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0, 1]");
    if (cfg_scale < 0.0) throw ConfigError("cfg_scale must be >= 0");
    if (mask_threshold < 0.0 || mask_threshold > 1.0) {
        throw ConfigError("mask_threshold must be in [0, 1]");
    }
    if (invert_refine < 0) throw ConfigError("invert_refine must be >= 0");
    parse_block_subset(blocks, model.layers);
    for (const Round& r : rounds) {
        if (r.prompt.empty()) throw ConfigError("round prompt must not be empty");
        if (r.alpha < 0.0 || r.alpha > 1.0) throw ConfigError("round alpha must be in [0, 1]");
    }
}

RunConfig parse_run_config(const KeyValueFile& kv) {
    RunConfig cfg;
    std::vector<int> round_numbers;
    for (const auto& [key, value] : kv.entries()) {
        int round = 0;
        std::string field;
        if (is_round_key(key, round, field)) {
            if (round < 1) throw ConfigError("round numbers start at 1: " + key);
            if (std::find(round_numbers.begin(), round_numbers.end(), round) ==
                round_numbers.end()) {
                round_numbers.push_back(round);
            }
            continue;
        }
        if (!kKnownKeys.count(key)) throw ConfigError("unknown key: " + key);
        (void)value;
    }
    std::sort(round_numbers.begin(), round_numbers.end());
    for (size_t i = 0; i < round_numbers.size(); ++i) {
        if (round_numbers[i] != int(i) + 1) {
            throw ConfigError("round numbers must be contiguous from 1");
        }
    }

    cfg.model.layers = int(kv.get_int_or("layers", cfg.model.layers));
    cfg.model.dim = int(kv.get_int_or("dim", cfg.model.dim));
    cfg.model.heads = int(kv.get_int_or("heads", cfg.model.heads));
    cfg.model.text_len = int(kv.get_int_or("text_len", cfg.model.text_len));
    cfg.model.grid_h = int(kv.get_int_or("grid_h", cfg.model.grid_h));
    cfg.model.grid_w = int(kv.get_int_or("grid_w", cfg.model.grid_w));
    cfg.model.patch = int(kv.get_int_or("patch", cfg.model.patch));
    cfg.model.channels = int(kv.get_int_or("channels", cfg.model.channels));
    cfg.steps = int(kv.get_int_or("steps", cfg.steps));
    cfg.seed = uint64_t(kv.get_int_or("seed", int64_t(cfg.seed)));
    cfg.source_prompt = kv.get_or("source_prompt", cfg.source_prompt);
    cfg.target_prompt = kv.get_or("target_prompt", cfg.target_prompt);
    if (kv.has("edit_words")) cfg.edit_words = split_on(kv.require("edit_words"), ',');
    cfg.alpha = kv.get_double_or("alpha", cfg.alpha);
    if (kv.has("mode")) cfg.mode = control_mode_from_string(kv.require("mode"));
    cfg.blocks = kv.get_or("blocks", cfg.blocks);
    cfg.guidance = kv.get_bool_or("guidance", cfg.guidance);
    cfg.cfg_scale = kv.get_double_or("cfg_scale", cfg.cfg_scale);
    cfg.mask_threshold = kv.get_double_or("mask_threshold", cfg.mask_threshold);
    cfg.mask_path = kv.get_or("mask", cfg.mask_path);
    cfg.out_dir = kv.get_or("out", cfg.out_dir);
    cfg.invert_refine = int(kv.get_int_or("invert_refine", cfg.invert_refine));

    for (int r : round_numbers) {
        RunConfig::Round round;
        const std::string prefix = "round" + std::to_string(r) + "_";
        round.prompt = kv.require(prefix + "prompt");
        if (kv.has(prefix + "words")) round.words = split_on(kv.require(prefix + "words"), ',');
        round.alpha = kv.get_double_or(prefix + "alpha", round.alpha);
        if (kv.has(prefix + "mode")) {
            round.mode = control_mode_from_string(kv.require(prefix + "mode"));
        }
        cfg.rounds.push_back(std::move(round));
    }

    cfg.validate();
    return cfg;
}

KeyValueFile serialize_run_config(const RunConfig& cfg) {
    KeyValueFile kv;
    kv.set_int("layers", cfg.model.layers);
    kv.set_int("dim", cfg.model.dim);
    kv.set_int("heads", cfg.model.heads);
    kv.set_int("text_len", cfg.model.text_len);
    kv.set_int("grid_h", cfg.model.grid_h);
    kv.set_int("grid_w", cfg.model.grid_w);
    kv.set_int("patch", cfg.model.patch);
    kv.set_int("channels", cfg.model.channels);
    kv.set_int("steps", cfg.steps);
    kv.set_int("seed", int64_t(cfg.seed));
    kv.set("source_prompt", cfg.source_prompt);
    if (!cfg.target_prompt.empty()) kv.set("target_prompt", cfg.target_prompt);
    if (!cfg.edit_words.empty()) kv.set("edit_words", join_words(cfg.edit_words));
    kv.set_double("alpha", cfg.alpha);
    kv.set("mode", control_mode_to_string(cfg.mode));
    kv.set("blocks", cfg.blocks);
    kv.set_bool("guidance", cfg.guidance);
    kv.set_double("cfg_scale", cfg.cfg_scale);
    kv.set_double("mask_threshold", cfg.mask_threshold);
    if (!cfg.mask_path.empty()) kv.set("mask", cfg.mask_path);
    kv.set("out", cfg.out_dir);
    kv.set_int("invert_refine", cfg.invert_refine);
    for (size_t i = 0; i < cfg.rounds.size(); ++i) {
        const std::string prefix = "round" + std::to_string(i + 1) + "_";
        kv.set(prefix + "prompt", cfg.rounds[i].prompt);
        if (!cfg.rounds[i].words.empty()) kv.set(prefix + "words", join_words(cfg.rounds[i].words));
        kv.set_double(prefix + "alpha", cfg.rounds[i].alpha);
        kv.set(prefix + "mode", control_mode_to_string(cfg.rounds[i].mode));
    }
    return kv;
}

}  // namespace cted
