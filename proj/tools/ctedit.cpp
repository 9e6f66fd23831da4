#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "cted/fixtures.hpp"
#include "cted/metrics.hpp"
#include "cted/runconfig.hpp"
#include "cted/session.hpp"

namespace fs = std::filesystem;
using namespace cted;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitDivergence = 4;

struct FlagOverrides {
    std::string config_path;
    std::optional<int64_t> seed;
    std::optional<double> alpha;
    std::optional<std::string> mode;
    std::optional<std::string> blocks;
    std::optional<std::string> edit_word;
    std::optional<std::string> mask;
    std::optional<double> cfg_scale;
    std::optional<int> steps;
    std::optional<std::string> out;
    std::optional<std::string> source_prompt;
    std::optional<std::string> target_prompt;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->add_option("--seed", seed, "base seed (weights, noise = seed+1, embeds = seed+2)");
        cmd->add_option("--alpha", alpha, "consistency strength in [0, 1]");
        cmd->add_option("--mode", mode, "none|kv|structure|consistedit|star");
        cmd->add_option("--blocks", blocks, "all|last-half|comma list");
        cmd->add_option("--edit-word", edit_word, "comma-separated words selecting the mask");
        cmd->add_option("--mask", mask, "external mask tensor (length n_vis)");
        cmd->add_option("--cfg-scale", cfg_scale, "enable CFG at this scale");
        cmd->add_option("--steps", steps, "sampling steps");
        cmd->add_option("--out", out, "output directory");
        cmd->add_option("--source-prompt", source_prompt, "source prompt");
        cmd->add_option("--target-prompt", target_prompt, "target prompt");
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) cfg = parse_run_config(KeyValueFile::parse_file(config_path));
        if (seed) cfg.seed = uint64_t(*seed);
        if (alpha) cfg.alpha = *alpha;
        if (mode) cfg.mode = control_mode_from_string(*mode);
        if (blocks) cfg.blocks = *blocks;
        if (edit_word) cfg.edit_words = split_on(*edit_word, ',');
        if (mask) cfg.mask_path = *mask;
        if (cfg_scale) {
            cfg.guidance = true;
            cfg.cfg_scale = *cfg_scale;
        }
        if (steps) cfg.steps = *steps;
        if (out) cfg.out_dir = *out;
        if (source_prompt) cfg.source_prompt = *source_prompt;
        if (target_prompt) cfg.target_prompt = *target_prompt;
        cfg.validate();
        return cfg;
    }
};

Image latent_image(const ToyMmdit& model, const Tensor& z0) {
    return image_from_tensor(model.unpatchify(z0));
}

void require_cache(const fs::path& dir) {
    if (!fs::exists(dir / "cache_manifest.txt")) {
        throw IoError("no cache at " + dir.string() + " (run gen first)");
    }
}

int cmd_gen(const FlagOverrides& flags) {
    const RunConfig cfg = flags.resolve();
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);

    const ToyMmdit model(cfg.model, cfg.weight_seed());
    Prng noise(cfg.noise_seed());
    const Tensor z_T = randn(noise, {size_t(cfg.model.n_vis()), size_t(cfg.model.dim)});

    const SourceCache cache =
        run_source(model, cfg.session(), z_T, cfg.source_prompt, cfg.edit_words);
    cache.save(out / "cache", cfg.session().schedule);
    save_mask(out / "mask.cted", cache.mask);
    save_tensor(out / "source_z0.cted", cache.trace.latents.back());
    write_ppm(out / "source.ppm", latent_image(model, cache.trace.latents.back()));
    serialize_run_config(cfg).write_file(out / "run_config.txt");

    std::printf("gen: prompt \"%s\", nfe %d, mask %zu/%d tokens, wrote %s\n",
                cfg.source_prompt.c_str(), cache.nfe, cache.mask.count_set(), cfg.model.n_vis(),
                out.string().c_str());
    return kExitOk;
}

std::vector<double> parse_alpha_sweep(const std::string& spec) {
    const auto parts = split_on(spec, ':');
    if (parts.size() != 3) throw ConfigError("--alpha-sweep expects start:end:step");
    const double start = std::stod(parts[0]);
    const double end = std::stod(parts[1]);
    const double step = std::stod(parts[2]);
    if (step <= 0.0) throw ConfigError("--alpha-sweep step must be positive");
    std::vector<double> alphas;
    for (double a = start; a <= end + 1e-9; a += step) alphas.push_back(std::min(a, 1.0));
    return alphas;
}

int cmd_edit(const FlagOverrides& flags, const std::string& alpha_sweep) {
    RunConfig cfg = flags.resolve();
    const fs::path out(cfg.out_dir);
    if (fs::exists(out / "run_config.txt") && flags.config_path.empty()) {
        // Reuse the recorded gen config, then re-apply the flags.
        RunConfig recorded = parse_run_config(KeyValueFile::parse_file(out / "run_config.txt"));
        recorded.out_dir = cfg.out_dir;
        FlagOverrides reapply = flags;
        reapply.config_path.clear();
        cfg = recorded;
        if (reapply.seed) cfg.seed = uint64_t(*reapply.seed);
        if (reapply.alpha) cfg.alpha = *reapply.alpha;
        if (reapply.mode) cfg.mode = control_mode_from_string(*reapply.mode);
        if (reapply.blocks) cfg.blocks = *reapply.blocks;
        if (reapply.edit_word) cfg.edit_words = split_on(*reapply.edit_word, ',');
        if (reapply.mask) cfg.mask_path = *reapply.mask;
        if (reapply.cfg_scale) {
            cfg.guidance = true;
            cfg.cfg_scale = *reapply.cfg_scale;
        }
        if (reapply.steps) cfg.steps = *reapply.steps;
        if (reapply.source_prompt) cfg.source_prompt = *reapply.source_prompt;
        if (reapply.target_prompt) cfg.target_prompt = *reapply.target_prompt;
        cfg.validate();
    }
    require_cache(out / "cache");

    const ToyMmdit model(cfg.model, cfg.weight_seed());
    const SourceCache cache = SourceCache::load(out / "cache");
    const Image source = latent_image(model, cache.trace.latents.back());

    std::vector<double> alphas = {cfg.alpha};
    if (!alpha_sweep.empty()) alphas = parse_alpha_sweep(alpha_sweep);

    for (double a : alphas) {
        EditRequest req = cfg.request();
        req.alpha = a;
        const EditResult res = run_edit(model, cfg.session(), cache, req);
        const Image edited = latent_image(model, res.z0);

        const PixelMask bg = pixel_mask_from_patches(res.mask_used, cfg.model.grid_h,
                                                     cfg.model.grid_w, cfg.model.patch)
                                 .complement();
        char name[64];
        std::snprintf(name, sizeof(name), "alpha=%.2f", a);
        std::printf("%s\n", metric_report_line(name, edited, source, bg).c_str());

        char file[64];
        std::snprintf(file, sizeof(file), "edited_alpha%.2f.ppm", a);
        write_ppm(out / file, edited);
        if (alphas.size() == 1) write_ppm(out / "edited.ppm", edited);
    }
    return kExitOk;
}

int cmd_multiround(const FlagOverrides& flags) {
    const RunConfig cfg = flags.resolve();
    if (cfg.rounds.empty()) throw ConfigError("multiround needs round1_prompt = ... entries");
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);

    const ToyMmdit model(cfg.model, cfg.weight_seed());
    Prng noise(cfg.noise_seed());
    const Tensor z_T = randn(noise, {size_t(cfg.model.n_vis()), size_t(cfg.model.dim)});

    std::vector<EditRequest> requests;
    for (const auto& r : cfg.rounds) {
        EditRequest req;
        req.target_prompt = r.prompt;
        req.edit_words = r.words;
        req.alpha = r.alpha;
        req.mode = r.mode;
        req.guidance.enabled = cfg.guidance;
        req.guidance.scale = float(cfg.cfg_scale);
        requests.push_back(std::move(req));
    }
    const std::vector<EditResult> results =
        multi_round(model, cfg.session(), z_T, cfg.source_prompt, requests);

    const SourceCache first = run_source(model, cfg.session(), z_T, cfg.source_prompt, {});
    const Image source = latent_image(model, first.trace.latents.back());
    int total_nfe = first.nfe;
    for (size_t k = 0; k < results.size(); ++k) {
        const Image img = latent_image(model, results[k].z0);
        const PixelMask bg = pixel_mask_from_patches(results[k].mask_used, cfg.model.grid_h,
                                                     cfg.model.grid_w, cfg.model.patch)
                                 .complement();
        const std::string name = "round" + std::to_string(k + 1);
        std::printf("%s\n", metric_report_line(name, img, source, bg).c_str());
        write_ppm(out / (name + ".ppm"), img);
        total_nfe += results[k].nfe;
    }
    std::printf("multiround: %zu rounds, total nfe %d\n", results.size(), total_nfe);
    return kExitOk;
}

int cmd_invert(const FlagOverrides& flags, const std::string& image_path) {
    const RunConfig cfg = flags.resolve();
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    const ToyMmdit model(cfg.model, cfg.weight_seed());

    Tensor image;
    if (image_path.size() > 5 && image_path.substr(image_path.size() - 5) == ".cted") {
        image = load_tensor(image_path);
    } else {
        image = tensor_from_image(read_ppm(image_path));
    }
    const Tensor tokens = model.patchify(image);
    const Tensor emb = embed_prompt(cfg.source_prompt, cfg.model, cfg.embed_seed());
    const InvertResult inv = invert(model, tokens, emb, cfg.session().schedule, cfg.invert_refine);
    save_tensor(out / "z_T.cted", inv.z_T);

    const SampleResult recon = sample(model, inv.z_T, emb, cfg.session().schedule);
    const Image recon_img = latent_image(model, recon.z0);
    write_ppm(out / "recon.ppm", recon_img);

    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const double d = double(recon.z0[i]) - double(tokens[i]);
        num += d * d;
        den += double(tokens[i]) * double(tokens[i]);
    }
    const double rel = den > 0.0 ? std::sqrt(num / den) : 0.0;
    std::printf("invert: nfe %d, recon token rel-L2 %.6f\n", inv.trace.nfe, rel);
    std::printf("%s\n",
                metric_report_line("recon", recon_img, image_from_tensor(image),
                                   PixelMask::full(int(image.dim(0)), int(image.dim(1))))
                    .c_str());
    return kExitOk;
}

int cmd_eval(const std::string& dir) {
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw IoError("not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(root)) {
        const std::string fname = entry.path().filename().string();
        const std::string suffix = ".src.ppm";
        if (fname.size() > suffix.size() &&
            fname.substr(fname.size() - suffix.size()) == suffix) {
            names.push_back(fname.substr(0, fname.size() - suffix.size()));
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("no *.src.ppm pairs in " + dir);
    for (const std::string& name : names) {
        const Image src = read_ppm(root / (name + ".src.ppm"));
        const fs::path edit_path = root / (name + ".edit.ppm");
        if (!fs::exists(edit_path)) throw IoError("missing pair: " + edit_path.string());
        const Image edit = read_ppm(edit_path);
        PixelMask bg = PixelMask::full(src.height, src.width);
        const fs::path mask_path = root / (name + ".mask.cted");
        if (fs::exists(mask_path)) {
            const Tensor m = load_tensor(mask_path);
            if (m.rank() != 2 || int(m.dim(0)) != src.height || int(m.dim(1)) != src.width) {
                throw ShapeError("pixel mask dims must match the image");
            }
            bg.bits.resize(m.size());
            for (size_t i = 0; i < m.size(); ++i) bg.bits[i] = m[i] >= 0.5f ? 0 : 1;  // complement
        }
        std::printf("%s\n", metric_report_line(name, edit, src, bg).c_str());
    }
    return kExitOk;
}

int cmd_dump_fixtures(const FlagOverrides& flags) {
    const RunConfig cfg = flags.resolve();
    dump_fixtures(cfg.out_dir, cfg.seed);
    std::printf("fixtures: %s hash %s\n", cfg.out_dir.c_str(),
                hash_directory(cfg.out_dir).c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic toy MM-DiT attention-control editing workbench"};
    app.require_subcommand(1);

    FlagOverrides flags;
    std::string alpha_sweep, image_path, eval_dir;
    std::function<int()> action;

    CLI::App* gen = app.add_subcommand("gen", "sample the source and cache Q/K/V + mask");
    flags.add_to(gen);
    gen->callback([&] { action = [&] { return cmd_gen(flags); }; });

    CLI::App* edit = app.add_subcommand("edit", "edit against a cached source pass");
    flags.add_to(edit);
    edit->add_option("--alpha-sweep", alpha_sweep, "start:end:step sweep over alpha");
    edit->callback([&] { action = [&] { return cmd_edit(flags, alpha_sweep); }; });

    CLI::App* multi = app.add_subcommand("multiround", "chained edits from roundN_* config keys");
    flags.add_to(multi);
    multi->callback([&] { action = [&] { return cmd_multiround(flags); }; });

    CLI::App* inv = app.add_subcommand("invert", "invert an input image and reconstruct it");
    flags.add_to(inv);
    inv->add_option("--image", image_path, "input image (.ppm or .cted)")->required();
    inv->callback([&] { action = [&] { return cmd_invert(flags, image_path); }; });

    CLI::App* ev = app.add_subcommand("eval", "metric report for *.src.ppm / *.edit.ppm pairs");
    ev->add_option("--dir", eval_dir, "directory of pairs")->required();
    ev->callback([&] { action = [&] { return cmd_eval(eval_dir); }; });

    CLI::App* dump = app.add_subcommand("dump-fixtures", "regenerate all golden fixtures");
    flags.add_to(dump);
    dump->callback([&] { action = [&] { return cmd_dump_fixtures(flags); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    }

    try {
        return action();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
