#include "cted/sampler.hpp"

#include "cted/keyval.hpp"

namespace cted {

Schedule Schedule::uniform(int T) {
    if (T <= 0) throw ConfigError("step count must be positive");
    Schedule s;
    s.total_steps = T;
    s.sigmas.resize(size_t(T) + 1);
    for (int t = 0; t <= T; ++t) s.sigmas[size_t(t)] = double(t) / double(T);
    s.validate();
    return s;
}

void Schedule::validate() const {
    if (total_steps <= 0 || sigmas.size() != size_t(total_steps) + 1) {
        throw ConfigError("schedule must carry total_steps+1 sigma values");
    }
    if (sigmas.front() != 0.0 || sigmas.back() != 1.0) {
        throw ConfigError("schedule must run from sigma_0 = 0 to sigma_T = 1");
    }
    for (size_t t = 1; t < sigmas.size(); ++t) {
        if (!(sigmas[t] > sigmas[t - 1])) throw ConfigError("sigmas must be strictly monotone");
    }
}

void GuidanceConfig::validate() const {
    if (scale < 0.0f) throw ConfigError("guidance scale must be >= 0");
}

Tensor euler_step(const Tensor& z, const Tensor& v, double sigma_t, double sigma_prev) {
    if (!z.same_shape(v)) throw ShapeError("euler_step: z and v shapes differ");
    const float h = float(sigma_t - sigma_prev);
    Tensor out = z;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= h * v[i];
    return out;
}

namespace {

void check_finite(const Tensor& z, int step, const char* what) {
    if (!z.all_finite()) throw DivergenceError(std::string(what) + ": non-finite latent", step);
}

Tensor cfg_combine(const Tensor& v_uncond, const Tensor& v_cond, float scale) {
    Tensor v = v_uncond;
    for (size_t i = 0; i < v.size(); ++i) v[i] += scale * (v_cond[i] - v_uncond[i]);
    return v;
}

}  // namespace

SampleResult sample(const ToyMmdit& model, const Tensor& z_T, const Tensor& prompt_emb,
                    const Schedule& sched, const GuidanceConfig& guidance,
                    AttentionController* cond_controller, AttentionController* uncond_controller,
                    const Tensor* uncond_emb) {
    sched.validate();
    guidance.validate();
    if (guidance.enabled && uncond_emb == nullptr) {
        throw ConfigError("guidance enabled but no unconditional embedding given");
    }
    SampleResult res;
    Tensor z = z_T;
    res.trace.latents.push_back(z);
    for (int t = sched.total_steps; t >= 1; --t) {
        Tensor v_cond = model.forward(z, prompt_emb, t, cond_controller);
        ++res.trace.nfe;
        Tensor v;
        if (guidance.enabled) {
            const Tensor v_uncond = model.forward(z, *uncond_emb, t, uncond_controller);
            ++res.trace.nfe;
            v = cfg_combine(v_uncond, v_cond, guidance.scale);
        } else {
            v = std::move(v_cond);
        }
        z = euler_step(z, v, sched.sigma(t), sched.sigma(t - 1));
        check_finite(z, t, "sample");
        res.trace.latents.push_back(z);
    }
    res.z0 = z;
    return res;
}

InvertResult invert(const ToyMmdit& model, const Tensor& z0, const Tensor& prompt_emb,
                    const Schedule& sched, int refine_iters) {
    sched.validate();
    if (refine_iters < 0) throw ConfigError("refine_iters must be >= 0");
    InvertResult res;
    Tensor z = z0;
    res.trace.latents.push_back(z);
    for (int t = 1; t <= sched.total_steps; ++t) {
        const float h = sched.step_size(t);
        Tensor v = model.forward(z, prompt_emb, t);
        ++res.trace.nfe;
        Tensor z_next = z;
        for (size_t i = 0; i < z_next.size(); ++i) z_next[i] += h * v[i];
        for (int k = 0; k < refine_iters; ++k) {
            v = model.forward(z_next, prompt_emb, t);
            ++res.trace.nfe;
            z_next = z;
            for (size_t i = 0; i < z_next.size(); ++i) z_next[i] += h * v[i];
        }
        z = std::move(z_next);
        check_finite(z, t, "invert");
        res.trace.latents.push_back(z);
    }
    res.z_T = z;
    return res;
}

void save_trace(const std::filesystem::path& dir, const Trace& trace, const Schedule& sched) {
    std::filesystem::create_directories(dir);
    const int T = sched.total_steps;
    if (trace.latents.size() != size_t(T) + 1) throw ContractError("trace length != total_steps+1");
    KeyValueFile manifest;
    manifest.set_int("steps", T);
    manifest.set_int("nfe", trace.nfe);
    for (int t = T; t >= 0; --t) {
        const std::string name = "step_" + std::to_string(t) + ".cted";
        manifest.set("file_" + std::to_string(t), name);
        save_tensor(dir / name, trace.latents[size_t(T - t)]);
    }
    manifest.write_file(dir / "trace_manifest.txt");
}

Trace load_trace(const std::filesystem::path& dir) {
    const KeyValueFile manifest = KeyValueFile::parse_file(dir / "trace_manifest.txt");
    const int T = int(manifest.require_int("steps"));
    Trace trace;
    trace.nfe = int(manifest.require_int("nfe"));
    for (int t = T; t >= 0; --t) {
        trace.latents.push_back(load_tensor(dir / manifest.require("file_" + std::to_string(t))));
    }
    return trace;
}

}  // namespace cted
