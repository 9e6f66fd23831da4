#pragma once

#include <filesystem>
#include <vector>

#include "cted/model.hpp"
#include "cted/tensor.hpp"

namespace cted {

// Paper defaults: CFG 7.5 when editing generated sources, 2.0 for real input.
inline constexpr float kCfgScaleGenerated = 7.5f;
inline constexpr float kCfgScaleRealInput = 2.0f;
inline constexpr int kDefaultSteps = 28;
inline constexpr int kDefaultInvertRefine = 2;

// Time values sigma_t = t/T held in double; the Euler update coefficient is
// the float32 cast of the double difference, which is uniform across t,
// while the double partial sums telescope exactly to sigma_T - sigma_0 = 1.
struct Schedule {
    int total_steps = kDefaultSteps;
    std::vector<double> sigmas;  // index t in [0, T], ascending; rollout runs T..0

    static Schedule uniform(int T);
    double sigma(int t) const { return sigmas.at(size_t(t)); }
    float step_size(int t) const { return float(sigmas.at(size_t(t)) - sigmas.at(size_t(t) - 1)); }
    void validate() const;
};

struct GuidanceConfig {
    bool enabled = false;
    float scale = kCfgScaleGenerated;
    void validate() const;
};

struct Trace {
    std::vector<Tensor> latents;  // latents[T - t] = z_t; front() = z_T, back() = z_0
    int nfe = 0;

    const Tensor& latent_at_step(int t, int total_steps) const {
        return latents.at(size_t(total_steps - t));
    }
};

// z_{t-1} = z_t - (sigma_t - sigma_prev) * v
Tensor euler_step(const Tensor& z, const Tensor& v, double sigma_t, double sigma_prev);

struct SampleResult {
    Tensor z0;
    Trace trace;
};

// Runs t = T..1. With guidance enabled each step evaluates the conditional
// and unconditional branches (v = v_u + s*(v_c - v_u)); controllers are
// applied per branch so attention control stays branch-symmetric.
SampleResult sample(const ToyMmdit& model, const Tensor& z_T, const Tensor& prompt_emb,
                    const Schedule& sched, const GuidanceConfig& guidance = {},
                    AttentionController* cond_controller = nullptr,
                    AttentionController* uncond_controller = nullptr,
                    const Tensor* uncond_emb = nullptr);

struct InvertResult {
    Tensor z_T;
    Trace trace;  // latents ascending from z_0 estimate to z_T estimate
};

// Euler inversion z_t = z_{t-1} + (sigma_t - sigma_prev) * v with optional
// fixed-point refinement: the velocity is re-evaluated at the current z_t
// estimate refine_iters times. Stands in for fancier inversion schemes;
// swap at this interface.
InvertResult invert(const ToyMmdit& model, const Tensor& z0, const Tensor& prompt_emb,
                    const Schedule& sched, int refine_iters = kDefaultInvertRefine);

void save_trace(const std::filesystem::path& dir, const Trace& trace, const Schedule& sched);
Trace load_trace(const std::filesystem::path& dir);

}  // namespace cted
