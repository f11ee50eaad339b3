#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lgen/layout.hpp"
#include "lgen/losses.hpp"
#include "lgen/tensor.hpp"
#include "lgen/toy_model.hpp"

namespace lgen {

// Every knob of the guided sampler. Defaults give the reference behavior:
// 50 DDIM steps, latent optimization on the 10 highest-noise steps with up
// to 5 descent iterations each, classifier-free guidance at weight 7.5.
struct GuidanceConfig {
    double eta = 70.0;                  // latent descent step size
    double lambda = 0.5;                // boundary-loss weight
    double alpha = 0.5;                 // regularization-loss weight
    int tau = 1;                        // self-attention enhancement folds
    int total_steps = 50;               // sampler steps
    int optim_steps = 10;               // leading steps that optimize the latent
    int max_inner_iters = 5;            // descent iterations per optimized step
    double early_stop_threshold = 1e-6; // stop descending below this loss
    double cfg_weight = 7.5;
    AblationMode ablation = AblationMode::RMReg;
    uint64_t seed = 0;

    // eta = 0 and optim_steps = 0 are both legal "guidance off" settings.
    bool optimization_enabled() const { return eta > 0.0 && optim_steps > 0; }
    void validate() const;  // throws std::invalid_argument
};

// A point on the reverse trajectory plus everything recorded getting there.
// z keeps one shape for the whole trajectory; t = 0 is the clean sample.
struct LatentState {
    Tensor z;
    int t = 0;
    std::vector<TraceRow> trace;
    std::vector<std::string> warnings;
};

// The timesteps a `steps`-step trajectory visits, descending from the
// noisiest. Subsampled as t_i = 1 + i * (schedule_steps / steps).
std::vector<int> ddim_timesteps(int schedule_steps, int steps);

// One deterministic DDIM update from state.t down to t_prev: reconstruct
// x0 from the noise prediction, clamp it to the data range [-1, 1], re-noise
// to the target level. Requires 0 <= t_prev < state.t; stepping from t = 0
// throws std::logic_error.
LatentState ddim_step(const LatentState& state, const Tensor& eps_pred,
                      const NoiseSchedule& schedule, int t_prev);

// eps_uncond + w * (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

// Up to max_inner_iters iterations at fixed t: run the (frozen) denoiser on
// z, build the enhanced per-phrase maps, compute the combined loss, descend
// z along its gradient scaled by eta. Stops before updating once the loss is
// under early_stop_threshold; every iteration appends one trace row tagged
// with step_index. A non-finite gradient or update aborts the step, keeps
// the last finite z, and appends a warning. An unconstrained layout is a
// no-op. The model is never mutated.
LatentState optimize_latent(const LatentState& state, const Layout& layout,
                            const GuidanceConfig& config, const ToyDenoiser& model,
                            int step_index);

// An enhanced phrase map harvested during generation, on the aggregation grid.
struct AttentionDump {
    int step = 0;       // sampler step index
    int timestep = 0;   // schedule timestep
    int phrase_index = 0;
    Tensor map;         // [h, w] in [0,1]
};

struct GenerationResult {
    Tensor image;  // [channels, S, S] in [0,1]
    std::vector<TraceRow> trace;
    std::vector<AttentionDump> dumps;
    std::vector<std::string> warnings;
};

// Full reverse process: seed-deterministic Gaussian init, total_steps DDIM
// updates under classifier-free guidance, latent optimization on the first
// optim_steps of them when enabled and the layout constrains anything.
// Enhanced maps are dumped at every optimized step and the final step.
// With guidance off (eta = 0, optim_steps = 0, or no constrained phrase)
// the output is the plain sampler's, bit for bit, with no trace or dumps.
GenerationResult generate(const std::vector<std::string>& prompt_tokens, const Layout& layout,
                          const GuidanceConfig& config, const ToyDenoiser& model);

}  // namespace lgen
