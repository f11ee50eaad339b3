#include "lgen/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "lgen/attention.hpp"
#include "lgen/autodiff.hpp"
#include "lgen/rand.hpp"

namespace lgen {

void GuidanceConfig::validate() const {
    if (eta < 0) throw std::invalid_argument("eta must be nonnegative");
    if (lambda < 0 || alpha < 0) throw std::invalid_argument("loss weights must be nonnegative");
    if (tau < 0) throw std::invalid_argument("tau must be nonnegative");
    if (total_steps < 1) throw std::invalid_argument("total_steps must be at least 1");
    if (optim_steps < 0) throw std::invalid_argument("optim_steps must be nonnegative");
    if (optim_steps > total_steps) {
        throw std::invalid_argument("optim_steps must not exceed total_steps");
    }
    if (max_inner_iters < 1) throw std::invalid_argument("max_inner_iters must be at least 1");
    if (early_stop_threshold < 0) {
        throw std::invalid_argument("early_stop_threshold must be nonnegative");
    }
    if (cfg_weight < 0) throw std::invalid_argument("cfg_weight must be nonnegative");
}

std::vector<int> ddim_timesteps(int schedule_steps, int steps) {
    if (steps < 1 || steps > schedule_steps) {
        throw std::invalid_argument("sampler steps must be in [1, schedule steps]");
    }
    const int stride = schedule_steps / steps;
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        ts[static_cast<size_t>(i)] = 1 + (steps - 1 - i) * stride;
    }
    return ts;
}

LatentState ddim_step(const LatentState& state, const Tensor& eps_pred,
                      const NoiseSchedule& schedule, int t_prev) {
    if (state.t == 0) throw std::logic_error("ddim_step: already at the terminal state t = 0");
    if (eps_pred.shape() != state.z.shape()) {
        throw std::invalid_argument("ddim_step: noise prediction shape " +
                                    shape_to_string(eps_pred.shape()) + " does not match latent " +
                                    shape_to_string(state.z.shape()));
    }
    if (t_prev < 0 || t_prev >= state.t) {
        throw std::invalid_argument("ddim_step: target timestep must be in [0, t)");
    }
    const double ab_t = schedule.at(state.t);
    const double ab_p = schedule.at(t_prev);
    const double sa_t = std::sqrt(ab_t), sn_t = std::sqrt(1.0 - ab_t);
    const double sa_p = std::sqrt(ab_p), sn_p = std::sqrt(1.0 - ab_p);

    LatentState next;
    next.t = t_prev;
    next.trace = state.trace;
    next.warnings = state.warnings;
    next.z = Tensor(state.z.shape());
    for (size_t i = 0; i < next.z.size(); ++i) {
        // clamping the reconstruction to the data range keeps early-step
        // prediction errors (amplified by 1/sqrt(ab_t)) from compounding
        const double x0 = std::clamp((state.z[i] - sn_t * eps_pred[i]) / sa_t, -1.0, 1.0);
        next.z[i] = sa_p * x0 + sn_p * eps_pred[i];
    }
    return next;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
    if (eps_uncond.shape() != eps_cond.shape()) {
        throw std::invalid_argument("cfg_combine: shapes differ");
    }
    if (w == 0.0) return eps_uncond;
    if (w == 1.0) return eps_cond;
    // difference form: coincident predictions return the input bit-exactly
    Tensor out(eps_uncond.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    }
    return out;
}

namespace {

// Enhanced map for each constrained phrase, in phrase order, on the
// aggregation grid. Shared by the descent loop and the dump harvester.
std::vector<EnhancedPhraseMap> phrase_maps(Tape& tape, const AttentionStack& stack,
                                           const Layout& layout, int tau) {
    std::vector<EnhancedPhraseMap> maps;
    for (int idx : layout.phrase_indices()) {
        const std::vector<int> pos = {idx};
        Var col = phrase_column(tape, stack.cross, pos);
        Var enh = enhance(tape, stack.self_map, col, tau);
        maps.push_back(normalize_reshape(tape, enh, stack.ref_w, stack.ref_h, idx));
    }
    return maps;
}

void check_phrase_indices(const Layout& layout, size_t prompt_len) {
    for (int idx : layout.phrase_indices()) {
        if (idx < 0 || idx >= static_cast<int>(prompt_len)) {
            throw std::invalid_argument("phrase index " + std::to_string(idx) +
                                        " is outside the prompt");
        }
    }
}

}  // namespace

LatentState optimize_latent(const LatentState& state, const Layout& layout,
                            const GuidanceConfig& config, const ToyDenoiser& model,
                            int step_index) {
    config.validate();
    LatentState cur = state;
    if (layout.phrases.empty() || !config.optimization_enabled()) return cur;
    check_phrase_indices(layout, layout.prompt_tokens.size());

    const std::vector<int> ids = model.vocab.encode(layout.prompt_tokens);
    const std::vector<int> order = layout.phrase_indices();
    std::vector<MaskSet> masks;  // grid known after the first forward pass

    for (int iter = 0; iter < config.max_inner_iters; ++iter) {
        Tape tape;
        BoundDenoiser net(tape, model, /*trainable=*/false);
        Var zv = tape.input(cur.z);
        BoundDenoiser::Pass pass = net.forward(zv, ids, cur.t);
        AttentionStack stack = aggregate(tape, pass.attention);
        if (masks.empty()) {
            for (int idx : order) {
                masks.push_back(rasterize(layout.phrases.at(idx), stack.ref_w, stack.ref_h));
            }
        }
        std::vector<EnhancedPhraseMap> maps = phrase_maps(tape, stack, layout, config.tau);
        LossTerms terms =
            combined_loss(tape, maps, masks, config.lambda, config.alpha, config.ablation);
        cur.trace.push_back(TraceRow{step_index, iter, terms.values});
        if (terms.values.combined < config.early_stop_threshold) break;

        Tensor g;
        try {
            g = tape.grad(terms.combined, zv).value;
        } catch (const nonfinite_error& e) {
            cur.warnings.push_back("step " + std::to_string(step_index) + " iteration " +
                                   std::to_string(iter) + ": " + e.what() +
                                   "; keeping the last finite latent");
            break;
        }
        Tensor stepped = add_scaled(cur.z, g, -config.eta);
        if (!stepped.all_finite()) {
            cur.warnings.push_back("step " + std::to_string(step_index) + " iteration " +
                                   std::to_string(iter) +
                                   ": update produced a non-finite latent; "
                                   "keeping the last finite latent");
            break;
        }
        cur.z = std::move(stepped);
    }
    return cur;
}

GenerationResult generate(const std::vector<std::string>& prompt_tokens, const Layout& layout,
                          const GuidanceConfig& config, const ToyDenoiser& model) {
    config.validate();
    if (prompt_tokens.empty()) throw std::invalid_argument("generate: empty prompt");
    if (!layout.phrases.empty()) {
        if (!layout.prompt_tokens.empty() && layout.prompt_tokens != prompt_tokens) {
            throw std::invalid_argument(
                "generate: layout prompt differs from the generation prompt");
        }
        check_phrase_indices(layout, prompt_tokens.size());
    }
    const std::vector<int> ids_cond = model.vocab.encode(prompt_tokens);
    const std::vector<int> ids_null = model.vocab.null_sequence();
    const std::vector<int> ts = ddim_timesteps(model.schedule.steps(), config.total_steps);
    const bool guided = config.optimization_enabled() && !layout.phrases.empty();

    Rand rng(config.seed);
    LatentState state;
    state.z = Tensor({model.arch.in_channels, model.arch.image_size, model.arch.image_size});
    for (size_t i = 0; i < state.z.size(); ++i) state.z[i] = rng.normal();

    GenerationResult res;
    for (int i = 0; i < config.total_steps; ++i) {
        state.t = ts[static_cast<size_t>(i)];
        if (guided && i < config.optim_steps) {
            state = optimize_latent(state, layout, config, model, i);
        }

        Tape tape;
        BoundDenoiser net(tape, model, /*trainable=*/false);
        Var zv = tape.constant(state.z);  // plain sampling never differentiates
        BoundDenoiser::Pass cond = net.forward(zv, ids_cond, state.t);
        if (guided && (i < config.optim_steps || i == config.total_steps - 1)) {
            AttentionStack stack = aggregate(tape, cond.attention);
            for (const EnhancedPhraseMap& m : phrase_maps(tape, stack, layout, config.tau)) {
                res.dumps.push_back(
                    AttentionDump{i, state.t, m.phrase_index, tape.value(m.map)});
            }
        }
        BoundDenoiser::Pass uncond = net.forward(zv, ids_null, state.t);
        Tensor eps = cfg_combine(tape.value(uncond.eps), tape.value(cond.eps), config.cfg_weight);
        const int t_prev = i + 1 < config.total_steps ? ts[static_cast<size_t>(i) + 1] : 0;
        state = ddim_step(state, eps, model.schedule, t_prev);
    }

    res.trace = std::move(state.trace);
    res.warnings = std::move(state.warnings);
    res.image = Tensor(state.z.shape());
    for (size_t i = 0; i < state.z.size(); ++i) {
        res.image[i] = std::clamp(0.5 * (state.z[i] + 1.0), 0.0, 1.0);
    }
    return res;
}

}  // namespace lgen
