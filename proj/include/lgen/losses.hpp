#pragma once

#include <span>
#include <string>
#include <vector>

#include "lgen/attention.hpp"
#include "lgen/autodiff.hpp"
#include "lgen/layout.hpp"

namespace lgen {

// Which loss terms enter the combined objective. All three terms are always
// computed and reported; excluded terms get weight zero.
enum class AblationMode { R, RM, RMReg };

AblationMode parse_ablation_mode(const std::string& name);  // "r" | "rm" | "rmreg"
const char* ablation_mode_name(AblationMode mode);

struct LossBreakdown {
    double region = 0.0;          // mean (1 - inside-mass fraction)^2
    double marginal = 0.0;        // mean boundary mass / perimeter
    double regularization = 0.0;  // mean (1 - weakest per-object fraction)^2
    double combined = 0.0;        // region + lambda*marginal + alpha*regularization
    double lambda = 0.0, alpha = 0.0;  // effective weights after ablation
    bool zero_mass = false;       // some phrase had no attention mass at all
};

// Scalar loss nodes plus their recorded values for one evaluation.
struct LossTerms {
    Var region, marginal, regularization, combined;
    LossBreakdown values;
};

// maps[i] pairs with masks[i] (one entry per constrained phrase, in phrase
// order); every map must match its mask's grid. A phrase whose map has no
// mass scores the worst-case 1 for the ratio losses instead of raising, so
// optimization can keep running; the zero_mass flag reports it.
Var region_loss(Tape& t, std::span<const EnhancedPhraseMap> maps, std::span<const MaskSet> masks,
                bool* zero_mass = nullptr);
Var marginal_loss(Tape& t, std::span<const EnhancedPhraseMap> maps, std::span<const MaskSet> masks);
Var regularization_loss(Tape& t, std::span<const EnhancedPhraseMap> maps,
                        std::span<const MaskSet> masks, bool* zero_mass = nullptr);
LossTerms combined_loss(Tape& t, std::span<const EnhancedPhraseMap> maps,
                        std::span<const MaskSet> masks, double lambda, double alpha,
                        AblationMode mode = AblationMode::RMReg);

// 0/1 mask grid as an [h, w] tensor (same y-major layout as the grid).
Tensor mask_tensor(const MaskGrid& g);

// One inner-iteration record of the guidance loop.
struct TraceRow {
    int step = 0;
    int iteration = 0;
    LossBreakdown loss;
};

// CSV with header step,iteration,L_r,L_m,L_reg,L_mac.
void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows);
std::vector<TraceRow> read_trace_csv(const std::string& path);

}  // namespace lgen
