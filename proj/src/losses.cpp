#include "lgen/losses.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lgen {

namespace {

constexpr const char* kTraceHeader = "step,iteration,L_r,L_m,L_reg,L_mac";

void require_aligned(std::span<const EnhancedPhraseMap> maps, std::span<const MaskSet> masks,
                     const char* op) {
    if (maps.empty() || maps.size() != masks.size()) {
        throw std::invalid_argument(std::string(op) + ": need one mask set per phrase map");
    }
    for (size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].w != masks[i].grid_w || maps[i].h != masks[i].grid_h) {
            throw std::invalid_argument(std::string(op) + ": map grid " + std::to_string(maps[i].w) +
                                        "x" + std::to_string(maps[i].h) + " vs mask grid " +
                                        std::to_string(masks[i].grid_w) + "x" +
                                        std::to_string(masks[i].grid_h));
        }
    }
}

Var mean_of(Tape& t, std::span<const Var> terms) {
    const std::vector<double> coeffs(terms.size(), 1.0 / static_cast<double>(terms.size()));
    return t.lincomb(terms, coeffs);
}

}  // namespace

AblationMode parse_ablation_mode(const std::string& name) {
    if (name == "r") return AblationMode::R;
    if (name == "rm") return AblationMode::RM;
    if (name == "rmreg") return AblationMode::RMReg;
    throw std::invalid_argument("unknown ablation mode '" + name + "' (expected r, rm, or rmreg)");
}

const char* ablation_mode_name(AblationMode mode) {
    switch (mode) {
        case AblationMode::R: return "r";
        case AblationMode::RM: return "rm";
        case AblationMode::RMReg: return "rmreg";
    }
    return "?";
}

Tensor mask_tensor(const MaskGrid& g) {
    Tensor out({g.h, g.w});
    for (size_t i = 0; i < g.cells.size(); ++i) out[i] = g.cells[i] ? 1.0 : 0.0;
    return out;
}

Var region_loss(Tape& t, std::span<const EnhancedPhraseMap> maps, std::span<const MaskSet> masks,
                bool* zero_mass) {
    require_aligned(maps, masks, "region_loss");
    std::vector<Var> terms;
    terms.reserve(maps.size());
    for (size_t i = 0; i < maps.size(); ++i) {
        Var total = t.sum_all(maps[i].map);
        if (t.value(total)[0] <= 0.0) {
            if (zero_mass) *zero_mass = true;
            terms.push_back(t.constant_scalar(1.0));
            continue;
        }
        Var inside = t.sum_all(t.mul(maps[i].map, t.constant(mask_tensor(masks[i].interior))));
        Var miss = t.sub(t.constant_scalar(1.0), t.div_scalar(inside, total));
        terms.push_back(t.square(miss));
    }
    return mean_of(t, terms);
}

Var marginal_loss(Tape& t, std::span<const EnhancedPhraseMap> maps, std::span<const MaskSet> masks) {
    require_aligned(maps, masks, "marginal_loss");
    std::vector<Var> terms;
    terms.reserve(maps.size());
    for (size_t i = 0; i < maps.size(); ++i) {
        if (masks[i].perimeter_sum <= 0) {
            throw std::invalid_argument("marginal_loss: mask set has an empty perimeter");
        }
        Var on_ring = t.sum_all(t.mul(maps[i].map, t.constant(mask_tensor(masks[i].boundary))));
        terms.push_back(t.scale(on_ring, 1.0 / static_cast<double>(masks[i].perimeter_sum)));
    }
    return mean_of(t, terms);
}

Var regularization_loss(Tape& t, std::span<const EnhancedPhraseMap> maps,
                        std::span<const MaskSet> masks, bool* zero_mass) {
    require_aligned(maps, masks, "regularization_loss");
    std::vector<Var> terms;
    terms.reserve(maps.size());
    for (size_t i = 0; i < maps.size(); ++i) {
        if (masks[i].per_object.empty()) {
            throw std::invalid_argument("regularization_loss: mask set has no per-object grids");
        }
        Var total = t.sum_all(maps[i].map);
        if (t.value(total)[0] <= 0.0) {
            if (zero_mass) *zero_mass = true;
            terms.push_back(t.constant_scalar(1.0));
            continue;
        }
        std::vector<Var> fractions;
        fractions.reserve(masks[i].per_object.size());
        for (const MaskGrid& obj : masks[i].per_object) {
            Var inside = t.sum_all(t.mul(maps[i].map, t.constant(mask_tensor(obj))));
            fractions.push_back(t.div_scalar(inside, total));
        }
        Var weakest = t.min_of(fractions);  // ties resolve to the lowest object index
        terms.push_back(t.square(t.sub(t.constant_scalar(1.0), weakest)));
    }
    return mean_of(t, terms);
}

LossTerms combined_loss(Tape& t, std::span<const EnhancedPhraseMap> maps,
                        std::span<const MaskSet> masks, double lambda, double alpha,
                        AblationMode mode) {
    if (lambda < 0.0 || alpha < 0.0) {
        throw std::invalid_argument("combined_loss: weights must be nonnegative");
    }
    bool zero_mass = false;
    LossTerms out;
    out.region = region_loss(t, maps, masks, &zero_mass);
    out.marginal = marginal_loss(t, maps, masks);
    out.regularization = regularization_loss(t, maps, masks, &zero_mass);

    const double lam = (mode == AblationMode::R) ? 0.0 : lambda;
    const double alp = (mode == AblationMode::RMReg) ? alpha : 0.0;
    const Var terms[] = {out.region, out.marginal, out.regularization};
    const double coeffs[] = {1.0, lam, alp};
    out.combined = t.lincomb(terms, coeffs);

    out.values.region = t.value(out.region)[0];
    out.values.marginal = t.value(out.marginal)[0];
    out.values.regularization = t.value(out.regularization)[0];
    out.values.combined = t.value(out.combined)[0];
    out.values.lambda = lam;
    out.values.alpha = alp;
    out.values.zero_mass = zero_mass;
    return out;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
    out.precision(17);
    out << kTraceHeader << '\n';
    for (const TraceRow& r : rows) {
        out << r.step << ',' << r.iteration << ',' << r.loss.region << ',' << r.loss.marginal << ','
            << r.loss.regularization << ',' << r.loss.combined << '\n';
    }
    if (!out) throw std::runtime_error("write_trace_csv: write failed for " + path);
}

std::vector<TraceRow> read_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_trace_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kTraceHeader) {
        throw std::runtime_error("read_trace_csv: bad header in " + path);
    }
    std::vector<TraceRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        TraceRow r;
        char sep = 0;
        if (!(ss >> r.step >> sep >> r.iteration >> sep >> r.loss.region >> sep >> r.loss.marginal >>
              sep >> r.loss.regularization >> sep >> r.loss.combined)) {
            throw std::runtime_error("read_trace_csv: malformed row in " + path);
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace lgen
