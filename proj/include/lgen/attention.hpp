#pragma once

#include <span>
#include <string>
#include <vector>

#include "lgen/autodiff.hpp"
#include "lgen/tensor.hpp"

namespace lgen {

// One attention block recorded during a denoiser pass. Maps live on the
// pass's tape so losses differentiate through them back to the latent.
struct AttentionLayer {
    int h = 0, w = 0;  // spatial grid; cross is [h*w, n], self_map [h*w, h*w]
    Var cross;
    Var self_map;
};

// All layers of one pass plus their means on the reference grid (the largest
// layer grid). Coarser layers are aligned by nearest-neighbor upsampling;
// upsampled self maps are rescaled by 1/f^2 so rows still sum to 1.
struct AttentionStack {
    std::vector<AttentionLayer> layers;
    int ref_h = 0, ref_w = 0;
    Var cross;     // [ref_h*ref_w, n]
    Var self_map;  // [ref_h*ref_w, ref_h*ref_w]
};

// A phrase's enhanced cross-attention map scaled to [0,1] and laid out
// y-major on the reference grid as an [h, w] tensor (cell (x,y) at row y).
struct EnhancedPhraseMap {
    int phrase_index = -1;
    int w = 0, h = 0;
    Var map;
    bool constant_input = false;  // zero range before scaling -> map is all zeros
};

// softmax(q k^T / sqrt(d)) for q [rows, d], k [cols, d]. Cross attention
// keys come from token embeddings, self attention keys from the visual
// features; the formula is shared.
Var cross_attention(Tape& t, Var query, Var key);
Var self_attention(Tape& t, Var query, Var key);
Tensor cross_attention(const Tensor& query, const Tensor& key);
Tensor self_attention(const Tensor& query, const Tensor& key);

// Mean of the per-layer maps after aligning every layer to the largest grid.
AttentionStack aggregate(Tape& t, std::vector<AttentionLayer> layers);

// Column(s) of the aggregated cross map for one phrase; multi-token phrases
// average their token columns. Result is [h*w, 1].
Var phrase_column(Tape& t, Var cross, std::span<const int> token_positions);

// tau applications of the aggregated self map to a phrase column
// (v <- A_s^T v). Each application redistributes every cell's mass along
// that cell's outgoing attention weights, so a row-stochastic map conserves
// the column's total mass exactly; tau = 0 returns the column unchanged.
Var enhance(Tape& t, Var self_map, Var col, int tau);
Tensor enhance(const Tensor& self_map, const Tensor& col, int tau);

// (v - min) / (max - min), reshaped y-major to [h, w]. A constant input has
// no spatial signal and becomes all zeros (with zero gradient).
EnhancedPhraseMap normalize_reshape(Tape& t, Var v, int w, int h, int phrase_index);
Tensor normalize_map(const Tensor& v);

// Plain-text grid dumps: one row per line, space-separated, full precision.
std::string attention_dump_filename(int step, int phrase_index);
void write_attention_dump(const std::string& path, const Tensor& map);
Tensor read_attention_dump(const std::string& path);

}  // namespace lgen
