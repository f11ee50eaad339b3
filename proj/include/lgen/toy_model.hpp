#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lgen/attention.hpp"
#include "lgen/autodiff.hpp"
#include "lgen/layout.hpp"
#include "lgen/tensor.hpp"

namespace lgen {

struct training_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct placement_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct checkpoint_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fixed word list with the start marker at index 0 and the end marker at the
// last index. The embedding table is a fixed random projection: the denoiser
// learns key/value maps on top of it rather than training the table itself.
struct TokenVocabulary {
    std::vector<std::string> tokens;
    int embedding_dim = 0;
    Tensor embedding;  // [vocab, embedding_dim]

    int size() const { return static_cast<int>(tokens.size()); }
    int start_index() const { return 0; }
    int end_index() const { return size() - 1; }
    bool contains(const std::string& word) const;
    int index_of(const std::string& word) const;  // throws std::invalid_argument
    std::vector<int> encode(const std::vector<std::string>& words) const;
    std::vector<int> null_sequence() const;  // just the two markers

    static TokenVocabulary standard(int embedding_dim = 16, uint64_t seed = 1);
};

// Word lists the scene generator and evaluator share.
const std::vector<std::string>& color_words();  // red green blue yellow
const std::vector<std::string>& shape_words();  // square circle
const std::vector<std::string>& count_words();  // one..five

// Rendering palette (RGB in [0,1]); the detector matches against the same
// values. Unknown color names throw std::invalid_argument.
std::array<double, 3> color_rgb(const std::string& color);
std::array<double, 3> background_rgb();

// Cumulative signal-retention curve of the forward process under a linear
// beta ramp. Index 0 is the clean sample (alpha_bar == 1); index t covers t
// noising steps.
struct NoiseSchedule {
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::vector<double> alpha_bar;  // size T+1, alpha_bar[0] == 1

    int steps() const { return static_cast<int>(alpha_bar.size()) - 1; }
    double at(int t) const;  // throws std::out_of_range

    static NoiseSchedule linear(int total_steps = 1000, double beta_start = 1e-4,
                                double beta_end = 0.02);
};

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& schedule);

// Architecture constants. Feature widths at the three spatial levels
// (image, image/2, image/4); attention runs at the two downsampled levels.
struct DenoiserArch {
    int image_size = 32;
    int in_channels = 3;
    int c1 = 8;
    int c2 = 16;
    int c3 = 24;
    int time_dim = 32;
    int groups = 4;

    void validate() const;  // throws std::invalid_argument
};

// Denoiser parameters plus everything needed to run it: vocabulary,
// noise schedule, and architecture constants. Parameters are named tensors
// in a fixed order so checkpoints and optimizer state stay aligned.
struct ToyDenoiser {
    DenoiserArch arch;
    TokenVocabulary vocab;
    NoiseSchedule schedule;
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    size_t scalar_count() const;

    static ToyDenoiser create(const DenoiserArch& arch, const TokenVocabulary& vocab,
                              const NoiseSchedule& schedule, uint64_t seed);
};

// Model parameters registered on one tape: inputs when trainable (training
// needs their gradients), constants when frozen (guidance differentiates
// only the latent). forward() may be called repeatedly on the same binding.
class BoundDenoiser {
public:
    BoundDenoiser(Tape& tape, const ToyDenoiser& model, bool trainable);

    struct Pass {
        Var eps;                                // same shape as the latent
        std::vector<AttentionLayer> attention;  // finest level first
    };
    Pass forward(Var z, const std::vector<int>& token_ids, int timestep) const;

    Var param_var(const std::string& name) const;
    const std::vector<Var>& param_vars() const { return vars_; }

private:
    Tape* tape_;
    const ToyDenoiser* model_;
    std::vector<Var> vars_;
    std::map<std::string, Var> by_name_;
    Var embedding_;
};

// One frozen forward pass on a private tape; plain tensors out.
struct NoisePrediction {
    Tensor eps;
    std::vector<Tensor> cross;                 // per layer [h*w, n]
    std::vector<Tensor> self_map;              // per layer [h*w, h*w]
    std::vector<std::pair<int, int>> grids;    // per layer (h, w)
};
NoisePrediction predict_noise(const ToyDenoiser& model, const Tensor& z,
                              const std::vector<int>& token_ids, int timestep);

// ---- Synthetic scenes ----

struct ObjectGroup {
    int count = 1;
    std::string color;
    std::string shape;
};

struct SceneSpec {
    std::vector<ObjectGroup> groups;
};

struct SyntheticScene {
    Tensor image;  // [3, 32, 32] in [0,1]
    std::vector<std::string> prompt_tokens;  // marker-wrapped
    Layout layout;                           // boxes keyed by color-token index
    uint64_t seed = 0;
};

// Renders axis-aligned squares/circles on a gray background. The prompt is
// "<count> <color> <shape>" per group; each group's boxes bind to its color
// token, and the shape word always directly follows the color word. Layout
// boxes are the tight pixel boxes padded by one pixel (clamped to the frame).
SyntheticScene make_scene(const SceneSpec& spec, uint64_t seed);

// Random spec: 1..max_groups groups with distinct colors, counts 1..max_count.
SceneSpec random_scene_spec(std::mt19937_64& rng, int max_groups = 2, int max_count = 3);

// Manifest: one scene per line, `<seed> <count> <color> <shape> [...]`,
// `#` comments. Round-trips through make_scene deterministically.
std::vector<std::pair<SceneSpec, uint64_t>> parse_manifest(const std::string& text);
std::string manifest_text(const std::vector<std::pair<SceneSpec, uint64_t>>& entries);

// ---- Training ----

struct TrainConfig {
    int epochs = 4;
    double lr = 2e-3;
    double cond_dropout = 0.1;
    int batch_size = 16;
    uint64_t seed = 0;
};

struct TrainResult {
    std::vector<std::pair<int, double>> loss_curve;  // (batch index, batch loss)
    long long conditioned_samples = 0;               // samples seen with real tokens
    long long total_samples = 0;
};

// Adam on the noise-prediction MSE. Conditioning is replaced by the null
// sequence at rate cond_dropout so the model also learns an unconditional
// prediction. A non-finite loss restores the last finite parameters and
// throws training_error.
TrainResult train(ToyDenoiser& model, const std::vector<SyntheticScene>& dataset,
                  const TrainConfig& cfg);

// ---- Checkpoints ----

// Binary container (magic LGCKPT01): vocabulary, schedule constants,
// architecture, then the named parameter tensors. Bit-exact round trip.
void save_checkpoint(const std::string& path, const ToyDenoiser& model);
ToyDenoiser load_checkpoint(const std::string& path);

}  // namespace lgen
