#include "lgen/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lgen/rand.hpp"

namespace lgen {

namespace {

const std::vector<std::string> kColors = {"red", "green", "blue", "yellow"};
const std::vector<std::string> kShapes = {"square", "circle"};
const std::vector<std::string> kCounts = {"one", "two", "three", "four", "five"};
const std::vector<std::string> kFillers = {"a", "and", "the", "of"};

Tensor uniform_init(std::vector<int> shape, double k, Rand& rng) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = k * (2.0 * rng.uniform() - 1.0);
    return t;
}

// [1, dim]: sin half then cos half over log-spaced frequencies.
Tensor sinusoidal_embedding(int timestep, int dim) {
    Tensor out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[static_cast<size_t>(i)] = std::sin(timestep * freq);
        out[static_cast<size_t>(half + i)] = std::cos(timestep * freq);
    }
    return out;
}

}  // namespace

const std::vector<std::string>& color_words() { return kColors; }
const std::vector<std::string>& shape_words() { return kShapes; }
const std::vector<std::string>& count_words() { return kCounts; }

std::array<double, 3> color_rgb(const std::string& color) {
    if (color == "red") return {0.85, 0.10, 0.10};
    if (color == "green") return {0.10, 0.70, 0.15};
    if (color == "blue") return {0.15, 0.20, 0.85};
    if (color == "yellow") return {0.90, 0.85, 0.10};
    throw std::invalid_argument("unknown color '" + color + "'");
}

std::array<double, 3> background_rgb() { return {0.5, 0.5, 0.5}; }

// ---- vocabulary ----

bool TokenVocabulary::contains(const std::string& word) const {
    return std::find(tokens.begin(), tokens.end(), word) != tokens.end();
}

int TokenVocabulary::index_of(const std::string& word) const {
    auto it = std::find(tokens.begin(), tokens.end(), word);
    if (it == tokens.end()) throw std::invalid_argument("unknown word '" + word + "'");
    return static_cast<int>(it - tokens.begin());
}

std::vector<int> TokenVocabulary::encode(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const std::string& w : words) ids.push_back(index_of(w));
    return ids;
}

std::vector<int> TokenVocabulary::null_sequence() const { return {start_index(), end_index()}; }

TokenVocabulary TokenVocabulary::standard(int embedding_dim, uint64_t seed) {
    TokenVocabulary v;
    v.tokens.push_back("<s>");
    for (const auto& w : kColors) v.tokens.push_back(w);
    for (const auto& w : kShapes) v.tokens.push_back(w);
    for (const auto& w : kCounts) v.tokens.push_back(w);
    for (const auto& w : kFillers) v.tokens.push_back(w);
    v.tokens.push_back("</s>");
    v.embedding_dim = embedding_dim;
    Rand rng(seed);
    v.embedding = uniform_init({v.size(), embedding_dim}, 1.0, rng);
    return v;
}

// ---- schedule ----

double NoiseSchedule::at(int t) const {
    if (t < 0 || t > steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " +
                                std::to_string(steps()) + "]");
    }
    return alpha_bar[static_cast<size_t>(t)];
}

NoiseSchedule NoiseSchedule::linear(int total_steps, double beta_start, double beta_end) {
    if (total_steps < 1) throw std::invalid_argument("schedule needs at least one step");
    NoiseSchedule s;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha_bar.resize(static_cast<size_t>(total_steps) + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= total_steps; ++t) {
        const double frac = total_steps > 1 ? static_cast<double>(t - 1) / (total_steps - 1) : 0.0;
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - beta);
    }
    return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& schedule) {
    if (x0.shape() != noise.shape()) {
        throw std::invalid_argument("forward_noise: x0 " + x0.shape_str() + " vs noise " +
                                    noise.shape_str());
    }
    const double ab = schedule.at(t);
    Tensor out(x0.shape());
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (size_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * noise[i];
    return out;
}

// ---- architecture ----

void DenoiserArch::validate() const {
    if (image_size < 8 || image_size % 4 != 0) {
        throw std::invalid_argument("image_size must be a multiple of 4 and at least 8");
    }
    if (in_channels < 1) throw std::invalid_argument("in_channels must be positive");
    if (c1 < 1 || c2 < 1 || c3 < 1) throw std::invalid_argument("channel widths must be positive");
    if (groups < 1 || c1 % groups || c2 % groups || c3 % groups) {
        throw std::invalid_argument("groups must divide every channel width");
    }
    if (time_dim < 2 || time_dim % 2 != 0) {
        throw std::invalid_argument("time_dim must be even and at least 2");
    }
}

Tensor& ToyDenoiser::param(const std::string& name) {
    for (auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw std::invalid_argument("no parameter named '" + name + "'");
}

const Tensor& ToyDenoiser::param(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw std::invalid_argument("no parameter named '" + name + "'");
}

size_t ToyDenoiser::scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

ToyDenoiser ToyDenoiser::create(const DenoiserArch& arch, const TokenVocabulary& vocab,
                                const NoiseSchedule& schedule, uint64_t seed) {
    arch.validate();
    if (vocab.size() < 3 || vocab.embedding.rank() != 2 || vocab.embedding.dim(0) != vocab.size() ||
        vocab.embedding.dim(1) != vocab.embedding_dim) {
        throw std::invalid_argument("vocabulary embedding table does not match the word list");
    }
    ToyDenoiser m;
    m.arch = arch;
    m.vocab = vocab;
    m.schedule = schedule;

    Rand rng(seed);
    auto add = [&](const std::string& name, Tensor t) { m.params.emplace_back(name, std::move(t)); };
    auto conv = [&](const std::string& name, int cout, int cin) {
        add(name + ".w", uniform_init({cout, cin, 3, 3}, 1.0 / std::sqrt(9.0 * cin), rng));
        add(name + ".b", Tensor({cout}));
    };
    auto linear = [&](const std::string& name, int in, int out) {
        add(name + ".w", uniform_init({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        add(name + ".b", Tensor({out}));
    };
    auto norm = [&](const std::string& name, int c) {
        add(name + ".g", Tensor::full({c}, 1.0));
        add(name + ".b", Tensor({c}));
    };
    auto attn_block = [&](const std::string& p, int c) {
        norm(p + ".gn", c);
        linear(p + ".sq", c, c);
        linear(p + ".sk", c, c);
        linear(p + ".sv", c, c);
        linear(p + ".cq", c, c);
        linear(p + ".ck", vocab.embedding_dim, c);
        linear(p + ".cv", vocab.embedding_dim, c);
        linear(p + ".out", c, c);
    };
    auto res_block = [&](const std::string& p, int c) {
        norm(p + ".gn", c);
        conv(p + ".conv", c, c);
        linear(p + ".temb", arch.time_dim, c);
    };

    linear("time.l1", arch.time_dim, arch.time_dim);
    linear("time.l2", arch.time_dim, arch.time_dim);
    conv("in", arch.c1, arch.in_channels);
    conv("down1", arch.c2, arch.c1);
    attn_block("attn_mid", arch.c2);
    res_block("res_mid", arch.c2);
    conv("down2", arch.c3, arch.c2);
    attn_block("attn_low", arch.c3);
    res_block("res_low", arch.c3);
    conv("up1", arch.c2, arch.c3);
    res_block("res_up", arch.c2);
    conv("up2", arch.c1, arch.c2);
    norm("out.gn", arch.c1);
    add("out.w", Tensor({arch.in_channels, arch.c1, 3, 3}));  // zero start: eps(0) == 0
    add("out.b", Tensor({arch.in_channels}));
    return m;
}

// ---- bound forward pass ----

BoundDenoiser::BoundDenoiser(Tape& tape, const ToyDenoiser& model, bool trainable)
    : tape_(&tape), model_(&model) {
    vars_.reserve(model.params.size());
    for (const auto& [name, t] : model.params) {
        Var v = trainable ? tape.input(t) : tape.constant(t);
        vars_.push_back(v);
        by_name_.emplace(name, v);
    }
    embedding_ = tape.constant(model.vocab.embedding);
}

Var BoundDenoiser::param_var(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::invalid_argument("no parameter named '" + name + "'");
    return it->second;
}

BoundDenoiser::Pass BoundDenoiser::forward(Var z, const std::vector<int>& token_ids,
                                           int timestep) const {
    Tape& t = *tape_;
    const DenoiserArch& a = model_->arch;
    const Tensor& zv = t.value(z);
    if (zv.rank() != 3 || zv.dim(0) != a.in_channels || zv.dim(1) != a.image_size ||
        zv.dim(2) != a.image_size) {
        throw std::invalid_argument("latent shape " + zv.shape_str() + " does not match the model");
    }
    if (token_ids.empty()) throw std::invalid_argument("empty token sequence");
    model_->schedule.at(timestep);  // range check

    auto P = [&](const std::string& n) { return param_var(n); };
    auto lin = [&](Var x, const std::string& n) {
        return t.add_row_vec(t.matmul(x, P(n + ".w")), P(n + ".b"));
    };

    // timestep embedding -> [1, time_dim]
    Var temb = t.constant(sinusoidal_embedding(timestep, a.time_dim));
    temb = lin(t.silu(lin(temb, "time.l1")), "time.l2");

    Var tok = t.embed(embedding_, token_ids);  // [n, d_e]

    auto res_block = [&](Var x, const std::string& p, int c) {
        Var h = t.silu(t.group_norm(x, P(p + ".gn.g"), P(p + ".gn.b"), a.groups));
        h = t.conv2d(h, P(p + ".conv.w"), P(p + ".conv.b"), 1, 1);
        Var tv = t.reshape(lin(temb, p + ".temb"), {c});
        return t.add(x, t.add_channel(h, tv));
    };
    auto attn_block = [&](Var x, const std::string& p, int c, int r) {
        Var s = t.chw_to_seq(t.group_norm(x, P(p + ".gn.g"), P(p + ".gn.b"), a.groups));
        Var self_map = self_attention(t, lin(s, p + ".sq"), lin(s, p + ".sk"));
        Var so = t.matmul(self_map, lin(s, p + ".sv"));
        Var cross = cross_attention(t, lin(s, p + ".cq"), lin(tok, p + ".ck"));
        Var co = t.matmul(cross, lin(tok, p + ".cv"));
        Var o = lin(t.add(so, co), p + ".out");
        AttentionLayer layer{r, r, cross, self_map};
        return std::make_pair(t.add(x, t.seq_to_chw(o, c, r, r)), layer);
    };

    const int mid = a.image_size / 2, low = a.image_size / 4;
    Var x = t.conv2d(z, P("in.w"), P("in.b"), 1, 1);
    Var d1 = t.conv2d(x, P("down1.w"), P("down1.b"), 2, 1);
    auto [d1a, mid_layer] = attn_block(d1, "attn_mid", a.c2, mid);
    d1 = res_block(d1a, "res_mid", a.c2);
    Var d2 = t.conv2d(d1, P("down2.w"), P("down2.b"), 2, 1);
    auto [d2a, low_layer] = attn_block(d2, "attn_low", a.c3, low);
    d2 = res_block(d2a, "res_low", a.c3);
    Var u1 = t.conv2d(t.upsample2x(d2), P("up1.w"), P("up1.b"), 1, 1);
    u1 = res_block(t.add(u1, d1), "res_up", a.c2);
    Var u0 = t.conv2d(t.upsample2x(u1), P("up2.w"), P("up2.b"), 1, 1);
    u0 = t.add(u0, x);
    Var o = t.silu(t.group_norm(u0, P("out.gn.g"), P("out.gn.b"), a.groups));
    Var eps = t.conv2d(o, P("out.w"), P("out.b"), 1, 1);
    return {eps, {mid_layer, low_layer}};
}

NoisePrediction predict_noise(const ToyDenoiser& model, const Tensor& z,
                              const std::vector<int>& token_ids, int timestep) {
    Tape tape;
    BoundDenoiser bound(tape, model, /*trainable=*/false);
    BoundDenoiser::Pass pass = bound.forward(tape.constant(z), token_ids, timestep);
    NoisePrediction out;
    out.eps = tape.value(pass.eps);
    for (const AttentionLayer& layer : pass.attention) {
        out.cross.push_back(tape.value(layer.cross));
        out.self_map.push_back(tape.value(layer.self_map));
        out.grids.emplace_back(layer.h, layer.w);
    }
    return out;
}

// ---- scenes ----

namespace {

struct PixelRect {
    int x1, y1, x2, y2;  // inclusive
    bool intersects(const PixelRect& o) const {
        return x1 <= o.x2 && o.x1 <= x2 && y1 <= o.y2 && o.y1 <= y2;
    }
};

void check_group(const ObjectGroup& g) {
    if (g.count < 1 || g.count > static_cast<int>(kCounts.size())) {
        throw std::invalid_argument("object count " + std::to_string(g.count) + " outside [1, " +
                                    std::to_string(kCounts.size()) + "]");
    }
    color_rgb(g.color);
    if (std::find(kShapes.begin(), kShapes.end(), g.shape) == kShapes.end()) {
        throw std::invalid_argument("unknown shape '" + g.shape + "'");
    }
}

}  // namespace

SyntheticScene make_scene(const SceneSpec& spec, uint64_t seed) {
    if (spec.groups.empty()) throw std::invalid_argument("scene spec has no object groups");
    int total = 0;
    for (const ObjectGroup& g : spec.groups) {
        check_group(g);
        total += g.count;
    }

    const int S = 32;
    // More objects -> smaller sizes so placement stays feasible.
    int lo = 8, hi = 13;
    if (total >= 3) lo = 7, hi = 10;
    if (total >= 5) lo = 6, hi = 8;

    Rand rng(seed);
    SyntheticScene scene;
    scene.seed = seed;
    scene.image = Tensor({3, S, S});
    const auto bg = background_rgb();
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < S * S; ++i) scene.image[static_cast<size_t>(c) * S * S + i] = bg[c];
    }

    std::vector<std::string> body;
    std::vector<PixelRect> occupied;
    std::map<int, std::vector<BoundingBox>> phrases;

    // Each attempt redraws every object size and position; an attempt fails only
    // when some object has no feasible slot at all, so retrying with fresh sizes
    // resolves fragmentation and only truly overfull specs exhaust the budget.
    const int kSceneAttempts = 50;
    bool done = false;
    std::string blocked;
    for (int attempt = 0; attempt < kSceneAttempts && !done; ++attempt) {
        body.clear();
        occupied.clear();
        phrases.clear();
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < S * S; ++i) {
                scene.image[static_cast<size_t>(c) * S * S + i] = bg[c];
            }
        }

        done = true;
        for (size_t gi = 0; gi < spec.groups.size() && done; ++gi) {
            const ObjectGroup& g = spec.groups[gi];
            if (gi > 0) body.push_back("and");
            body.push_back(kCounts[static_cast<size_t>(g.count - 1)]);
            const int color_token = static_cast<int>(body.size()) + 1;  // +1 for the start marker
            body.push_back(g.color);
            body.push_back(g.shape);
            const auto rgb = color_rgb(g.color);

            for (int k = 0; k < g.count && done; ++k) {
                const int size = rng.between(lo, hi);
                std::vector<std::pair<int, int>> open;
                for (int y0 = 1; y0 <= S - 1 - size; ++y0) {
                    for (int x0 = 1; x0 <= S - 1 - size; ++x0) {
                        PixelRect grown{x0 - 1, y0 - 1, x0 + size, y0 + size};
                        bool clash = false;
                        for (const PixelRect& r : occupied) {
                            if (grown.intersects(r)) {
                                clash = true;
                                break;
                            }
                        }
                        if (!clash) open.emplace_back(x0, y0);
                    }
                }
                if (open.empty()) {
                    blocked = "object " + std::to_string(k + 1) + " of '" + g.color + " " +
                              g.shape + "'";
                    done = false;
                    break;
                }
                const auto [x0, y0] = open[static_cast<size_t>(rng.below(static_cast<int>(open.size())))];
                occupied.push_back(PixelRect{x0 - 1, y0 - 1, x0 + size, y0 + size});

                int px_min = S, px_max = -1, py_min = S, py_max = -1;
                const double cx = x0 + (size - 1) / 2.0, cy = y0 + (size - 1) / 2.0;
                const double r2 = (size / 2.0 - 0.2) * (size / 2.0 - 0.2);
                for (int py = y0; py < y0 + size; ++py) {
                    for (int px = x0; px < x0 + size; ++px) {
                        if (g.shape == "circle") {
                            const double dx = px - cx, dy = py - cy;
                            if (dx * dx + dy * dy > r2) continue;
                        }
                        for (int c = 0; c < 3; ++c) {
                            scene.image[(static_cast<size_t>(c) * S + py) * S + px] = rgb[c];
                        }
                        px_min = std::min(px_min, px);
                        px_max = std::max(px_max, px);
                        py_min = std::min(py_min, py);
                        py_max = std::max(py_max, py);
                    }
                }
                BoundingBox box{std::max(0, px_min - 1) / double(S), std::max(0, py_min - 1) / double(S),
                                std::min(S, px_max + 2) / double(S), std::min(S, py_max + 2) / double(S)};
                phrases[color_token].push_back(box);
            }
        }
    }
    if (!done) {
        throw placement_error("could not place " + blocked + " after " +
                              std::to_string(kSceneAttempts) + " scene attempts");
    }

    scene.prompt_tokens.push_back("<s>");
    scene.prompt_tokens.insert(scene.prompt_tokens.end(), body.begin(), body.end());
    scene.prompt_tokens.push_back("</s>");
    scene.layout.prompt_tokens = scene.prompt_tokens;
    scene.layout.phrases = std::move(phrases);
    return scene;
}

SceneSpec random_scene_spec(std::mt19937_64& rng, int max_groups, int max_count) {
    if (max_groups < 1 || max_groups > static_cast<int>(kColors.size()) || max_count < 1 ||
        max_count > static_cast<int>(kCounts.size())) {
        throw std::invalid_argument("unsatisfiable scene-spec bounds");
    }
    Rand r(rng());
    SceneSpec spec;
    std::vector<std::string> colors = kColors;
    r.shuffle(colors);
    const int n_groups = r.between(1, max_groups);
    for (int i = 0; i < n_groups; ++i) {
        ObjectGroup g;
        g.count = r.between(1, max_count);
        g.color = colors[static_cast<size_t>(i)];
        g.shape = kShapes[static_cast<size_t>(r.below(2))];
        spec.groups.push_back(std::move(g));
    }
    return spec;
}

// ---- manifest ----

std::vector<std::pair<SceneSpec, uint64_t>> parse_manifest(const std::string& text) {
    std::vector<std::pair<SceneSpec, uint64_t>> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        uint64_t seed;
        if (!(ls >> seed)) {
            std::string left;
            if (ls.clear(), ls >> left) {
                throw parse_error("manifest line " + std::to_string(line_no) +
                                  ": expected a numeric seed, got '" + left + "'");
            }
            continue;  // blank / comment-only line
        }
        SceneSpec spec;
        ObjectGroup g;
        while (ls >> g.count >> g.color >> g.shape) {
            try {
                check_group(g);
            } catch (const std::invalid_argument& e) {
                throw parse_error("manifest line " + std::to_string(line_no) + ": " + e.what());
            }
            spec.groups.push_back(g);
        }
        if (spec.groups.empty()) {
            throw parse_error("manifest line " + std::to_string(line_no) +
                              ": no object groups after the seed");
        }
        out.emplace_back(std::move(spec), seed);
    }
    return out;
}

std::string manifest_text(const std::vector<std::pair<SceneSpec, uint64_t>>& entries) {
    std::ostringstream out;
    for (const auto& [spec, seed] : entries) {
        out << seed;
        for (const ObjectGroup& g : spec.groups) {
            out << ' ' << g.count << ' ' << g.color << ' ' << g.shape;
        }
        out << '\n';
    }
    return out.str();
}

// ---- training ----

TrainResult train(ToyDenoiser& model, const std::vector<SyntheticScene>& dataset,
                  const TrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
    if (cfg.epochs < 0) throw std::invalid_argument("train: epochs must be nonnegative");
    if (cfg.lr < 0) throw std::invalid_argument("train: lr must be nonnegative");
    if (cfg.cond_dropout < 0 || cfg.cond_dropout > 1) {
        throw std::invalid_argument("train: cond_dropout must lie in [0, 1]");
    }

    const int T = model.schedule.steps();
    const size_t numel = 3u * model.arch.image_size * model.arch.image_size;

    std::vector<Tensor> x0s;
    std::vector<std::vector<int>> token_ids;
    x0s.reserve(dataset.size());
    token_ids.reserve(dataset.size());
    for (const SyntheticScene& s : dataset) {
        Tensor x0 = scale(s.image, 2.0);
        for (size_t i = 0; i < x0.size(); ++i) x0[i] -= 1.0;
        x0s.push_back(std::move(x0));
        token_ids.push_back(model.vocab.encode(s.prompt_tokens));
    }
    const std::vector<int> null_ids = model.vocab.null_sequence();

    // Adam state
    const size_t P = model.params.size();
    std::vector<Tensor> m(P), v(P);
    for (size_t i = 0; i < P; ++i) {
        m[i] = Tensor(model.params[i].second.shape());
        v[i] = Tensor(model.params[i].second.shape());
    }
    const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

    Rand rng(cfg.seed);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    TrainResult result;
    int batch_index = 0;
    long long adam_step = 0;
    std::vector<std::pair<std::string, Tensor>> snapshot;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            snapshot = model.params;
            try {
                Tape tape;
                BoundDenoiser bound(tape, model, /*trainable=*/true);
                std::vector<Var> sample_losses;
                for (size_t bi = start; bi < stop; ++bi) {
                    const size_t si = order[bi];
                    const int t = rng.between(1, T);
                    Tensor noise(x0s[si].shape());
                    for (size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
                    const bool conditioned = rng.uniform() >= cfg.cond_dropout;
                    ++result.total_samples;
                    if (conditioned) ++result.conditioned_samples;

                    Tensor zt = forward_noise(x0s[si], t, noise, model.schedule);
                    BoundDenoiser::Pass pass = bound.forward(
                        tape.constant(std::move(zt)), conditioned ? token_ids[si] : null_ids, t);
                    Var diff = tape.sub(pass.eps, tape.constant(std::move(noise)));
                    sample_losses.push_back(
                        tape.scale(tape.sum_all(tape.square(diff)), 1.0 / static_cast<double>(numel)));
                }
                const std::vector<double> coeffs(sample_losses.size(),
                                                 1.0 / static_cast<double>(sample_losses.size()));
                Var loss = tape.lincomb(sample_losses, coeffs);
                const double loss_value = tape.value(loss)[0];
                if (!std::isfinite(loss_value)) {
                    throw nonfinite_error("batch loss is not finite");
                }
                result.loss_curve.emplace_back(batch_index, loss_value);

                if (cfg.lr > 0) {
                    tape.backward(loss);
                    ++adam_step;
                    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_step));
                    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_step));
                    for (size_t i = 0; i < P; ++i) {
                        Tensor g = tape.grad_value(bound.param_vars()[i]);
                        if (!g.all_finite()) throw nonfinite_error("non-finite parameter gradient");
                        Tensor& p = model.params[i].second;
                        for (size_t j = 0; j < p.size(); ++j) {
                            m[i][j] = b1 * m[i][j] + (1.0 - b1) * g[j];
                            v[i][j] = b2 * v[i][j] + (1.0 - b2) * g[j] * g[j];
                            p[j] -= cfg.lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + adam_eps);
                        }
                        if (!p.all_finite()) throw nonfinite_error("parameters overflowed");
                    }
                }
            } catch (const nonfinite_error& e) {
                model.params = snapshot;  // last finite parameters
                throw training_error("training diverged at batch " + std::to_string(batch_index) +
                                     ": " + e.what());
            }
            ++batch_index;
        }
    }
    return result;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'L', 'G', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_f64(std::ostream& out, double v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_tensor(std::ostream& out, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) put_u32(out, static_cast<uint32_t>(t.dim(d)));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

uint32_t get_u32(std::istream& in) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw checkpoint_error("truncated checkpoint");
    return v;
}
double get_f64(std::istream& in) {
    double v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw checkpoint_error("truncated checkpoint");
    return v;
}
std::string get_str(std::istream& in) {
    const uint32_t n = get_u32(in);
    if (n > (1u << 20)) throw checkpoint_error("corrupt checkpoint: oversized string");
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw checkpoint_error("truncated checkpoint");
    return s;
}
Tensor get_tensor(std::istream& in) {
    const uint32_t rank = get_u32(in);
    if (rank > 8) throw checkpoint_error("corrupt checkpoint: tensor rank " + std::to_string(rank));
    std::vector<int> shape;
    for (uint32_t d = 0; d < rank; ++d) {
        const uint32_t dim = get_u32(in);
        if (dim == 0 || dim > (1u << 24)) throw checkpoint_error("corrupt checkpoint: bad dimension");
        shape.push_back(static_cast<int>(dim));
    }
    Tensor t(shape.empty() ? std::vector<int>{1} : shape);
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw checkpoint_error("truncated checkpoint");
    }
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const ToyDenoiser& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw checkpoint_error("cannot write checkpoint '" + path + "'");
    out.write(kMagic, sizeof kMagic);
    put_u32(out, static_cast<uint32_t>(model.arch.image_size));
    put_u32(out, static_cast<uint32_t>(model.arch.in_channels));
    put_u32(out, static_cast<uint32_t>(model.arch.c1));
    put_u32(out, static_cast<uint32_t>(model.arch.c2));
    put_u32(out, static_cast<uint32_t>(model.arch.c3));
    put_u32(out, static_cast<uint32_t>(model.arch.time_dim));
    put_u32(out, static_cast<uint32_t>(model.arch.groups));
    put_u32(out, static_cast<uint32_t>(model.vocab.size()));
    put_u32(out, static_cast<uint32_t>(model.vocab.embedding_dim));
    for (const std::string& tok : model.vocab.tokens) put_str(out, tok);
    put_tensor(out, model.vocab.embedding);
    put_f64(out, model.schedule.beta_start);
    put_f64(out, model.schedule.beta_end);
    put_u32(out, static_cast<uint32_t>(model.schedule.steps()));
    put_u32(out, static_cast<uint32_t>(model.params.size()));
    for (const auto& [name, t] : model.params) {
        put_str(out, name);
        put_tensor(out, t);
    }
    if (!out) throw checkpoint_error("failed writing checkpoint '" + path + "'");
}

ToyDenoiser load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw checkpoint_error("cannot read checkpoint '" + path + "'");
    char magic[sizeof kMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw checkpoint_error("'" + path + "' is not a LGCKPT01 checkpoint");
    }
    ToyDenoiser m;
    m.arch.image_size = static_cast<int>(get_u32(in));
    m.arch.in_channels = static_cast<int>(get_u32(in));
    m.arch.c1 = static_cast<int>(get_u32(in));
    m.arch.c2 = static_cast<int>(get_u32(in));
    m.arch.c3 = static_cast<int>(get_u32(in));
    m.arch.time_dim = static_cast<int>(get_u32(in));
    m.arch.groups = static_cast<int>(get_u32(in));
    m.arch.validate();
    const uint32_t vocab_size = get_u32(in);
    m.vocab.embedding_dim = static_cast<int>(get_u32(in));
    if (vocab_size < 3 || vocab_size > 4096) throw checkpoint_error("corrupt checkpoint: vocabulary size");
    for (uint32_t i = 0; i < vocab_size; ++i) m.vocab.tokens.push_back(get_str(in));
    m.vocab.embedding = get_tensor(in);
    if (m.vocab.embedding.rank() != 2 || m.vocab.embedding.dim(0) != static_cast<int>(vocab_size) ||
        m.vocab.embedding.dim(1) != m.vocab.embedding_dim) {
        throw checkpoint_error("corrupt checkpoint: embedding table shape");
    }
    const double beta_start = get_f64(in);
    const double beta_end = get_f64(in);
    const int steps = static_cast<int>(get_u32(in));
    m.schedule = NoiseSchedule::linear(steps, beta_start, beta_end);
    const uint32_t n_params = get_u32(in);
    if (n_params == 0 || n_params > 4096) throw checkpoint_error("corrupt checkpoint: parameter count");
    for (uint32_t i = 0; i < n_params; ++i) {
        std::string name = get_str(in);
        Tensor t = get_tensor(in);
        m.params.emplace_back(std::move(name), std::move(t));
    }
    return m;
}

}  // namespace lgen
