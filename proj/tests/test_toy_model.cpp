#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <set>

#include "lgen/rand.hpp"
#include "lgen/toy_model.hpp"
#include "oracles.hpp"

using namespace lgen;

namespace {

ToyDenoiser tiny_model(uint64_t seed = 7) {
    DenoiserArch arch;  // 32x32 defaults
    return ToyDenoiser::create(arch, TokenVocabulary::standard(16, 1),
                               NoiseSchedule::linear(), seed);
}

Tensor random_latent(uint64_t seed, int channels = 3, int size = 32) {
    Rand rng(seed);
    Tensor z({channels, size, size});
    for (size_t i = 0; i < z.size(); ++i) z[i] = rng.normal();
    return z;
}

bool is_color(const Tensor& img, int x, int y, const std::array<double, 3>& rgb) {
    const int s = img.dim(1);
    for (int c = 0; c < 3; ++c) {
        if (img[(static_cast<size_t>(c) * s + y) * s + x] != rgb[c]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("vocabulary pins markers to the ends") {
    TokenVocabulary v = TokenVocabulary::standard(16, 1);
    CHECK(v.tokens.front() == "<s>");
    CHECK(v.tokens.back() == "</s>");
    CHECK(v.index_of("<s>") == 0);
    CHECK(v.index_of("</s>") == v.size() - 1);
    CHECK(v.null_sequence() == std::vector<int>{0, v.size() - 1});
    CHECK(v.embedding.dim(0) == v.size());
    CHECK(v.embedding.dim(1) == 16);
    for (const auto& w : color_words()) CHECK(v.contains(w));
    for (const auto& w : shape_words()) CHECK(v.contains(w));
    for (const auto& w : count_words()) CHECK(v.contains(w));
    CHECK_THROWS_AS(v.index_of("zebra"), std::invalid_argument);

    const std::vector<int> ids = v.encode({"<s>", "two", "red", "square", "</s>"});
    REQUIRE(ids.size() == 5);
    CHECK(ids[0] == 0);
    CHECK(ids[4] == v.size() - 1);
    CHECK(v.tokens[static_cast<size_t>(ids[2])] == "red");
}

TEST_CASE("noise schedule starts clean and decays monotonically") {
    NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    CHECK(s.steps() == 1000);
    CHECK(s.at(0) == 1.0);
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.at(t) < s.at(t - 1));
        CHECK(s.at(t) > 0.0);
    }
    CHECK(s.at(1000) < 0.01);
    CHECK_THROWS_AS(s.at(-1), std::out_of_range);
    CHECK_THROWS_AS(s.at(1001), std::out_of_range);
}

TEST_CASE("forward noising interpolates between sample and noise") {
    NoiseSchedule s = NoiseSchedule::linear();
    Tensor x0 = random_latent(11);
    for (size_t i = 0; i < x0.size(); ++i) x0[i] = std::tanh(x0[i]);  // keep in [-1,1]
    Tensor noise = random_latent(12);

    Tensor z0 = forward_noise(x0, 0, noise, s);
    CHECK(oracle::bit_equal(z0, x0));

    Tensor zT = forward_noise(x0, 1000, noise, s);
    CHECK(oracle::max_abs_diff(zT, noise) < 0.01);

    // mid-t agrees with the closed form recomputed here
    const int t = 500;
    Tensor zt = forward_noise(x0, t, noise, s);
    const double sa = std::sqrt(s.at(t)), sn = std::sqrt(1.0 - s.at(t));
    for (size_t i = 0; i < zt.size(); i += 97) {
        CHECK(zt[i] == sa * x0[i] + sn * noise[i]);
    }

    CHECK_THROWS_AS(forward_noise(x0, 2000, noise, s), std::out_of_range);
    CHECK_THROWS_AS(forward_noise(x0, 10, Tensor({3, 4, 4}), s), std::invalid_argument);
}

TEST_CASE("one red square scene has one red component and one box") {
    SceneSpec spec{{{1, "red", "square"}}};
    SyntheticScene scene = make_scene(spec, 5);

    CHECK(scene.prompt_tokens ==
          std::vector<std::string>{"<s>", "one", "red", "square", "</s>"});
    REQUIRE(scene.layout.phrases.size() == 1);
    REQUIRE(scene.layout.phrases.count(2) == 1);
    REQUIRE(scene.layout.phrases.at(2).size() == 1);

    const auto red = color_rgb("red");
    const auto bg = background_rgb();
    int red_px = 0;
    int min_x = 32, max_x = -1, min_y = 32, max_y = -1;
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            const bool r = is_color(scene.image, x, y, red);
            const bool b = is_color(scene.image, x, y, bg);
            CHECK((r || b));
            if (r) {
                ++red_px;
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
        }
    }
    const int w = max_x - min_x + 1, h = max_y - min_y + 1;
    CHECK(w == h);              // square
    CHECK(red_px == w * h);     // solid
    CHECK(w >= 8);

    // tight pixel box inside the layout box
    const BoundingBox& box = scene.layout.phrases.at(2)[0];
    box.validate();
    CHECK(box.x1 <= min_x / 32.0);
    CHECK(box.y1 <= min_y / 32.0);
    CHECK(box.x2 >= (max_x + 1) / 32.0);
    CHECK(box.y2 >= (max_y + 1) / 32.0);
}

TEST_CASE("three blue circles give three disjoint boxes") {
    SceneSpec spec{{{3, "blue", "circle"}}};
    SyntheticScene scene = make_scene(spec, 9);
    REQUIRE(scene.layout.phrases.count(2) == 1);
    const auto& boxes = scene.layout.phrases.at(2);
    REQUIRE(boxes.size() == 3);
    for (size_t i = 0; i < boxes.size(); ++i) {
        for (size_t j = i + 1; j < boxes.size(); ++j) {
            const bool separated = boxes[i].x2 <= boxes[j].x1 || boxes[j].x2 <= boxes[i].x1 ||
                                   boxes[i].y2 <= boxes[j].y1 || boxes[j].y2 <= boxes[i].y1;
            CHECK(separated);
        }
    }
    // circles are not solid squares: fewer colored pixels than the tight box area
    const auto blue = color_rgb("blue");
    int blue_px = 0;
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            if (is_color(scene.image, x, y, blue)) ++blue_px;
        }
    }
    double box_area_px = 0;
    for (const auto& b : boxes) box_area_px += b.width() * 32 * b.height() * 32;
    CHECK(blue_px < 0.85 * box_area_px);
    CHECK(blue_px > 0);
}

TEST_CASE("scenes are deterministic in the seed and reject impossible specs") {
    SceneSpec spec{{{2, "green", "square"}, {1, "yellow", "circle"}}};
    SyntheticScene a = make_scene(spec, 123);
    SyntheticScene b = make_scene(spec, 123);
    CHECK(oracle::bit_equal(a.image, b.image));
    CHECK(a.prompt_tokens == b.prompt_tokens);
    CHECK(a.layout.phrases.size() == b.layout.phrases.size());
    CHECK(a.prompt_tokens ==
          std::vector<std::string>{"<s>", "two", "green", "square", "and", "one", "yellow",
                                   "circle", "</s>"});
    CHECK(a.layout.phrases.count(2) == 1);
    CHECK(a.layout.phrases.count(6) == 1);

    SyntheticScene c = make_scene(spec, 124);
    CHECK(oracle::max_abs_diff(a.image, c.image) > 0.0);

    SceneSpec impossible{{{5, "red", "square"},
                          {5, "green", "square"},
                          {5, "blue", "square"},
                          {5, "yellow", "square"}}};
    CHECK_THROWS_AS(make_scene(impossible, 1), placement_error);
    CHECK_THROWS_AS(make_scene(SceneSpec{}, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_scene(SceneSpec{{{0, "red", "square"}}}, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_scene(SceneSpec{{{1, "pink", "square"}}}, 1), std::invalid_argument);
}

TEST_CASE("manifest round-trips and reports bad lines") {
    const std::string text =
        "# training scenes\n"
        "12 2 red square 1 blue circle\n"
        "\n"
        "99 1 yellow circle   # trailing comment\n";
    auto entries = parse_manifest(text);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].second == 12);
    REQUIRE(entries[0].first.groups.size() == 2);
    CHECK(entries[0].first.groups[0].count == 2);
    CHECK(entries[0].first.groups[1].color == "blue");
    CHECK(entries[1].second == 99);
    CHECK(entries[1].first.groups[0].shape == "circle");

    auto again = parse_manifest(manifest_text(entries));
    REQUIRE(again.size() == 2);
    CHECK(again[0].first.groups[1].shape == entries[0].first.groups[1].shape);

    CHECK_THROWS_WITH_AS(parse_manifest("x 1 red square"), doctest::Contains("line 1"),
                         parse_error);
    CHECK_THROWS_WITH_AS(parse_manifest("5\n"), doctest::Contains("no object groups"), parse_error);
    CHECK_THROWS_WITH_AS(parse_manifest("5 1 mauve square"), doctest::Contains("mauve"),
                         parse_error);
}

TEST_CASE("noise prediction honors the shape and attention contracts") {
    ToyDenoiser model = tiny_model();
    Tensor z = random_latent(21);
    const std::vector<int> ids = model.vocab.encode({"<s>", "one", "red", "square", "</s>"});

    NoisePrediction p = predict_noise(model, z, ids, 700);
    CHECK(p.eps.shape() == z.shape());
    REQUIRE(p.cross.size() == 2);
    REQUIRE(p.self_map.size() == 2);
    CHECK(p.grids[0] == std::pair<int, int>{16, 16});
    CHECK(p.grids[1] == std::pair<int, int>{8, 8});

    for (size_t layer = 0; layer < 2; ++layer) {
        const Tensor& cr = p.cross[layer];
        CHECK(cr.dim(1) == 5);
        for (int r = 0; r < cr.dim(0); ++r) {
            double sum = 0;
            for (int c = 0; c < cr.dim(1); ++c) sum += cr.at(r, c);
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
        const Tensor& sm = p.self_map[layer];
        CHECK(sm.dim(0) == sm.dim(1));
        for (int r = 0; r < sm.dim(0); r += 37) {
            double sum = 0;
            for (int c = 0; c < sm.dim(1); ++c) sum += sm.at(r, c);
            CHECK(std::fabs(sum - 1.0) < 1e-9);
        }
    }

    NoisePrediction q = predict_noise(model, z, ids, 700);
    CHECK(oracle::bit_equal(p.eps, q.eps));
    CHECK(oracle::bit_equal(p.cross[0], q.cross[0]));

    NoisePrediction extreme = predict_noise(model, lgen::scale(z, 100.0), ids, 700);
    CHECK(extreme.eps.all_finite());
    CHECK(extreme.cross[0].all_finite());

    CHECK_THROWS_AS(predict_noise(model, Tensor({3, 16, 16}), ids, 700), std::invalid_argument);
    CHECK_THROWS_AS(predict_noise(model, z, {}, 700), std::invalid_argument);
    CHECK_THROWS_AS(predict_noise(model, z, ids, 5000), std::out_of_range);
}

TEST_CASE("downscaled model keeps the same contracts") {
    DenoiserArch arch;
    arch.image_size = 8;
    ToyDenoiser model = ToyDenoiser::create(arch, TokenVocabulary::standard(16, 1),
                                            NoiseSchedule::linear(), 3);
    Tensor z = random_latent(5, 3, 8);
    NoisePrediction p = predict_noise(model, z, model.vocab.null_sequence(), 100);
    CHECK(p.eps.shape() == z.shape());
    CHECK(p.grids[0] == std::pair<int, int>{4, 4});
    CHECK(p.grids[1] == std::pair<int, int>{2, 2});
}

namespace {

// Deterministic reconstruction error at a fixed timestep.  Raw loss-curve
// entries draw a random timestep per batch and are heavy-tailed (tiny t asks
// the model to amplify ~1/sqrt(1 - alpha_bar), which never fits well), so
// progress is asserted on fixed inputs instead.
double fixed_t_mse(const ToyDenoiser& m, const SyntheticScene& sc, int t, uint64_t seed) {
    Tensor x0 = sc.image;
    for (size_t i = 0; i < x0.size(); ++i) x0[i] = 2.0 * x0[i] - 1.0;
    Rand rng(seed);
    Tensor noise(x0.shape());
    for (size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    Tensor zt = forward_noise(x0, t, noise, m.schedule);
    NoisePrediction p = predict_noise(m, zt, m.vocab.encode(sc.prompt_tokens), t);
    double mse = 0;
    for (size_t i = 0; i < noise.size(); ++i) {
        const double d = p.eps[i] - noise[i];
        mse += d * d;
    }
    return mse / static_cast<double>(noise.size());
}

}  // namespace

TEST_CASE("training overfits a single scene") {
    ToyDenoiser model = tiny_model(31);
    SyntheticScene sc = make_scene(SceneSpec{{{1, "blue", "square"}}}, 77);

    double pre = 0;
    for (int t : {300, 500, 800}) pre += fixed_t_mse(model, sc, t, 900 + static_cast<uint64_t>(t));

    TrainConfig cfg;
    cfg.epochs = 300;
    cfg.batch_size = 1;
    cfg.lr = 3e-3;
    cfg.cond_dropout = 0.1;
    cfg.seed = 4;
    TrainResult res = train(model, {sc}, cfg);
    REQUIRE(res.loss_curve.size() == 300);

    double post = 0;
    for (int t : {300, 500, 800}) post += fixed_t_mse(model, sc, t, 900 + static_cast<uint64_t>(t));
    CHECK(post < 0.1 * pre);

    // the curve itself trends down even with noisy per-batch timesteps
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) head += res.loss_curve[static_cast<size_t>(i)].second;
    for (int i = 0; i < 100; ++i) {
        tail += res.loss_curve[res.loss_curve.size() - 1 - static_cast<size_t>(i)].second;
    }
    CHECK(tail / 100.0 < 0.5 * head / 10.0);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    ToyDenoiser model = tiny_model(41);
    const ToyDenoiser before = model;
    std::vector<SyntheticScene> data = {make_scene(SceneSpec{{{1, "red", "circle"}}}, 3),
                                        make_scene(SceneSpec{{{2, "green", "square"}}}, 4)};
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.lr = 0.0;
    cfg.seed = 9;
    TrainResult a = train(model, data, cfg);
    for (size_t i = 0; i < model.params.size(); ++i) {
        CHECK(oracle::bit_equal(model.params[i].second, before.params[i].second));
    }
    // determinism: the same run again yields the identical loss curve
    ToyDenoiser model2 = tiny_model(41);
    TrainResult b = train(model2, data, cfg);
    REQUIRE(a.loss_curve.size() == b.loss_curve.size());
    for (size_t i = 0; i < a.loss_curve.size(); ++i) {
        CHECK(a.loss_curve[i].second == b.loss_curve[i].second);
    }
}

TEST_CASE("conditioning dropout is applied at the configured rate") {
    std::vector<SyntheticScene> data = {make_scene(SceneSpec{{{1, "red", "square"}}}, 1),
                                        make_scene(SceneSpec{{{1, "blue", "circle"}}}, 2)};
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;

    cfg.cond_dropout = 1.0;
    ToyDenoiser m1 = tiny_model(51);
    TrainResult always_null = train(m1, data, cfg);
    CHECK(always_null.total_samples == 6);
    CHECK(always_null.conditioned_samples == 0);

    cfg.cond_dropout = 0.0;
    ToyDenoiser m2 = tiny_model(51);
    TrainResult always_cond = train(m2, data, cfg);
    CHECK(always_cond.conditioned_samples == 6);

    // with dropout = 1 the model never sees tokens, so querying it with the
    // null sequence is by definition the unconditional prediction
    Tensor z = random_latent(61);
    NoisePrediction uncond = predict_noise(m1, z, m1.vocab.null_sequence(), 300);
    NoisePrediction same = predict_noise(m1, z, m1.vocab.null_sequence(), 300);
    CHECK(oracle::bit_equal(uncond.eps, same.eps));
}

TEST_CASE("divergent training raises and restores finite parameters") {
    ToyDenoiser model = tiny_model(71);
    std::vector<SyntheticScene> data = {make_scene(SceneSpec{{{1, "yellow", "square"}}}, 8)};
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 1;
    // Normalization layers absorb merely-large parameters, so force a step size
    // whose squares overflow to infinity on the very next forward pass.
    cfg.lr = 1e170;
    CHECK_THROWS_AS(train(model, data, cfg), training_error);
    for (const auto& [name, t] : model.params) CHECK(t.all_finite());

    CHECK_THROWS_AS(train(model, {}, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    ToyDenoiser model = tiny_model(81);
    std::vector<SyntheticScene> data = {make_scene(SceneSpec{{{1, "green", "circle"}}}, 5)};
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 1;
    train(model, data, cfg);

    const std::string path = "checkpoint_roundtrip_test.bin";
    save_checkpoint(path, model);
    ToyDenoiser back = load_checkpoint(path);

    CHECK(back.vocab.tokens == model.vocab.tokens);
    CHECK(back.arch.image_size == model.arch.image_size);
    CHECK(back.schedule.steps() == model.schedule.steps());
    CHECK(oracle::bit_equal(back.vocab.embedding, model.vocab.embedding));
    REQUIRE(back.params.size() == model.params.size());
    for (size_t i = 0; i < back.params.size(); ++i) {
        CHECK(back.params[i].first == model.params[i].first);
        CHECK(oracle::bit_equal(back.params[i].second, model.params[i].second));
    }

    Tensor z = random_latent(91);
    const std::vector<int> ids = model.vocab.encode({"<s>", "one", "green", "circle", "</s>"});
    NoisePrediction a = predict_noise(model, z, ids, 777);
    NoisePrediction b = predict_noise(back, z, ids, 777);
    CHECK(oracle::bit_equal(a.eps, b.eps));
    CHECK(oracle::bit_equal(a.self_map[1], b.self_map[1]));
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), checkpoint_error);
    const std::string junk = "junk_checkpoint_test.bin";
    {
        std::FILE* f = std::fopen(junk.c_str(), "wb");
        std::fputs("NOTACKPT garbage", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(junk), checkpoint_error);
    std::remove(junk.c_str());
}

TEST_CASE("random scene specs respect their bounds") {
    std::mt19937_64 rng(101);
    for (int i = 0; i < 200; ++i) {
        SceneSpec spec = random_scene_spec(rng, 2, 3);
        REQUIRE(!spec.groups.empty());
        CHECK(spec.groups.size() <= 2);
        std::set<std::string> colors;
        for (const auto& g : spec.groups) {
            CHECK(g.count >= 1);
            CHECK(g.count <= 3);
            colors.insert(g.color);
        }
        CHECK(colors.size() == spec.groups.size());  // distinct colors
        make_scene(spec, static_cast<uint64_t>(i));  // placeable
    }
}
