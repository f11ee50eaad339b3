#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "lgen/evaluation.hpp"
#include "lgen/toy_model.hpp"
#include "oracles.hpp"

using namespace lgen;

namespace {

Tensor blank_image(int s = 32) {
    Tensor img({3, s, s});
    const auto bg = background_rgb();
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < s * s; ++i) img[static_cast<size_t>(c) * s * s + i] = bg[c];
    }
    return img;
}

// paints pixels x0..x1, y0..y1 inclusive
void paint_rect(Tensor& img, const std::string& color, int x0, int y0, int x1, int y1) {
    const int s = img.dim(1);
    const auto rgb = color_rgb(color);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(c) * s + y) * s + x] = rgb[c];
        }
    }
}

Layout two_red_one_blue() {
    Layout layout;
    layout.prompt_tokens = {"<s>", "two", "red", "square", "and",
                            "one", "blue", "circle", "</s>"};
    layout.phrases[2] = {BoundingBox{0.1, 0.1, 0.3, 0.3}, BoundingBox{0.1, 0.4, 0.3, 0.6}};
    layout.phrases[6] = {BoundingBox{0.6, 0.3, 0.9, 0.7}};
    return layout;
}

DetectionRow make_row(const std::string& id, int phrase, const std::string& label,
                      BoundingBox box, const std::string& color, double conf) {
    DetectionRow r;
    r.image_id = id;
    r.phrase_index = phrase;
    r.det = Detection{label, box, color, conf};
    return r;
}

}  // namespace

TEST_CASE("a blank image yields no detections") {
    CHECK(detect(blank_image()).empty());
    CHECK_THROWS_AS(detect(Tensor({2, 8, 8})), std::invalid_argument);
}

TEST_CASE("a painted square comes back with its exact extent") {
    Tensor img = blank_image();
    paint_rect(img, "red", 5, 7, 12, 14);
    std::vector<Detection> dets = detect(img);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].color == "red");
    CHECK(dets[0].label == "red square");
    CHECK(dets[0].confidence == 1.0);
    CHECK(dets[0].box.x1 == 5 / 32.0);
    CHECK(dets[0].box.y1 == 7 / 32.0);
    CHECK(dets[0].box.x2 == 13 / 32.0);
    CHECK(dets[0].box.y2 == 15 / 32.0);
}

TEST_CASE("a rendered circle is labeled circle and lands inside its box") {
    SyntheticScene sc = make_scene(SceneSpec{{{1, "green", "circle"}}}, 21);
    std::vector<Detection> dets = detect(sc.image);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].label == "green circle");
    CHECK(dets[0].confidence < 0.92);
    CHECK(dets[0].confidence >= 0.25);
    const BoundingBox& gt = sc.layout.phrases.at(2)[0];
    CHECK(gt.contains(dets[0].box.center_x(), dets[0].box.center_y()));
}

TEST_CASE("touching same-color squares merge into one detection") {
    Tensor img = blank_image();
    paint_rect(img, "red", 4, 10, 9, 15);
    paint_rect(img, "red", 10, 10, 15, 15);  // shares the x=9/10 edge
    std::vector<Detection> dets = detect(img);
    REQUIRE(dets.size() == 1);  // the documented miscounting failure mode
    CHECK(dets[0].label == "red square");
    CHECK(dets[0].box.x2 - dets[0].box.x1 == 12 / 32.0);

    // different colors never merge, even touching
    Tensor img2 = blank_image();
    paint_rect(img2, "red", 4, 10, 9, 15);
    paint_rect(img2, "blue", 10, 10, 15, 15);
    CHECK(detect(img2).size() == 2);
}

TEST_CASE("speckle and low-solidity components are filtered") {
    Tensor img = blank_image();
    paint_rect(img, "red", 3, 3, 3, 3);    // 1 px
    paint_rect(img, "blue", 8, 8, 8, 10);  // 3 px strip
    CHECK(detect(img).empty());            // both under min_area 4

    Tensor img2 = blank_image();
    paint_rect(img2, "yellow", 10, 10, 11, 11);  // exactly 4 px
    std::vector<Detection> dets = detect(img2);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].color == "yellow");

    // a circle fails a raised confidence bar
    SyntheticScene sc = make_scene(SceneSpec{{{1, "red", "circle"}}}, 5);
    DetectorConfig strict;
    strict.min_confidence = 0.9;
    CHECK(detect(sc.image, strict).empty());
    CHECK(detect(sc.image).size() == 1);
}

TEST_CASE("detection round-trips every generated scene") {
    std::mt19937_64 rng(404);
    for (int i = 0; i < 50; ++i) {
        SceneSpec spec = random_scene_spec(rng, 2, 3);
        SyntheticScene sc = make_scene(spec, static_cast<uint64_t>(1000 + i));
        std::vector<PhraseTruth> truths = phrase_truths(sc.layout);
        std::vector<Detection> dets = detect(sc.image);

        size_t total_gt = 0;
        for (const auto& t : truths) total_gt += t.boxes.size();
        REQUIRE(dets.size() == total_gt);

        for (const auto& t : truths) {
            int found = 0;
            for (const Detection& d : dets) {
                if (d.color != t.color) continue;
                ++found;
                CHECK(d.label == t.color + " " + t.shape);
                bool inside = false;
                for (const BoundingBox& b : t.boxes) {
                    inside = inside || b.contains(d.box.center_x(), d.box.center_y());
                }
                CHECK(inside);
            }
            CHECK(found == static_cast<int>(t.boxes.size()));
        }
    }
}

TEST_CASE("phrase truths read color and shape off the prompt") {
    Layout layout = two_red_one_blue();
    std::vector<PhraseTruth> truths = phrase_truths(layout);
    REQUIRE(truths.size() == 2);
    CHECK(truths[0].phrase_index == 2);
    CHECK(truths[0].color == "red");
    CHECK(truths[0].shape == "square");
    CHECK(truths[0].boxes.size() == 2);
    CHECK(truths[1].color == "blue");
    CHECK(truths[1].shape == "circle");

    Layout bad = layout;
    bad.phrases.clear();
    bad.phrases[1] = {BoundingBox{0.1, 0.1, 0.3, 0.3}};  // "two" is not a color
    CHECK_THROWS_AS(phrase_truths(bad), std::invalid_argument);
    bad.phrases.clear();
    bad.phrases[8] = {BoundingBox{0.1, 0.1, 0.3, 0.3}};  // nothing follows "</s>"
    CHECK_THROWS_AS(phrase_truths(bad), std::invalid_argument);
    bad.phrases.clear();
    bad.phrases[42] = {BoundingBox{0.1, 0.1, 0.3, 0.3}};
    CHECK_THROWS_AS(phrase_truths(bad), std::invalid_argument);
}

TEST_CASE("the detector attributes components to phrases by category") {
    Layout layout = two_red_one_blue();
    Tensor img = blank_image();
    paint_rect(img, "red", 4, 4, 9, 9);     // red square -> phrase 2
    paint_rect(img, "yellow", 20, 20, 25, 25);  // no yellow phrase -> unmatched
    std::vector<DetectionRow> rows = run_detector("img0", img, layout);
    REQUIRE(rows.size() == 2);
    int matched = 0, unmatched = 0;
    for (const auto& r : rows) {
        CHECK(r.image_id == "img0");
        if (r.det.color == "red") {
            CHECK(r.phrase_index == 2);
            ++matched;
        } else {
            CHECK(r.phrase_index == -1);
            ++unmatched;
        }
    }
    CHECK(matched == 1);
    CHECK(unmatched == 1);
}

TEST_CASE("counting formulas match the worked examples") {
    CountRow exact = count_row(5, 5);
    CHECK(exact.n_cor == 5);
    CHECK(exact.n_fal == 0);
    CHECK(exact.n_neg == 0);
    CountingSummary s = counting_metrics(std::vector<CountRow>{exact});
    CHECK(s.precision == 100.0);
    CHECK(s.recall == 100.0);
    CHECK(s.f1 == 100.0);
    CHECK(!s.degenerate);

    CountRow under = count_row(3, 5);
    CHECK(under.n_cor == 3);
    CHECK(under.n_fal == 0);
    CHECK(under.n_neg == 2);
    s = counting_metrics(std::vector<CountRow>{under});
    CHECK(s.precision == 100.0);
    CHECK(s.recall == 60.0);
    CHECK(s.f1 == 75.0);

    CountRow over = count_row(7, 5);
    CHECK(over.n_cor == 5);
    CHECK(over.n_fal == 2);
    CHECK(over.n_neg == 0);
    s = counting_metrics(std::vector<CountRow>{over});
    CHECK(s.precision == 100.0 * 5.0 / 7.0);
    CHECK(s.recall == 100.0);
    CHECK(s.f1 == doctest::Approx(83.3333333333).epsilon(1e-9));

    // micro-average: counts pool before dividing
    s = counting_metrics(std::vector<CountRow>{under, over});
    CHECK(s.precision == 80.0);  // 8 correct of 10 predicted
    CHECK(s.recall == 80.0);     // 8 correct of 10 true
    CHECK(s.f1 == 80.0);

    CHECK_THROWS_AS(count_row(-1, 2), std::invalid_argument);
}

TEST_CASE("degenerate counting inputs report zero with the flag") {
    CountingSummary s = counting_metrics(std::vector<CountRow>{});
    CHECK(s.degenerate);
    CHECK(s.precision == 0.0);
    CHECK(s.recall == 0.0);
    CHECK(s.f1 == 0.0);

    s = counting_metrics(std::vector<CountRow>{count_row(0, 0)});
    CHECK(s.degenerate);

    s = counting_metrics(std::vector<CountRow>{count_row(0, 5)});
    CHECK(s.degenerate);  // nothing predicted
    CHECK(s.recall == 0.0);

    s = counting_metrics(std::vector<CountRow>{count_row(5, 0)});
    CHECK(s.degenerate);  // no ground truth
    CHECK(s.precision == 0.0);
}

TEST_CASE("counting invariants hold over random count vectors") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 6);
        std::vector<CountRow> under, over, any;
        for (int i = 0; i < n; ++i) {
            const int gt = 1 + static_cast<int>(rng() % 5);
            const int extra = static_cast<int>(rng() % 3);
            under.push_back(count_row(std::max(gt - extra, 0), gt));
            over.push_back(count_row(gt + extra, gt));
            any.push_back(count_row(static_cast<int>(rng() % 6), gt));
        }
        CountingSummary su = counting_metrics(under);
        if (!su.degenerate) CHECK(su.precision == 100.0);
        CountingSummary so = counting_metrics(over);
        CHECK(so.recall == 100.0);
        CountingSummary sa = counting_metrics(any);
        if (!sa.degenerate) {
            CHECK(sa.f1 >= std::min(sa.precision, sa.recall) - 1e-9);
            CHECK(sa.f1 <= std::max(sa.precision, sa.recall) + 1e-9);
        }
    }
}

TEST_CASE("spatial accuracy follows strict centroid comparisons") {
    const BoundingBox left{0.1, 0.4, 0.3, 0.6};    // centroid (0.2, 0.5)
    const BoundingBox right{0.7, 0.4, 0.9, 0.6};   // centroid (0.8, 0.5)
    std::vector<SpatialPair> one = {{left, right, SpatialRelation::Left}};
    CHECK(spatial_accuracy(one) == 100.0);

    std::vector<SpatialPair> tie = {{left, left, SpatialRelation::Left}};
    CHECK(spatial_accuracy(tie) == 0.0);  // identical centroids: strict

    std::vector<SpatialPair> batch = {
        {left, right, SpatialRelation::Left},
        {right, left, SpatialRelation::Right},
        {BoundingBox{0.2, 0.1, 0.4, 0.3}, BoundingBox{0.2, 0.6, 0.4, 0.8},
         SpatialRelation::Above},
        {left, right, SpatialRelation::Right},  // wrong
    };
    CHECK(spatial_accuracy(batch) == 75.0);

    std::vector<SpatialPair> missing = {{std::nullopt, right, SpatialRelation::Left}};
    CHECK(spatial_accuracy(missing) == 0.0);

    // permutation invariance
    std::vector<SpatialPair> shuffled = {batch[3], batch[1], batch[0], batch[2]};
    CHECK(spatial_accuracy(shuffled) == spatial_accuracy(batch));
    CHECK(spatial_accuracy({}) == 0.0);
}

TEST_CASE("size accuracy follows strict area comparisons") {
    const BoundingBox small{0.1, 0.1, 0.2, 0.2};  // area 0.01
    const BoundingBox big{0.4, 0.4, 0.7, 0.7};    // area 0.09
    std::vector<SizePair> one = {{small, big, SizeRelation::Smaller}};
    CHECK(size_accuracy(one) == 100.0);

    std::vector<SizePair> tie = {{small, small, SizeRelation::Smaller}};
    CHECK(size_accuracy(tie) == 0.0);

    std::vector<SizePair> five = {
        {small, big, SizeRelation::Smaller},       // correct
        {big, small, SizeRelation::Larger},        // correct
        {small, big, SizeRelation::Larger},        // wrong
        {big, small, SizeRelation::Smaller},       // wrong
        {std::nullopt, big, SizeRelation::Smaller},  // missing
    };
    CHECK(size_accuracy(five) == 40.0);
}

TEST_CASE("color accuracy scores the best matched detection per phrase") {
    Detection red{"red square", {0.1, 0.1, 0.3, 0.3}, "red", 1.0};
    Detection blue{"blue circle", {0.5, 0.5, 0.8, 0.8}, "blue", 0.7};
    std::vector<std::vector<Detection>> matched = {{red}, {blue}, {red}, {}};
    std::vector<std::string> expected = {"red", "blue", "red", "green"};
    CHECK(color_accuracy(matched, expected) == 75.0);  // the miss is the empty phrase

    std::vector<std::string> wrong_size = {"red"};
    CHECK_THROWS_AS(color_accuracy(matched, wrong_size), std::invalid_argument);
    CHECK(color_accuracy({}, {}) == 0.0);
}

TEST_CASE("boundary overlap diagnostic separates the three regimes") {
    // far-apart boxes on a 16x16 grid: dilations cannot meet
    std::vector<BoundingBox> apart = {BoundingBox{0.0, 0.0, 0.25, 0.25},
                                      BoundingBox{0.75, 0.75, 1.0, 1.0}};
    MaskSet masks = rasterize(apart, 16, 16);
    Tensor inside({16, 16});
    inside.at(1, 1) = 1.0;
    inside.at(14, 14) = 1.0;
    CHECK(boundary_overlap_diagnostic(inside, masks) == 0.0);

    // adjacent boxes sharing x = 0.5: mass on the shared edge overlaps
    std::vector<BoundingBox> adjacent = {BoundingBox{0.0, 0.25, 0.5, 0.75},
                                         BoundingBox{0.5, 0.25, 1.0, 0.75}};
    MaskSet madj = rasterize(adjacent, 16, 16);
    Tensor straddle({16, 16});
    straddle.at(8, 7) = 1.0;
    straddle.at(8, 8) = 1.0;  // at(r=y, c=x): columns 7..8 are the seam
    CHECK(boundary_overlap_diagnostic(straddle, madj) > 0.0);

    // uniform mass over the union equals the overlap area fraction
    Tensor uniform({16, 16});
    int union_cells = 0;
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            if (madj.interior.at(x, y)) {
                uniform.at(y, x) = 1.0;
                ++union_cells;
            }
        }
    }
    // independent recount: dilate each object by hand, count double-covered
    // union cells
    int overlap_cells = 0;
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            if (!madj.interior.at(x, y)) continue;
            int cover = 0;
            for (const MaskGrid& g : madj.per_object) {
                bool hit = g.at(x, y) || (x > 0 && g.at(x - 1, y)) ||
                           (x + 1 < 16 && g.at(x + 1, y)) || (y > 0 && g.at(x, y - 1)) ||
                           (y + 1 < 16 && g.at(x, y + 1));
                if (hit) ++cover;
            }
            if (cover >= 2) ++overlap_cells;
        }
    }
    CHECK(overlap_cells > 0);
    CHECK(boundary_overlap_diagnostic(uniform, madj) ==
          static_cast<double>(overlap_cells) / union_cells);

    // error paths
    MaskSet single = rasterize({BoundingBox{0.2, 0.2, 0.8, 0.8}}, 16, 16);
    CHECK_THROWS_AS(boundary_overlap_diagnostic(inside, single), std::invalid_argument);
    CHECK_THROWS_AS(boundary_overlap_diagnostic(Tensor({8, 8}), madj), std::invalid_argument);
    CHECK(boundary_overlap_diagnostic(Tensor({16, 16}), madj) == 0.0);  // no mass
}

TEST_CASE("batch scoring assembles the full report") {
    Layout layout = two_red_one_blue();
    std::vector<LabeledLayout> cases = {{"a", layout}};

    // both red objects found, blue missed
    std::vector<DetectionRow> rows = {
        make_row("a", 2, "red square", {0.1, 0.1, 0.3, 0.3}, "red", 1.0),
        make_row("a", 2, "red square", {0.12, 0.42, 0.28, 0.58}, "red", 0.9),
        make_row("a", -1, "yellow circle", {0.7, 0.1, 0.8, 0.2}, "yellow", 0.5),
    };
    MetricsReport rep = score_detections(rows, cases);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].phrase_index == 2);
    CHECK(rep.rows[0].counts.n_pred == 2);
    CHECK(rep.rows[0].counts.n_gt == 2);
    CHECK(rep.rows[1].phrase_index == 6);
    CHECK(rep.rows[1].counts.n_pred == 0);
    CHECK(rep.rows[1].counts.n_neg == 1);
    CHECK(rep.counting.precision == 100.0);
    CHECK(rep.counting.recall == doctest::Approx(100.0 * 2 / 3).epsilon(1e-12));
    CHECK(rep.counting.f1 == 80.0);
    // red group centroid (0.2, 0.35) vs blue (0.75, 0.5): |dx| wins -> Left;
    // areas 0.04 vs 0.12 -> Smaller. Blue undetected, so both pairs miss.
    CHECK(rep.spatial_pairs == 1);
    CHECK(rep.size_pairs == 1);
    CHECK(rep.spatial_acc == 0.0);
    CHECK(rep.size_acc == 0.0);
    CHECK(rep.color_acc == 50.0);
    CHECK(rep.color_cases == 2);

    // add the blue detection: every metric completes
    rows.push_back(make_row("a", 6, "blue circle", {0.6, 0.3, 0.9, 0.7}, "blue", 0.8));
    rep = score_detections(rows, cases);
    CHECK(rep.counting.recall == 100.0);
    CHECK(rep.spatial_acc == 100.0);
    CHECK(rep.size_acc == 100.0);
    CHECK(rep.color_acc == 100.0);

    // row order does not matter
    std::vector<DetectionRow> shuffled = {rows[3], rows[1], rows[2], rows[0]};
    MetricsReport rep2 = score_detections(shuffled, cases);
    CHECK(rep2.counting.f1 == rep.counting.f1);
    CHECK(rep2.spatial_acc == rep.spatial_acc);
    CHECK(rep2.color_acc == rep.color_acc);

    std::vector<DetectionRow> bad = {make_row("nope", 2, "red square",
                                              {0.1, 0.1, 0.3, 0.3}, "red", 1.0)};
    CHECK_THROWS_AS(score_detections(bad, cases), std::invalid_argument);
}

TEST_CASE("an image with no detections still counts its misses") {
    std::vector<LabeledLayout> cases = {{"a", two_red_one_blue()}};
    MetricsReport rep = score_detections({}, cases);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.counting.recall == 0.0);
    CHECK(rep.counting.degenerate);  // zero predictions in the whole batch
    CHECK(rep.color_acc == 0.0);
    CHECK(rep.spatial_acc == 0.0);
}

TEST_CASE("detections survive the CSV round trip") {
    std::vector<DetectionRow> rows = {
        make_row("img_1", 2, "red square", {0.03125, 0.21875, 0.40625, 0.46875}, "red",
                 1.0 / 3.0),
        make_row("img_1", -1, "yellow circle", {0.7, 0.1, 0.8, 0.2}, "yellow", 0.578125),
    };
    const std::string path = "detections_roundtrip_test.csv";
    write_detections_csv(path, rows);
    std::vector<DetectionRow> back = read_detections_csv(path);
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].image_id == rows[i].image_id);
        CHECK(back[i].phrase_index == rows[i].phrase_index);
        CHECK(back[i].det.label == rows[i].det.label);
        CHECK(back[i].det.color == rows[i].det.color);
        CHECK(back[i].det.confidence == rows[i].det.confidence);  // bit-exact
        CHECK(back[i].det.box.x1 == rows[i].det.box.x1);
        CHECK(back[i].det.box.y2 == rows[i].det.box.y2);
    }
    std::remove(path.c_str());

    CHECK_THROWS_AS(read_detections_csv("no_such_detections.csv"), std::runtime_error);
    {
        std::ofstream f("bad_header_test.csv");
        f << "id,stuff\n";
    }
    CHECK_THROWS_AS(read_detections_csv("bad_header_test.csv"), parse_error);
    std::remove("bad_header_test.csv");
    {
        std::ofstream f("bad_fields_test.csv");
        f << "image_id,phrase_index,label,x1,y1,x2,y2,color,confidence\n";
        f << "a,2,red square,0.1,0.1\n";
    }
    CHECK_THROWS_AS(read_detections_csv("bad_fields_test.csv"), parse_error);
    std::remove("bad_fields_test.csv");
    {
        std::ofstream f("bad_number_test.csv");
        f << "image_id,phrase_index,label,x1,y1,x2,y2,color,confidence\n";
        f << "a,2,red square,zero,0.1,0.3,0.3,red,1.0\n";
    }
    CHECK_THROWS_AS(read_detections_csv("bad_number_test.csv"), parse_error);
    std::remove("bad_number_test.csv");
}

TEST_CASE("metric reports survive the JSON round trip") {
    Layout layout = two_red_one_blue();
    std::vector<LabeledLayout> cases = {{"a", layout}};
    std::vector<DetectionRow> rows = {
        make_row("a", 2, "red square", {0.1, 0.1, 0.3, 0.3}, "red", 1.0),
        make_row("a", 6, "blue circle", {0.6, 0.3, 0.9, 0.7}, "blue", 0.7),
    };
    MetricsReport rep = score_detections(rows, cases);

    const std::string path = "metrics_roundtrip_test.json";
    write_metrics_json(path, rep);
    MetricsReport back = read_metrics_json(path);
    CHECK(back.counting.precision == rep.counting.precision);
    CHECK(back.counting.recall == rep.counting.recall);
    CHECK(back.counting.f1 == rep.counting.f1);
    CHECK(back.counting.degenerate == rep.counting.degenerate);
    CHECK(back.spatial_acc == rep.spatial_acc);
    CHECK(back.size_acc == rep.size_acc);
    CHECK(back.color_acc == rep.color_acc);
    CHECK(back.spatial_pairs == rep.spatial_pairs);
    REQUIRE(back.rows.size() == rep.rows.size());
    for (size_t i = 0; i < back.rows.size(); ++i) {
        CHECK(back.rows[i].image_id == rep.rows[i].image_id);
        CHECK(back.rows[i].phrase_index == rep.rows[i].phrase_index);
        CHECK(back.rows[i].counts.n_pred == rep.rows[i].counts.n_pred);
        CHECK(back.rows[i].counts.n_neg == rep.rows[i].counts.n_neg);
    }
    std::remove(path.c_str());

    {
        std::ofstream f("bad_metrics_test.json");
        f << "{\"precision\": 1.0}\n";
    }
    CHECK_THROWS_AS(read_metrics_json("bad_metrics_test.json"), parse_error);
    std::remove("bad_metrics_test.json");

    const std::string csv_path = "per_prompt_test.csv";
    write_per_prompt_csv(csv_path, rep);
    {
        std::ifstream f(csv_path);
        std::string header, first;
        std::getline(f, header);
        std::getline(f, first);
        CHECK(header == "image_id,phrase_index,n_pred,n_gt,n_cor,n_fal,n_neg");
        CHECK(first == "a,2,1,2,1,0,1");
    }
    std::remove(csv_path.c_str());
}
