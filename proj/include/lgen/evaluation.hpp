#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgen/layout.hpp"
#include "lgen/tensor.hpp"

namespace lgen {

// One connected blob of palette color found in an image. The label is the
// category string "<color> <shape>" a real detector would output.
struct Detection {
    std::string label;
    BoundingBox box;        // tight extent, normalized coordinates
    std::string color;      // nearest palette color
    double confidence = 0;  // component solidity (area / box area), in [0,1]
};

struct DetectorConfig {
    double min_confidence = 0.25;  // drop components less solid than this
    int min_area = 4;              // drop speckle components, in pixels
    double color_cutoff = 0.35;    // max RGB distance to call a pixel colored
    double square_solidity = 0.92; // at or above -> "square", below -> "circle"
};

// Color-threshold every pixel against the palette (nearest color wins, the
// background when closer than any color), extract 4-connected same-color
// components, emit one Detection per surviving component. Deterministic:
// results sorted by confidence, then position. An empty list is valid.
std::vector<Detection> detect(const Tensor& image, const DetectorConfig& cfg = {});

// Ground truth for one constrained phrase: the phrase token is the color
// word and the following token is the shape word.
struct PhraseTruth {
    int phrase_index = -1;
    std::string color, shape;
    std::vector<BoundingBox> boxes;
};

// Derives per-phrase truth from a layout; throws std::invalid_argument when
// a phrase token is not a color word or is not followed by a shape word.
std::vector<PhraseTruth> phrase_truths(const Layout& layout);

// A detection attributed to an image and (by category label) to a phrase;
// phrase_index -1 marks detections matching no constrained phrase.
struct DetectionRow {
    std::string image_id;
    int phrase_index = -1;
    Detection det;
};

// detect() plus phrase attribution: each detection goes to the phrase whose
// color+shape category equals its label, highest confidence first; when
// several phrases share a category the least-filled (then lowest-index) one
// wins.
std::vector<DetectionRow> run_detector(const std::string& image_id, const Tensor& image,
                                       const Layout& layout, const DetectorConfig& cfg = {});

// Per-phrase counting record. n_cor = min(n_pred, n_gt); the false/negative
// splits follow from the difference's sign.
struct CountRow {
    int n_pred = 0, n_gt = 0;
    int n_cor = 0, n_fal = 0, n_neg = 0;
};
CountRow count_row(int n_pred, int n_gt);  // throws std::invalid_argument on negatives

// Micro-averaged percentages: counts are summed over rows before dividing.
// A zero denominator reports 0 and sets the degenerate flag.
struct CountingSummary {
    double precision = 0, recall = 0, f1 = 0;
    bool degenerate = false;
};
CountingSummary counting_metrics(std::span<const CountRow> rows);

enum class SpatialRelation { Left, Right, Above, Below };
enum class SizeRelation { Smaller, Larger };
const char* relation_name(SpatialRelation rel);
const char* relation_name(SizeRelation rel);

// A pair of predicted boxes under a ground-truth relation. A missing box
// (no detection for that phrase) makes the pair incorrect.
struct SpatialPair {
    std::optional<BoundingBox> a, b;
    SpatialRelation rel = SpatialRelation::Left;
};
struct SizePair {
    std::optional<BoundingBox> a, b;
    SizeRelation rel = SizeRelation::Smaller;
};

// Percent of pairs whose centroid comparison (strict, ties incorrect)
// matches the relation. Empty input scores 0.
double spatial_accuracy(std::span<const SpatialPair> pairs);
// Same for strict area comparison.
double size_accuracy(std::span<const SizePair> pairs);

// Percent of phrases whose best matched detection carries the expected
// color; a phrase with no matched detection is incorrect. Sizes must agree.
double color_accuracy(std::span<const std::vector<Detection>> matched,
                      std::span<const std::string> expected);

// Fraction of the map's mass lying in cells covered by at least two
// one-cell-dilated per-object masks (4-neighborhood dilation). 0 means the
// per-object attention is fully separated. Requires >= 2 objects; a map
// with no mass scores 0.
double boundary_overlap_diagnostic(const Tensor& map, const MaskSet& masks);

struct PerPromptRow {
    std::string image_id;
    int phrase_index = -1;
    CountRow counts;
};

struct MetricsReport {
    CountingSummary counting;                           // percentages
    double spatial_acc = 0, size_acc = 0, color_acc = 0;  // percentages
    int spatial_pairs = 0, size_pairs = 0, color_cases = 0;
    std::vector<PerPromptRow> rows;
};

struct LabeledLayout {
    std::string id;
    Layout layout;
};

// Scores attributed detections against their layouts. Cases drive the
// scoring (an image with no detections still contributes its misses);
// spatial and size ground truth derive from the layout's mean centroids
// and mean areas per phrase, skipping exactly tied pairs. Rows referencing
// an unknown image id throw std::invalid_argument.
MetricsReport score_detections(std::span<const DetectionRow> rows,
                               std::span<const LabeledLayout> cases);

// CSV with header image_id,phrase_index,label,x1,y1,x2,y2,color,confidence.
void write_detections_csv(const std::string& path, std::span<const DetectionRow> rows);
std::vector<DetectionRow> read_detections_csv(const std::string& path);

// JSON report round trip and the per-prompt CSV table
// (image_id,phrase_index,n_pred,n_gt,n_cor,n_fal,n_neg).
void write_metrics_json(const std::string& path, const MetricsReport& report);
MetricsReport read_metrics_json(const std::string& path);
void write_per_prompt_csv(const std::string& path, const MetricsReport& report);

}  // namespace lgen
