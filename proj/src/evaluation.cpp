#include "lgen/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lgen/toy_model.hpp"

namespace lgen {

namespace {

struct PixelAssignment {
    int w = 0, h = 0;
    std::vector<int> color;  // palette index per pixel, -1 = background
};

double dist2(double r, double g, double b, const std::array<double, 3>& c) {
    const double dr = r - c[0], dg = g - c[1], db = b - c[2];
    return dr * dr + dg * dg + db * db;
}

PixelAssignment assign_pixels(const Tensor& image, double cutoff) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("detect: image must be [3, h, w], got " +
                                    shape_to_string(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    const auto& names = color_words();
    std::vector<std::array<double, 3>> palette;
    for (const auto& n : names) palette.push_back(color_rgb(n));
    const auto bg = background_rgb();
    const double cutoff2 = cutoff * cutoff;

    PixelAssignment out;
    out.w = w;
    out.h = h;
    out.color.assign(static_cast<size_t>(w) * h, -1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double r = image[(0 * static_cast<size_t>(h) + y) * w + x];
            const double g = image[(1 * static_cast<size_t>(h) + y) * w + x];
            const double b = image[(2 * static_cast<size_t>(h) + y) * w + x];
            int best = -1;
            double best_d = dist2(r, g, b, bg);  // background by default
            for (size_t c = 0; c < palette.size(); ++c) {
                const double d = dist2(r, g, b, palette[c]);
                if (d < best_d && d <= cutoff2) {
                    best = static_cast<int>(c);
                    best_d = d;
                }
            }
            out.color[static_cast<size_t>(y) * w + x] = best;
        }
    }
    return out;
}

}  // namespace

std::vector<Detection> detect(const Tensor& image, const DetectorConfig& cfg) {
    PixelAssignment px = assign_pixels(image, cfg.color_cutoff);
    const int w = px.w, h = px.h;
    const auto& names = color_words();

    std::vector<Detection> out;
    std::vector<uint8_t> seen(px.color.size(), 0);
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            const size_t start = static_cast<size_t>(y0) * w + x0;
            if (seen[start] || px.color[start] < 0) continue;
            const int color = px.color[start];
            int area = 0, min_x = w, max_x = -1, min_y = h, max_y = -1;
            std::queue<std::pair<int, int>> q;
            q.emplace(x0, y0);
            seen[start] = 1;
            while (!q.empty()) {
                const auto [x, y] = q.front();
                q.pop();
                ++area;
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
                const int nx[4] = {x - 1, x + 1, x, x};
                const int ny[4] = {y, y, y - 1, y + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nx[k] < 0 || nx[k] >= w || ny[k] < 0 || ny[k] >= h) continue;
                    const size_t ni = static_cast<size_t>(ny[k]) * w + nx[k];
                    if (!seen[ni] && px.color[ni] == color) {
                        seen[ni] = 1;
                        q.emplace(nx[k], ny[k]);
                    }
                }
            }
            if (area < cfg.min_area) continue;
            const double solidity =
                static_cast<double>(area) / ((max_x - min_x + 1) * (max_y - min_y + 1));
            if (solidity < cfg.min_confidence) continue;
            Detection d;
            d.color = names[static_cast<size_t>(color)];
            d.label = d.color + (solidity >= cfg.square_solidity ? " square" : " circle");
            d.confidence = solidity;
            d.box = BoundingBox{min_x / static_cast<double>(w), min_y / static_cast<double>(h),
                                (max_x + 1) / static_cast<double>(w),
                                (max_y + 1) / static_cast<double>(h)};
            out.push_back(std::move(d));
        }
    }
    std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
        return a.box.x1 < b.box.x1;
    });
    return out;
}

std::vector<PhraseTruth> phrase_truths(const Layout& layout) {
    const auto& colors = color_words();
    const auto& shapes = shape_words();
    std::vector<PhraseTruth> out;
    for (int idx : layout.phrase_indices()) {
        if (idx < 0 || idx >= layout.token_count()) {
            throw std::invalid_argument("phrase index " + std::to_string(idx) +
                                        " is outside the prompt");
        }
        PhraseTruth t;
        t.phrase_index = idx;
        t.color = layout.prompt_tokens[static_cast<size_t>(idx)];
        if (std::find(colors.begin(), colors.end(), t.color) == colors.end()) {
            throw std::invalid_argument("phrase token '" + t.color + "' is not a color word");
        }
        if (idx + 1 >= layout.token_count()) {
            throw std::invalid_argument("phrase '" + t.color + "' has no following shape word");
        }
        t.shape = layout.prompt_tokens[static_cast<size_t>(idx) + 1];
        if (std::find(shapes.begin(), shapes.end(), t.shape) == shapes.end()) {
            throw std::invalid_argument("token '" + t.shape + "' after phrase '" + t.color +
                                        "' is not a shape word");
        }
        t.boxes = layout.phrases.at(idx);
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<DetectionRow> run_detector(const std::string& image_id, const Tensor& image,
                                       const Layout& layout, const DetectorConfig& cfg) {
    const std::vector<PhraseTruth> truths = phrase_truths(layout);
    std::vector<int> assigned(truths.size(), 0);

    std::vector<DetectionRow> rows;
    for (Detection& d : detect(image, cfg)) {
        int pick = -1;
        for (size_t i = 0; i < truths.size(); ++i) {
            if (truths[i].color + " " + truths[i].shape != d.label) continue;
            if (pick < 0 || assigned[i] < assigned[static_cast<size_t>(pick)]) {
                pick = static_cast<int>(i);
            }
        }
        DetectionRow row;
        row.image_id = image_id;
        row.phrase_index = pick >= 0 ? truths[static_cast<size_t>(pick)].phrase_index : -1;
        row.det = std::move(d);
        if (pick >= 0) ++assigned[static_cast<size_t>(pick)];
        rows.push_back(std::move(row));
    }
    return rows;
}

CountRow count_row(int n_pred, int n_gt) {
    if (n_pred < 0 || n_gt < 0) throw std::invalid_argument("counts must be nonnegative");
    CountRow r;
    r.n_pred = n_pred;
    r.n_gt = n_gt;
    r.n_cor = std::min(n_pred, n_gt);
    r.n_fal = std::max(n_pred - n_gt, 0);
    r.n_neg = std::max(n_gt - n_pred, 0);
    return r;
}

CountingSummary counting_metrics(std::span<const CountRow> rows) {
    long cor = 0, fal = 0, neg = 0;
    for (const CountRow& r : rows) {
        if (r.n_pred < 0 || r.n_gt < 0) throw std::invalid_argument("counts must be nonnegative");
        cor += r.n_cor;
        fal += r.n_fal;
        neg += r.n_neg;
    }
    CountingSummary s;
    const long pred = cor + fal, gt = cor + neg;
    if (pred == 0 || gt == 0) s.degenerate = true;
    s.precision = pred > 0 ? 100.0 * static_cast<double>(cor) / static_cast<double>(pred) : 0.0;
    s.recall = gt > 0 ? 100.0 * static_cast<double>(cor) / static_cast<double>(gt) : 0.0;
    s.f1 = (s.precision + s.recall) > 0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    return s;
}

const char* relation_name(SpatialRelation rel) {
    switch (rel) {
        case SpatialRelation::Left: return "left";
        case SpatialRelation::Right: return "right";
        case SpatialRelation::Above: return "above";
        case SpatialRelation::Below: return "below";
    }
    return "?";
}

const char* relation_name(SizeRelation rel) {
    return rel == SizeRelation::Smaller ? "smaller" : "larger";
}

double spatial_accuracy(std::span<const SpatialPair> pairs) {
    if (pairs.empty()) return 0.0;
    int correct = 0;
    for (const SpatialPair& p : pairs) {
        if (!p.a || !p.b) continue;  // missing detection -> incorrect
        const double ax = p.a->center_x(), ay = p.a->center_y();
        const double bx = p.b->center_x(), by = p.b->center_y();
        bool ok = false;
        switch (p.rel) {
            case SpatialRelation::Left: ok = ax < bx; break;
            case SpatialRelation::Right: ok = ax > bx; break;
            case SpatialRelation::Above: ok = ay < by; break;
            case SpatialRelation::Below: ok = ay > by; break;
        }
        if (ok) ++correct;
    }
    return 100.0 * correct / static_cast<double>(pairs.size());
}

double size_accuracy(std::span<const SizePair> pairs) {
    if (pairs.empty()) return 0.0;
    int correct = 0;
    for (const SizePair& p : pairs) {
        if (!p.a || !p.b) continue;
        const double aa = p.a->area(), ab = p.b->area();
        const bool ok = p.rel == SizeRelation::Smaller ? aa < ab : aa > ab;
        if (ok) ++correct;
    }
    return 100.0 * correct / static_cast<double>(pairs.size());
}

double color_accuracy(std::span<const std::vector<Detection>> matched,
                      std::span<const std::string> expected) {
    if (matched.size() != expected.size()) {
        throw std::invalid_argument("color_accuracy: one expected color per phrase");
    }
    if (matched.empty()) return 0.0;
    int correct = 0;
    for (size_t i = 0; i < matched.size(); ++i) {
        if (!matched[i].empty() && matched[i].front().color == expected[i]) ++correct;
    }
    return 100.0 * correct / static_cast<double>(matched.size());
}

double boundary_overlap_diagnostic(const Tensor& map, const MaskSet& masks) {
    if (masks.per_object.size() < 2) {
        throw std::invalid_argument(
            "boundary overlap diagnostic needs at least two objects in the phrase");
    }
    if (map.rank() != 2 || map.dim(0) != masks.grid_h || map.dim(1) != masks.grid_w) {
        throw std::invalid_argument("map shape " + shape_to_string(map.shape()) +
                                    " does not match the mask grid");
    }
    const int w = masks.grid_w, h = masks.grid_h;
    std::vector<int> coverage(static_cast<size_t>(w) * h, 0);
    for (const MaskGrid& g : masks.per_object) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const bool hit = g.at(x, y) || (x > 0 && g.at(x - 1, y)) ||
                                 (x + 1 < w && g.at(x + 1, y)) || (y > 0 && g.at(x, y - 1)) ||
                                 (y + 1 < h && g.at(x, y + 1));
                if (hit) ++coverage[static_cast<size_t>(y) * w + x];
            }
        }
    }
    double total = 0, overlap = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double v = map[static_cast<size_t>(y) * w + x];
            total += v;
            if (coverage[static_cast<size_t>(y) * w + x] >= 2) overlap += v;
        }
    }
    if (total <= 0) return 0.0;
    return overlap / total;
}

namespace {

// Mean of box centroids and mean area for one phrase's ground truth.
struct PhraseGeometry {
    double cx = 0, cy = 0, area = 0;
};

PhraseGeometry geometry(const PhraseTruth& t) {
    PhraseGeometry g;
    for (const BoundingBox& b : t.boxes) {
        g.cx += b.center_x();
        g.cy += b.center_y();
        g.area += b.area();
    }
    const double n = static_cast<double>(t.boxes.size());
    g.cx /= n;
    g.cy /= n;
    g.area /= n;
    return g;
}

}  // namespace

MetricsReport score_detections(std::span<const DetectionRow> rows,
                               std::span<const LabeledLayout> cases) {
    std::map<std::string, size_t> case_index;
    for (size_t i = 0; i < cases.size(); ++i) case_index[cases[i].id] = i;
    // group rows by case, keeping only phrase-attributed detections
    std::vector<std::vector<const DetectionRow*>> by_case(cases.size());
    for (const DetectionRow& r : rows) {
        auto it = case_index.find(r.image_id);
        if (it == case_index.end()) {
            throw std::invalid_argument("detections reference unknown image id '" + r.image_id +
                                        "'");
        }
        if (r.phrase_index >= 0) by_case[it->second].push_back(&r);
    }

    MetricsReport report;
    std::vector<SpatialPair> spatial;
    std::vector<SizePair> sizes;
    std::vector<std::vector<Detection>> matched_all;
    std::vector<std::string> expected_all;

    for (size_t ci = 0; ci < cases.size(); ++ci) {
        const std::vector<PhraseTruth> truths = phrase_truths(cases[ci].layout);
        std::vector<std::vector<Detection>> matched(truths.size());
        for (const DetectionRow* r : by_case[ci]) {
            for (size_t ti = 0; ti < truths.size(); ++ti) {
                if (truths[ti].phrase_index == r->phrase_index) {
                    matched[ti].push_back(r->det);
                    break;
                }
            }
        }
        for (auto& m : matched) {
            std::sort(m.begin(), m.end(), [](const Detection& a, const Detection& b) {
                return a.confidence > b.confidence;
            });
        }

        for (size_t ti = 0; ti < truths.size(); ++ti) {
            PerPromptRow row;
            row.image_id = cases[ci].id;
            row.phrase_index = truths[ti].phrase_index;
            row.counts = count_row(static_cast<int>(matched[ti].size()),
                                   static_cast<int>(truths[ti].boxes.size()));
            report.rows.push_back(std::move(row));
            matched_all.push_back(matched[ti]);
            expected_all.push_back(truths[ti].color);
        }

        for (size_t i = 0; i < truths.size(); ++i) {
            for (size_t j = i + 1; j < truths.size(); ++j) {
                const PhraseGeometry gi = geometry(truths[i]), gj = geometry(truths[j]);
                std::optional<BoundingBox> pa, pb;
                if (!matched[i].empty()) pa = matched[i].front().box;
                if (!matched[j].empty()) pb = matched[j].front().box;

                const double dx = gi.cx - gj.cx, dy = gi.cy - gj.cy;
                if (std::fabs(dx) >= std::fabs(dy)) {
                    if (dx != 0) {
                        spatial.push_back(SpatialPair{
                            pa, pb, dx < 0 ? SpatialRelation::Left : SpatialRelation::Right});
                    }
                } else {
                    spatial.push_back(SpatialPair{
                        pa, pb, dy < 0 ? SpatialRelation::Above : SpatialRelation::Below});
                }
                if (gi.area != gj.area) {
                    sizes.push_back(SizePair{
                        pa, pb, gi.area < gj.area ? SizeRelation::Smaller : SizeRelation::Larger});
                }
            }
        }
    }

    std::vector<CountRow> counts;
    for (const PerPromptRow& r : report.rows) counts.push_back(r.counts);
    report.counting = counting_metrics(counts);
    report.spatial_acc = spatial_accuracy(spatial);
    report.size_acc = size_accuracy(sizes);
    report.color_acc = color_accuracy(matched_all, expected_all);
    report.spatial_pairs = static_cast<int>(spatial.size());
    report.size_pairs = static_cast<int>(sizes.size());
    report.color_cases = static_cast<int>(matched_all.size());
    return report;
}

namespace {

constexpr const char* kDetectionsHeader =
    "image_id,phrase_index,label,x1,y1,x2,y2,color,confidence";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_double(const std::string& s, int line_no) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw parse_error("detections line " + std::to_string(line_no) + ": bad number '" + s +
                          "'");
    }
}

}  // namespace

void write_detections_csv(const std::string& path, std::span<const DetectionRow> rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << kDetectionsHeader << "\n";
    char buf[512];
    for (const DetectionRow& r : rows) {
        if (r.image_id.find(',') != std::string::npos ||
            r.det.label.find(',') != std::string::npos) {
            throw std::invalid_argument("detection fields must not contain commas");
        }
        std::snprintf(buf, sizeof buf, "%s,%d,%s,%.17g,%.17g,%.17g,%.17g,%s,%.17g\n",
                      r.image_id.c_str(), r.phrase_index, r.det.label.c_str(), r.det.box.x1,
                      r.det.box.y1, r.det.box.x2, r.det.box.y2, r.det.color.c_str(),
                      r.det.confidence);
        f << buf;
    }
    if (!f.good()) throw std::runtime_error("write failed for " + path);
}

std::vector<DetectionRow> read_detections_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != kDetectionsHeader) {
        throw parse_error(path + ": missing detections header");
    }
    std::vector<DetectionRow> rows;
    int line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 9) {
            throw parse_error("detections line " + std::to_string(line_no) + ": expected 9 " +
                              "fields, got " + std::to_string(fields.size()));
        }
        DetectionRow r;
        r.image_id = fields[0];
        try {
            r.phrase_index = std::stoi(fields[1]);
        } catch (const std::exception&) {
            throw parse_error("detections line " + std::to_string(line_no) +
                              ": bad phrase index '" + fields[1] + "'");
        }
        r.det.label = fields[2];
        r.det.box = BoundingBox{parse_double(fields[3], line_no), parse_double(fields[4], line_no),
                                parse_double(fields[5], line_no), parse_double(fields[6], line_no)};
        r.det.color = fields[7];
        r.det.confidence = parse_double(fields[8], line_no);
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_metrics_json(const std::string& path, const MetricsReport& report) {
    nlohmann::json j;
    j["precision"] = report.counting.precision;
    j["recall"] = report.counting.recall;
    j["f1"] = report.counting.f1;
    j["counting_degenerate"] = report.counting.degenerate;
    j["spatial_acc"] = report.spatial_acc;
    j["size_acc"] = report.size_acc;
    j["color_acc"] = report.color_acc;
    j["spatial_pairs"] = report.spatial_pairs;
    j["size_pairs"] = report.size_pairs;
    j["color_cases"] = report.color_cases;
    j["rows"] = nlohmann::json::array();
    for (const PerPromptRow& r : report.rows) {
        j["rows"].push_back({{"image_id", r.image_id},
                             {"phrase_index", r.phrase_index},
                             {"n_pred", r.counts.n_pred},
                             {"n_gt", r.counts.n_gt},
                             {"n_cor", r.counts.n_cor},
                             {"n_fal", r.counts.n_fal},
                             {"n_neg", r.counts.n_neg}});
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(2) << "\n";
    if (!f.good()) throw std::runtime_error("write failed for " + path);
}

MetricsReport read_metrics_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    MetricsReport report;
    try {
        nlohmann::json j;
        f >> j;
        report.counting.precision = j.at("precision").get<double>();
        report.counting.recall = j.at("recall").get<double>();
        report.counting.f1 = j.at("f1").get<double>();
        report.counting.degenerate = j.at("counting_degenerate").get<bool>();
        report.spatial_acc = j.at("spatial_acc").get<double>();
        report.size_acc = j.at("size_acc").get<double>();
        report.color_acc = j.at("color_acc").get<double>();
        report.spatial_pairs = j.at("spatial_pairs").get<int>();
        report.size_pairs = j.at("size_pairs").get<int>();
        report.color_cases = j.at("color_cases").get<int>();
        for (const auto& row : j.at("rows")) {
            PerPromptRow r;
            r.image_id = row.at("image_id").get<std::string>();
            r.phrase_index = row.at("phrase_index").get<int>();
            r.counts.n_pred = row.at("n_pred").get<int>();
            r.counts.n_gt = row.at("n_gt").get<int>();
            r.counts.n_cor = row.at("n_cor").get<int>();
            r.counts.n_fal = row.at("n_fal").get<int>();
            r.counts.n_neg = row.at("n_neg").get<int>();
            report.rows.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path + ": " + e.what());
    }
    return report;
}

void write_per_prompt_csv(const std::string& path, const MetricsReport& report) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "image_id,phrase_index,n_pred,n_gt,n_cor,n_fal,n_neg\n";
    for (const PerPromptRow& r : report.rows) {
        f << r.image_id << ',' << r.phrase_index << ',' << r.counts.n_pred << ',' << r.counts.n_gt
          << ',' << r.counts.n_cor << ',' << r.counts.n_fal << ',' << r.counts.n_neg << "\n";
    }
    if (!f.good()) throw std::runtime_error("write failed for " + path);
}

}  // namespace lgen
