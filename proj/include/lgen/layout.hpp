#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgen {

struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Axis-aligned box in normalized image coordinates, top-left origin.
struct BoundingBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    bool contains(double x, double y) const { return x >= x1 && x < x2 && y >= y1 && y < y2; }

    void validate() const;  // throws parse_error on inverted/out-of-range coordinates
};

// A prompt plus the boxes constraining some of its tokens. prompt_tokens
// always includes the start/end markers; phrase keys index into it.
struct Layout {
    std::vector<std::string> prompt_tokens;
    std::map<int, std::vector<BoundingBox>> phrases;

    int token_count() const { return static_cast<int>(prompt_tokens.size()); }
    bool empty() const { return phrases.empty(); }
    std::vector<int> phrase_indices() const;
};

// Binary grid on the attention resolution. Stored row-major, y-major.
struct MaskGrid {
    int w = 0, h = 0;
    std::vector<uint8_t> cells;

    uint8_t at(int x, int y) const { return cells[static_cast<size_t>(y) * w + x]; }
    uint8_t& at(int x, int y) { return cells[static_cast<size_t>(y) * w + x]; }
    int count() const;
};

// Rasterization of one phrase's boxes: union interior, inner-ring boundary,
// per-box interiors, and the summed box perimeter in cells.
struct MaskSet {
    int grid_w = 0, grid_h = 0;
    MaskGrid interior;
    MaskGrid boundary;
    std::vector<MaskGrid> per_object;
    int perimeter_sum = 0;  // 2 * (sum of box widths + sum of box heights), in cells
};

// Layout file parser. Line 1 holds the prompt words (markers are added
// around them); later lines are `phrase <token_index> <x1> <y1> <x2> <y2>`.
// `#` starts a comment. Throws parse_error naming the offending line.
Layout parse_layout(const std::string& text,
                    const std::string& start_marker = "<s>",
                    const std::string& end_marker = "</s>");

// Cell (x, y) is inside a box iff the cell center lies in [x1,x2) x [y1,y2).
// The boundary is the inner one-cell ring of each box (interior cells
// 4-adjacent to a cell outside that same box, with the grid edge counting
// as outside). Boxes that cover no cell center raise.
MaskSet rasterize(const std::vector<BoundingBox>& boxes, int grid_w, int grid_h);

// Attention-grid shape for a given image size: the resolution names the grid
// height and the width scales by the same factor. Non-divisible sizes raise.
std::pair<int, int> grid_for_resolution(int image_w, int image_h, int attention_resolution);

}  // namespace lgen
