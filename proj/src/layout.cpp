#include "lgen/layout.hpp"

#include <cctype>
#include <cstdint>
#include <sstream>

namespace lgen {

void BoundingBox::validate() const {
    if (x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0) {
        throw parse_error("box coordinates must lie in [0,1]");
    }
    if (x1 >= x2) throw parse_error("x1 >= x2");
    if (y1 >= y2) throw parse_error("y1 >= y2");
}

std::vector<int> Layout::phrase_indices() const {
    std::vector<int> out;
    out.reserve(phrases.size());
    for (const auto& [idx, boxes] : phrases) out.push_back(idx);
    return out;
}

int MaskGrid::count() const {
    int n = 0;
    for (uint8_t c : cells) n += c;
    return n;
}

namespace {

std::string strip_comment(const std::string& line) {
    auto pos = line.find('#');
    return pos == std::string::npos ? line : line.substr(0, pos);
}

bool blank(const std::string& s) {
    for (char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c))) return false;
    }
    return true;
}

[[noreturn]] void fail(int line_no, const std::string& what) {
    throw parse_error("layout line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

Layout parse_layout(const std::string& text, const std::string& start_marker, const std::string& end_marker) {
    Layout layout;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    bool have_prompt = false;

    while (std::getline(in, line)) {
        ++line_no;
        line = strip_comment(line);
        if (blank(line)) continue;

        std::istringstream ls(line);
        if (!have_prompt) {
            layout.prompt_tokens.push_back(start_marker);
            std::string word;
            while (ls >> word) layout.prompt_tokens.push_back(word);
            layout.prompt_tokens.push_back(end_marker);
            if (layout.prompt_tokens.size() == 2) fail(line_no, "empty prompt");
            have_prompt = true;
            continue;
        }

        std::string keyword;
        ls >> keyword;
        if (keyword != "phrase") fail(line_no, "expected 'phrase', got '" + keyword + "'");
        int token_index = -1;
        BoundingBox box;
        if (!(ls >> token_index >> box.x1 >> box.y1 >> box.x2 >> box.y2)) {
            fail(line_no, "malformed coordinates (need: phrase <token_index> <x1> <y1> <x2> <y2>)");
        }
        std::string extra;
        if (ls >> extra) fail(line_no, "unexpected trailing field '" + extra + "'");
        if (token_index < 0 || token_index >= layout.token_count()) {
            fail(line_no, "unknown token index " + std::to_string(token_index) + " (prompt has " +
                              std::to_string(layout.token_count()) + " tokens)");
        }
        try {
            box.validate();
        } catch (const parse_error& e) {
            fail(line_no, e.what());
        }
        layout.phrases[token_index].push_back(box);
    }

    if (!have_prompt) throw parse_error("layout file has no prompt line");
    return layout;
}

MaskSet rasterize(const std::vector<BoundingBox>& boxes, int grid_w, int grid_h) {
    if (grid_w < 4 || grid_h < 4) {
        throw std::invalid_argument("rasterize: grid must be at least 4x4, got " + std::to_string(grid_w) + "x" +
                                    std::to_string(grid_h));
    }
    MaskSet set;
    set.grid_w = grid_w;
    set.grid_h = grid_h;
    set.interior = MaskGrid{grid_w, grid_h, std::vector<uint8_t>(static_cast<size_t>(grid_w) * grid_h, 0)};
    set.boundary = set.interior;

    for (const BoundingBox& box : boxes) {
        MaskGrid obj{grid_w, grid_h, std::vector<uint8_t>(static_cast<size_t>(grid_w) * grid_h, 0)};
        int min_x = grid_w, max_x = -1, min_y = grid_h, max_y = -1;
        for (int y = 0; y < grid_h; ++y) {
            const double cy = (y + 0.5) / grid_h;
            for (int x = 0; x < grid_w; ++x) {
                const double cx = (x + 0.5) / grid_w;
                if (box.contains(cx, cy)) {
                    obj.at(x, y) = 1;
                    if (x < min_x) min_x = x;
                    if (x > max_x) max_x = x;
                    if (y < min_y) min_y = y;
                    if (y > max_y) max_y = y;
                }
            }
        }
        if (max_x < 0) {
            throw std::invalid_argument("rasterize: box covers no cell center at grid " + std::to_string(grid_w) +
                                        "x" + std::to_string(grid_h) + " (degenerate box)");
        }
        const int bw = max_x - min_x + 1;
        const int bh = max_y - min_y + 1;
        set.perimeter_sum += 2 * (bw + bh);

        // Inner ring: interior cells of this box with a 4-neighbor outside it.
        for (int y = min_y; y <= max_y; ++y) {
            for (int x = min_x; x <= max_x; ++x) {
                if (!obj.at(x, y)) continue;
                const bool edge = (x == 0 || !obj.at(x - 1, y)) || (x == grid_w - 1 || !obj.at(x + 1, y)) ||
                                  (y == 0 || !obj.at(x, y - 1)) || (y == grid_h - 1 || !obj.at(x, y + 1));
                if (edge) set.boundary.at(x, y) = 1;
            }
        }
        for (size_t i = 0; i < obj.cells.size(); ++i) {
            if (obj.cells[i]) set.interior.cells[i] = 1;
        }
        set.per_object.push_back(std::move(obj));
    }
    return set;
}

std::pair<int, int> grid_for_resolution(int image_w, int image_h, int attention_resolution) {
    if (attention_resolution <= 0 || image_h % attention_resolution != 0) {
        throw std::invalid_argument("grid_for_resolution: resolution " + std::to_string(attention_resolution) +
                                    " does not divide image height " + std::to_string(image_h));
    }
    const int scale = image_h / attention_resolution;
    if (image_w % scale != 0) {
        throw std::invalid_argument("grid_for_resolution: scale " + std::to_string(scale) +
                                    " does not divide image width " + std::to_string(image_w));
    }
    return {image_w / scale, attention_resolution};
}

}  // namespace lgen
