#include "lgen/attention.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lgen {

namespace {

double attention_scale(const Tensor& q, const Tensor& k, const char* op) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(1) < 1) {
        throw std::invalid_argument(std::string(op) + ": query " + q.shape_str() + " and key " +
                                    k.shape_str() + " must share a positive feature dimension");
    }
    return 1.0 / std::sqrt(static_cast<double>(k.dim(1)));
}

}  // namespace

Var cross_attention(Tape& t, Var query, Var key) {
    const double s = attention_scale(t.value(query), t.value(key), "cross_attention");
    return t.softmax_rows(t.scale(t.matmul_nt(query, key), s));
}

Var self_attention(Tape& t, Var query, Var key) {
    const double s = attention_scale(t.value(query), t.value(key), "self_attention");
    return t.softmax_rows(t.scale(t.matmul_nt(query, key), s));
}

Tensor cross_attention(const Tensor& query, const Tensor& key) {
    const double s = attention_scale(query, key, "cross_attention");
    return softmax_rows(scale(matmul_nt(query, key), s));
}

Tensor self_attention(const Tensor& query, const Tensor& key) {
    const double s = attention_scale(query, key, "self_attention");
    return softmax_rows(scale(matmul_nt(query, key), s));
}

AttentionStack aggregate(Tape& t, std::vector<AttentionLayer> layers) {
    if (layers.empty()) throw std::invalid_argument("aggregate: empty attention stack");

    int ref_h = 0, ref_w = 0;
    for (const AttentionLayer& l : layers) {
        if (l.h * l.w > ref_h * ref_w) {
            ref_h = l.h;
            ref_w = l.w;
        }
    }

    std::vector<Var> crosses, selfs;
    crosses.reserve(layers.size());
    selfs.reserve(layers.size());
    for (const AttentionLayer& l : layers) {
        if (l.h <= 0 || l.w <= 0 || ref_h % l.h != 0 || ref_w % l.w != 0 || ref_h / l.h != ref_w / l.w) {
            throw std::invalid_argument("aggregate: layer grid " + std::to_string(l.w) + "x" +
                                        std::to_string(l.h) + " does not align with reference " +
                                        std::to_string(ref_w) + "x" + std::to_string(ref_h));
        }
        const int f = ref_h / l.h;
        Var c = l.cross;
        Var s = l.self_map;
        if (f > 1) {
            c = t.upsample_rows(c, l.h, l.w, f);
            s = t.upsample_rows(s, l.h, l.w, f);
            s = t.upsample_cols(s, l.h, l.w, f);
            s = t.scale(s, 1.0 / (f * f));  // restore row sums to 1
        }
        crosses.push_back(c);
        selfs.push_back(s);
    }

    AttentionStack stack;
    stack.ref_h = ref_h;
    stack.ref_w = ref_w;
    if (layers.size() == 1) {
        stack.cross = crosses[0];
        stack.self_map = selfs[0];
    } else {
        const std::vector<double> coeffs(layers.size(), 1.0 / static_cast<double>(layers.size()));
        stack.cross = t.lincomb(crosses, coeffs);
        stack.self_map = t.lincomb(selfs, coeffs);
    }
    stack.layers = std::move(layers);
    return stack;
}

Var phrase_column(Tape& t, Var cross, std::span<const int> token_positions) {
    if (token_positions.empty()) throw std::invalid_argument("phrase_column: no token positions");
    std::vector<Var> cols;
    cols.reserve(token_positions.size());
    for (int j : token_positions) cols.push_back(t.column(cross, j));
    if (cols.size() == 1) return cols[0];
    const std::vector<double> coeffs(cols.size(), 1.0 / static_cast<double>(cols.size()));
    return t.lincomb(cols, coeffs);
}

Var enhance(Tape& t, Var self_map, Var col, int tau) {
    if (tau < 0) throw std::invalid_argument("enhance: tau must be nonnegative");
    Var v = col;
    for (int i = 0; i < tau; ++i) v = t.matmul_tn(self_map, v);
    return v;
}

Tensor enhance(const Tensor& self_map, const Tensor& col, int tau) {
    if (tau < 0) throw std::invalid_argument("enhance: tau must be nonnegative");
    Tensor v = col;
    for (int i = 0; i < tau; ++i) v = matmul_tn(self_map, v);
    return v;
}

EnhancedPhraseMap normalize_reshape(Tape& t, Var v, int w, int h, int phrase_index) {
    const Tensor& val = t.value(v);
    if (static_cast<int>(val.size()) != w * h || w <= 0 || h <= 0) {
        throw std::invalid_argument("normalize_reshape: " + val.shape_str() + " does not hold a " +
                                    std::to_string(w) + "x" + std::to_string(h) + " grid");
    }
    EnhancedPhraseMap m;
    m.phrase_index = phrase_index;
    m.w = w;
    m.h = h;
    if (val.max_value() - val.min_value() <= 0.0) {
        m.map = t.constant(Tensor({h, w}));
        m.constant_input = true;
        return m;
    }
    Var lo = t.min_all(v);
    Var range = t.sub(t.max_all(v), lo);
    m.map = t.reshape(t.div_bcast(t.sub_bcast(v, lo), range), {h, w});
    return m;
}

Tensor normalize_map(const Tensor& v) {
    Tensor out(v.shape());
    const double lo = v.min_value();
    const double range = v.max_value() - lo;
    if (range <= 0.0) return out;
    for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / range;
    return out;
}

std::string attention_dump_filename(int step, int phrase_index) {
    return "attn_t" + std::to_string(step) + "_p" + std::to_string(phrase_index) + ".txt";
}

void write_attention_dump(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw std::invalid_argument("write_attention_dump: expected a 2-D grid");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_attention_dump: cannot open " + path);
    out.precision(17);
    for (int y = 0; y < map.dim(0); ++y) {
        for (int x = 0; x < map.dim(1); ++x) {
            if (x) out << ' ';
            out << map.at(y, x);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write_attention_dump: write failed for " + path);
}

Tensor read_attention_dump(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_attention_dump: cannot open " + path);
    std::vector<double> values;
    int rows = 0, cols = -1;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        double x;
        int c = 0;
        while (ss >> x) {
            values.push_back(x);
            ++c;
        }
        if (cols < 0) {
            cols = c;
        } else if (c != cols) {
            throw std::runtime_error("read_attention_dump: ragged rows in " + path);
        }
        ++rows;
    }
    if (rows == 0 || cols <= 0) throw std::runtime_error("read_attention_dump: no data in " + path);
    return Tensor({rows, cols}, std::move(values));
}

}  // namespace lgen
