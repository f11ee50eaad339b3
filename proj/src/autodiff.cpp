#include "lgen/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace lgen {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw nonfinite_error(std::string(op) + ": produced non-finite values");
}

}  // namespace

int Tape::check(Var v, const char* what) const {
    if (!v.valid() || v.owner != this || v.id >= static_cast<int>(nodes_.size())) {
        throw unknown_variable_error(std::string("unknown variable passed to ") + what);
    }
    return v.id;
}

Var Tape::push(Op op, std::vector<int> parents, Tensor value, std::vector<int> iparams,
               std::vector<double> dparams) {
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.iparams = std::move(iparams);
    n.dparams = std::move(dparams);
    n.value = std::move(value);
    for (int p : n.parents) {
        if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1, this};
}

Var Tape::input(Tensor t) {
    require_finite(t, "input");
    Var v = push(Op::Leaf, {}, std::move(t));
    nodes_.back().requires_grad = true;
    return v;
}

Var Tape::constant(Tensor t) {
    require_finite(t, "constant");
    return push(Op::Leaf, {}, std::move(t));
}

const Tensor& Tape::value(Var v) const { return nodes_[static_cast<size_t>(check(v, "value"))].value; }

Var Tape::add(Var a, Var b) {
    int ia = check(a, "add"), ib = check(b, "add");
    return push(Op::Add, {ia, ib}, lgen::add(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::sub(Var a, Var b) {
    int ia = check(a, "sub"), ib = check(b, "sub");
    return push(Op::Sub, {ia, ib}, lgen::sub(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::mul(Var a, Var b) {
    int ia = check(a, "mul"), ib = check(b, "mul");
    return push(Op::Mul, {ia, ib}, lgen::mul(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::square(Var a) {
    int ia = check(a, "square");
    const Tensor& x = nodes_[ia].value;
    Tensor out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
    return push(Op::Square, {ia}, std::move(out));
}

Var Tape::silu(Var a) {
    int ia = check(a, "silu");
    const Tensor& x = nodes_[ia].value;
    Tensor out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return push(Op::Silu, {ia}, std::move(out));
}

Var Tape::scale(Var a, double c) {
    int ia = check(a, "scale");
    return push(Op::Scale, {ia}, lgen::scale(nodes_[ia].value, c), {}, {c});
}

Var Tape::add_row_vec(Var x, Var b) {
    int ix = check(x, "add_row_vec"), ib = check(b, "add_row_vec");
    const Tensor& xv = nodes_[ix].value;
    const Tensor& bv = nodes_[ib].value;
    if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
        throw std::invalid_argument("add_row_vec: incompatible shapes " + xv.shape_str() + " and " + bv.shape_str());
    }
    Tensor out(xv.shape());
    const int m = xv.dim(0), n = xv.dim(1);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) + bv[static_cast<size_t>(j)];
    }
    return push(Op::AddRowVec, {ix, ib}, std::move(out));
}

Var Tape::add_channel(Var x, Var b) {
    int ix = check(x, "add_channel"), ib = check(b, "add_channel");
    const Tensor& xv = nodes_[ix].value;
    const Tensor& bv = nodes_[ib].value;
    if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0)) {
        throw std::invalid_argument("add_channel: incompatible shapes " + xv.shape_str() + " and " + bv.shape_str());
    }
    Tensor out(xv.shape());
    const int c = xv.dim(0);
    const size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
    for (int ch = 0; ch < c; ++ch) {
        const double bvv = bv[static_cast<size_t>(ch)];
        for (size_t i = 0; i < plane; ++i) out[ch * plane + i] = xv[ch * plane + i] + bvv;
    }
    return push(Op::AddChannel, {ix, ib}, std::move(out));
}

Var Tape::sub_bcast(Var x, Var s) {
    int ix = check(x, "sub_bcast"), is = check(s, "sub_bcast");
    if (nodes_[is].value.size() != 1) throw std::invalid_argument("sub_bcast: s must be scalar");
    const Tensor& xv = nodes_[ix].value;
    const double sv = nodes_[is].value[0];
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] - sv;
    return push(Op::SubBcast, {ix, is}, std::move(out));
}

Var Tape::div_bcast(Var x, Var s) {
    int ix = check(x, "div_bcast"), is = check(s, "div_bcast");
    if (nodes_[is].value.size() != 1) throw std::invalid_argument("div_bcast: s must be scalar");
    const Tensor& xv = nodes_[ix].value;
    const double sv = nodes_[is].value[0];
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / sv;
    require_finite(out, "div_bcast");
    return push(Op::DivBcast, {ix, is}, std::move(out));
}

Var Tape::matmul(Var a, Var b) {
    int ia = check(a, "matmul"), ib = check(b, "matmul");
    return push(Op::MatMul, {ia, ib}, lgen::matmul(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::matmul_nt(Var a, Var b) {
    int ia = check(a, "matmul_nt"), ib = check(b, "matmul_nt");
    return push(Op::MatMulNT, {ia, ib}, lgen::matmul_nt(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::matmul_tn(Var a, Var b) {
    int ia = check(a, "matmul_tn"), ib = check(b, "matmul_tn");
    return push(Op::MatMulTN, {ia, ib}, lgen::matmul_tn(nodes_[ia].value, nodes_[ib].value));
}

Var Tape::softmax_rows(Var x) {
    int ix = check(x, "softmax_rows");
    return push(Op::SoftmaxRows, {ix}, lgen::softmax_rows(nodes_[ix].value));
}

Var Tape::upsample_rows(Var x, int src_h, int src_w, int factor) {
    int ix = check(x, "upsample_rows");
    return push(Op::UpsampleRows, {ix}, lgen::upsample_rows(nodes_[ix].value, src_h, src_w, factor),
                {src_h, src_w, factor});
}

Var Tape::upsample_cols(Var x, int src_h, int src_w, int factor) {
    int ix = check(x, "upsample_cols");
    return push(Op::UpsampleCols, {ix}, lgen::upsample_cols(nodes_[ix].value, src_h, src_w, factor),
                {src_h, src_w, factor});
}

Var Tape::column(Var x, int j) {
    int ix = check(x, "column");
    const Tensor& xv = nodes_[ix].value;
    if (xv.rank() != 2 || j < 0 || j >= xv.dim(1)) {
        throw std::invalid_argument("column: index " + std::to_string(j) + " out of range for " + xv.shape_str());
    }
    const int m = xv.dim(0);
    Tensor out({m, 1});
    for (int i = 0; i < m; ++i) out[static_cast<size_t>(i)] = xv.at(i, j);
    return push(Op::Column, {ix}, std::move(out), {j});
}

Var Tape::sum_all(Var x) {
    int ix = check(x, "sum_all");
    return push(Op::SumAll, {ix}, Tensor::scalar(nodes_[ix].value.sum()));
}

Var Tape::min_all(Var x) {
    int ix = check(x, "min_all");
    const Tensor& xv = nodes_[ix].value;
    int arg = 0;
    double best = xv[0];
    for (size_t i = 1; i < xv.size(); ++i) {
        if (xv[i] < best) {
            best = xv[i];
            arg = static_cast<int>(i);
        }
    }
    return push(Op::MinAll, {ix}, Tensor::scalar(best), {arg});
}

Var Tape::max_all(Var x) {
    int ix = check(x, "max_all");
    const Tensor& xv = nodes_[ix].value;
    int arg = 0;
    double best = xv[0];
    for (size_t i = 1; i < xv.size(); ++i) {
        if (xv[i] > best) {
            best = xv[i];
            arg = static_cast<int>(i);
        }
    }
    return push(Op::MaxAll, {ix}, Tensor::scalar(best), {arg});
}

Var Tape::div_scalar(Var a, Var b) {
    int ia = check(a, "div_scalar"), ib = check(b, "div_scalar");
    if (nodes_[ia].value.size() != 1 || nodes_[ib].value.size() != 1) {
        throw std::invalid_argument("div_scalar: both operands must be scalars");
    }
    double out = nodes_[ia].value[0] / nodes_[ib].value[0];
    if (!std::isfinite(out)) throw nonfinite_error("div_scalar: produced non-finite value");
    return push(Op::DivScalar, {ia, ib}, Tensor::scalar(out));
}

Var Tape::min_of(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("min_of: empty argument list");
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (Var v : xs) {
        int i = check(v, "min_of");
        if (nodes_[i].value.size() != 1) throw std::invalid_argument("min_of: operands must be scalars");
        parents.push_back(i);
    }
    int arg = 0;
    double best = nodes_[parents[0]].value[0];
    for (size_t k = 1; k < parents.size(); ++k) {
        double v = nodes_[parents[k]].value[0];
        if (v < best) {  // strict: ties keep the lowest index
            best = v;
            arg = static_cast<int>(k);
        }
    }
    return push(Op::MinOf, std::move(parents), Tensor::scalar(best), {arg});
}

Var Tape::lincomb(std::span<const Var> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size()) {
        throw std::invalid_argument("lincomb: argument and coefficient counts must match and be nonzero");
    }
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (Var v : xs) parents.push_back(check(v, "lincomb"));
    const Tensor& first = nodes_[parents[0]].value;
    Tensor out(first.shape());
    for (size_t k = 0; k < parents.size(); ++k) {
        const Tensor& t = nodes_[parents[k]].value;
        throw_if_shape_mismatch(first, t, "lincomb");
        for (size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * t[i];
    }
    return push(Op::Lincomb, std::move(parents), std::move(out), {},
                std::vector<double>(coeffs.begin(), coeffs.end()));
}

Var Tape::reshape(Var x, std::vector<int> shape) {
    int ix = check(x, "reshape");
    const Tensor& xv = nodes_[ix].value;
    if (shape_numel(shape) != xv.size()) {
        throw std::invalid_argument("reshape: element count mismatch " + xv.shape_str() + " -> " +
                                    shape_to_string(shape));
    }
    Tensor out(shape, std::vector<double>(xv.data(), xv.data() + xv.size()));
    return push(Op::Reshape, {ix}, std::move(out));
}

Var Tape::chw_to_seq(Var x) {
    int ix = check(x, "chw_to_seq");
    const Tensor& xv = nodes_[ix].value;
    if (xv.rank() != 3) throw std::invalid_argument("chw_to_seq: expected [C,H,W], got " + xv.shape_str());
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({h * w, c});
    for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < h * w; ++p) out.at(p, ch) = xv[static_cast<size_t>(ch) * h * w + p];
    }
    return push(Op::ChwToSeq, {ix}, std::move(out), {c, h, w});
}

Var Tape::seq_to_chw(Var x, int c, int h, int w) {
    int ix = check(x, "seq_to_chw");
    const Tensor& xv = nodes_[ix].value;
    if (xv.rank() != 2 || xv.dim(0) != h * w || xv.dim(1) != c) {
        throw std::invalid_argument("seq_to_chw: expected [" + std::to_string(h * w) + "," + std::to_string(c) +
                                    "], got " + xv.shape_str());
    }
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < h * w; ++p) out[static_cast<size_t>(ch) * h * w + p] = xv.at(p, ch);
    }
    return push(Op::SeqToChw, {ix}, std::move(out), {c, h, w});
}

namespace {

struct ConvDims {
    int cin, hin, win, cout, kh, kw, hout, wout, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
        throw std::invalid_argument("conv2d: expected x[C,H,W], w[Co,Ci,kh,kw], b[Co]");
    }
    ConvDims d;
    d.cin = x.dim(0);
    d.hin = x.dim(1);
    d.win = x.dim(2);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.cin || b.dim(0) != d.cout) {
        throw std::invalid_argument("conv2d: channel mismatch " + x.shape_str() + " vs " + w.shape_str());
    }
    d.hout = (d.hin + 2 * pad - d.kh) / stride + 1;
    d.wout = (d.win + 2 * pad - d.kw) / stride + 1;
    if (d.hout <= 0 || d.wout <= 0) throw std::invalid_argument("conv2d: empty output");
    return d;
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    int ix = check(x, "conv2d"), iw = check(w, "conv2d"), ib = check(b, "conv2d");
    const Tensor& xv = nodes_[ix].value;
    const Tensor& wv = nodes_[iw].value;
    const Tensor& bv = nodes_[ib].value;
    ConvDims d = conv_dims(xv, wv, bv, stride, pad);

    Tensor out({d.cout, d.hout, d.wout});
    const size_t in_plane = static_cast<size_t>(d.hin) * d.win;
    const size_t out_plane = static_cast<size_t>(d.hout) * d.wout;
    for (int co = 0; co < d.cout; ++co) {
        double* oplane = out.data() + co * out_plane;
        const double bias = bv[static_cast<size_t>(co)];
        for (size_t i = 0; i < out_plane; ++i) oplane[i] = bias;
        for (int ci = 0; ci < d.cin; ++ci) {
            const double* iplane = xv.data() + ci * in_plane;
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    const double wval =
                        wv[((static_cast<size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    for (int oy = 0; oy < d.hout; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= d.hin) continue;
                        const double* irow = iplane + static_cast<size_t>(iy) * d.win;
                        double* orow = oplane + static_cast<size_t>(oy) * d.wout;
                        for (int ox = 0; ox < d.wout; ++ox) {
                            const int ixx = ox * stride + kx - pad;
                            if (ixx < 0 || ixx >= d.win) continue;
                            orow[ox] += wval * irow[ixx];
                        }
                    }
                }
            }
        }
    }
    return push(Op::Conv2d, {ix, iw, ib}, std::move(out), {stride, pad});
}

Var Tape::upsample2x(Var x) {
    int ix = check(x, "upsample2x");
    const Tensor& xv = nodes_[ix].value;
    if (xv.rank() != 3) throw std::invalid_argument("upsample2x: expected [C,H,W], got " + xv.shape_str());
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < 2 * h; ++y) {
            const double* irow = xv.data() + (static_cast<size_t>(ch) * h + y / 2) * w;
            double* orow = out.data() + (static_cast<size_t>(ch) * 2 * h + y) * 2 * w;
            for (int xx = 0; xx < 2 * w; ++xx) orow[xx] = irow[xx / 2];
        }
    }
    return push(Op::Upsample2x, {ix}, std::move(out));
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
    int ix = check(x, "group_norm"), ig = check(gamma, "group_norm"), ib = check(beta, "group_norm");
    const Tensor& xv = nodes_[ix].value;
    const Tensor& gv = nodes_[ig].value;
    const Tensor& bv = nodes_[ib].value;
    if (xv.rank() != 3 || gv.rank() != 1 || bv.rank() != 1) {
        throw std::invalid_argument("group_norm: expected x[C,H,W], gamma[C], beta[C]");
    }
    const int c = xv.dim(0);
    if (gv.dim(0) != c || bv.dim(0) != c || groups <= 0 || c % groups != 0) {
        throw std::invalid_argument("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                                    std::to_string(groups));
    }
    const size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
    const int cs = c / groups;
    const size_t gsize = cs * plane;

    Tensor out(xv.shape());
    std::vector<double> stats;  // per group: mean, inv_std
    stats.reserve(2 * static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const double* gx = xv.data() + static_cast<size_t>(g) * gsize;
        double mean = 0.0;
        for (size_t i = 0; i < gsize; ++i) mean += gx[i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (size_t i = 0; i < gsize; ++i) {
            const double dv = gx[i] - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(gsize);
        const double inv = 1.0 / std::sqrt(var + eps);
        stats.push_back(mean);
        stats.push_back(inv);
        for (int cc = 0; cc < cs; ++cc) {
            const int ch = g * cs + cc;
            const double gm = gv[static_cast<size_t>(ch)];
            const double bt = bv[static_cast<size_t>(ch)];
            const double* irow = xv.data() + ch * plane;
            double* orow = out.data() + ch * plane;
            for (size_t i = 0; i < plane; ++i) orow[i] = gm * (irow[i] - mean) * inv + bt;
        }
    }
    std::vector<double> dparams;
    dparams.push_back(eps);
    dparams.insert(dparams.end(), stats.begin(), stats.end());
    return push(Op::GroupNorm, {ix, ig, ib}, std::move(out), {groups}, std::move(dparams));
}

Var Tape::embed(Var table, const std::vector<int>& token_ids) {
    int it = check(table, "embed");
    const Tensor& tv = nodes_[it].value;
    if (tv.rank() != 2) throw std::invalid_argument("embed: table must be [vocab, dim]");
    const int vocab = tv.dim(0), dim = tv.dim(1);
    Tensor out({static_cast<int>(token_ids.size()), dim});
    std::vector<int> iparams;
    iparams.reserve(token_ids.size());
    for (size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (id < 0 || id >= vocab) throw std::invalid_argument("embed: token id " + std::to_string(id) + " out of range");
        iparams.push_back(id);
        for (int j = 0; j < dim; ++j) out.at(static_cast<int>(i), j) = tv.at(id, j);
    }
    return push(Op::Embed, {it}, std::move(out), std::move(iparams));
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_live) {
        n.grad = Tensor(n.value.shape());
        n.grad_live = true;
    }
    return n.grad;
}

Tensor Tape::grad_value(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(check(v, "grad_value"))];
    return n.grad_live ? n.grad : Tensor(n.value.shape());
}

void Tape::backward(Var loss) {
    const int lid = check(loss, "backward");
    if (nodes_[static_cast<size_t>(lid)].value.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar");
    }
    for (auto& n : nodes_) {
        n.grad_live = false;
        n.grad = Tensor();
    }
    grad_buffer(lid)[0] = 1.0;
    for (int id = lid; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_live || !n.requires_grad || n.parents.empty()) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = n.grad;
    auto wants = [&](int k) { return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].requires_grad; };
    auto pval = [&](int k) -> const Tensor& { return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].value; };
    auto pgrad = [&](int k) -> Tensor& { return grad_buffer(n.parents[static_cast<size_t>(k)]); };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add: {
            for (int k = 0; k < 2; ++k) {
                if (!wants(k)) continue;
                Tensor& pg = pgrad(k);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (wants(1)) {
                Tensor& pg = pgrad(1);
                for (size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const Tensor& other = pval(1);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * other[i];
            }
            if (wants(1)) {
                Tensor& pg = pgrad(1);
                const Tensor& other = pval(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * other[i];
            }
            break;
        }
        case Op::Square: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const Tensor& x = pval(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += 2.0 * x[i] * g[i];
            }
            break;
        }
        case Op::Silu: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const Tensor& x = pval(0);
                for (size_t i = 0; i < g.size(); ++i) {
                    const double s = sigmoid(x[i]);
                    pg[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                }
            }
            break;
        }
        case Op::Scale: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const double c = n.dparams[0];
                for (size_t i = 0; i < g.size(); ++i) pg[i] += c * g[i];
            }
            break;
        }
        case Op::AddRowVec: {
            const int m = n.value.dim(0), cols = n.value.dim(1);
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (wants(1)) {
                Tensor& pg = pgrad(1);
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < cols; ++j) pg[static_cast<size_t>(j)] += g.at(i, j);
                }
            }
            break;
        }
        case Op::AddChannel: {
            const int c = n.value.dim(0);
            const size_t plane = static_cast<size_t>(n.value.dim(1)) * n.value.dim(2);
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (wants(1)) {
                Tensor& pg = pgrad(1);
                for (int ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (size_t i = 0; i < plane; ++i) s += g[ch * plane + i];
                    pg[static_cast<size_t>(ch)] += s;
                }
            }
            break;
        }
        case Op::SubBcast: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            if (wants(1)) {
                double s = 0.0;
                for (size_t i = 0; i < g.size(); ++i) s += g[i];
                pgrad(1)[0] -= s;
            }
            break;
        }
        case Op::DivBcast: {
            const double sv = pval(1)[0];
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] / sv;
            }
            if (wants(1)) {
                const Tensor& x = pval(0);
                double s = 0.0;
                for (size_t i = 0; i < g.size(); ++i) s += g[i] * x[i];
                pgrad(1)[0] += -s / (sv * sv);
            }
            break;
        }
        case Op::MatMul: {
            const Tensor& a = pval(0);
            const Tensor& b = pval(1);
            if (wants(0)) {
                Tensor da = lgen::matmul_nt(g, b);  // dC * B^T
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < da.size(); ++i) pg[i] += da[i];
            }
            if (wants(1)) {
                Tensor db = lgen::matmul_tn(a, g);  // A^T * dC
                Tensor& pg = pgrad(1);
                for (size_t i = 0; i < db.size(); ++i) pg[i] += db[i];
            }
            break;
        }
        case Op::MatMulNT: {
            // C = A * B^T
            const Tensor& a = pval(0);
            const Tensor& b = pval(1);
            if (wants(0)) {
                Tensor da = lgen::matmul(g, b);  // dC * B
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < da.size(); ++i) pg[i] += da[i];
            }
            if (wants(1)) {
                Tensor db = lgen::matmul_tn(g, a);  // dC^T * A
                Tensor& pg = pgrad(1);
                for (size_t i = 0; i < db.size(); ++i) pg[i] += db[i];
            }
            break;
        }
        case Op::MatMulTN: {
            // C = A^T * B
            const Tensor& a = pval(0);
            const Tensor& b = pval(1);
            if (wants(0)) {
                Tensor da = lgen::matmul_nt(b, g);  // B * dC^T
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < da.size(); ++i) pg[i] += da[i];
            }
            if (wants(1)) {
                Tensor db = lgen::matmul(a, g);  // A * dC
                Tensor& pg = pgrad(1);
                for (size_t i = 0; i < db.size(); ++i) pg[i] += db[i];
            }
            break;
        }
        case Op::UpsampleRows: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int h = n.iparams[0], w = n.iparams[1], f = n.iparams[2];
                const int out_h = h * f, out_w = w * f;
                const int cols = n.value.dim(1);
                for (int y = 0; y < out_h; ++y) {
                    for (int xx = 0; xx < out_w; ++xx) {
                        const double* grow = g.data() + (static_cast<size_t>(y) * out_w + xx) * cols;
                        double* prow = pg.data() + (static_cast<size_t>(y / f) * w + xx / f) * cols;
                        for (int j = 0; j < cols; ++j) prow[j] += grow[j];
                    }
                }
            }
            break;
        }
        case Op::UpsampleCols: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int h = n.iparams[0], w = n.iparams[1], f = n.iparams[2];
                const int out_h = h * f, out_w = w * f;
                const int m = n.value.dim(0);
                for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * (out_h * out_w);
                    double* prow = pg.data() + static_cast<size_t>(i) * (h * w);
                    for (int y = 0; y < out_h; ++y) {
                        for (int xx = 0; xx < out_w; ++xx) {
                            prow[static_cast<size_t>(y / f) * w + xx / f] += grow[static_cast<size_t>(y) * out_w + xx];
                        }
                    }
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (wants(0)) {
                const Tensor& y = n.value;
                const int m = y.dim(0), cols = y.dim(1);
                Tensor& pg = pgrad(0);
                for (int i = 0; i < m; ++i) {
                    const double* yrow = y.data() + static_cast<size_t>(i) * cols;
                    const double* grow = g.data() + static_cast<size_t>(i) * cols;
                    double dot = 0.0;
                    for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
                    double* prow = pg.data() + static_cast<size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j) prow[j] += yrow[j] * (grow[j] - dot);
                }
            }
            break;
        }
        case Op::Column: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int j = n.iparams[0];
                const int m = n.value.dim(0);
                for (int i = 0; i < m; ++i) pg.at(i, j) += g[static_cast<size_t>(i)];
            }
            break;
        }
        case Op::SumAll: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const double gv = g[0];
                for (size_t i = 0; i < pg.size(); ++i) pg[i] += gv;
            }
            break;
        }
        case Op::MinAll:
        case Op::MaxAll: {
            if (wants(0)) pgrad(0)[static_cast<size_t>(n.iparams[0])] += g[0];
            break;
        }
        case Op::DivScalar: {
            const double av = pval(0)[0], bv = pval(1)[0];
            if (wants(0)) pgrad(0)[0] += g[0] / bv;
            if (wants(1)) pgrad(1)[0] += -g[0] * av / (bv * bv);
            break;
        }
        case Op::MinOf: {
            const int arg = n.iparams[0];
            if (wants(arg)) pgrad(arg)[0] += g[0];
            break;
        }
        case Op::Lincomb: {
            for (size_t k = 0; k < n.parents.size(); ++k) {
                if (!wants(static_cast<int>(k))) continue;
                Tensor& pg = pgrad(static_cast<int>(k));
                const double c = n.dparams[k];
                for (size_t i = 0; i < g.size(); ++i) pg[i] += c * g[i];
            }
            break;
        }
        case Op::Reshape: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            break;
        }
        case Op::ChwToSeq: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int c = n.iparams[0], h = n.iparams[1], w = n.iparams[2];
                for (int ch = 0; ch < c; ++ch) {
                    for (int p = 0; p < h * w; ++p) pg[static_cast<size_t>(ch) * h * w + p] += g.at(p, ch);
                }
            }
            break;
        }
        case Op::SeqToChw: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int c = n.iparams[0], h = n.iparams[1], w = n.iparams[2];
                for (int ch = 0; ch < c; ++ch) {
                    for (int p = 0; p < h * w; ++p) pg.at(p, ch) += g[static_cast<size_t>(ch) * h * w + p];
                }
            }
            break;
        }
        case Op::Conv2d: {
            const Tensor& x = pval(0);
            const Tensor& w = pval(1);
            const Tensor& b = pval(2);
            const int stride = n.iparams[0], pad = n.iparams[1];
            ConvDims d = conv_dims(x, w, b, stride, pad);
            const size_t in_plane = static_cast<size_t>(d.hin) * d.win;
            const size_t out_plane = static_cast<size_t>(d.hout) * d.wout;
            if (wants(2)) {
                Tensor& pg = pgrad(2);
                for (int co = 0; co < d.cout; ++co) {
                    double s = 0.0;
                    const double* gplane = g.data() + co * out_plane;
                    for (size_t i = 0; i < out_plane; ++i) s += gplane[i];
                    pg[static_cast<size_t>(co)] += s;
                }
            }
            if (wants(1)) {
                Tensor& pg = pgrad(1);
                for (int co = 0; co < d.cout; ++co) {
                    const double* gplane = g.data() + co * out_plane;
                    for (int ci = 0; ci < d.cin; ++ci) {
                        const double* iplane = x.data() + ci * in_plane;
                        for (int ky = 0; ky < d.kh; ++ky) {
                            for (int kx = 0; kx < d.kw; ++kx) {
                                double s = 0.0;
                                for (int oy = 0; oy < d.hout; ++oy) {
                                    const int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= d.hin) continue;
                                    const double* irow = iplane + static_cast<size_t>(iy) * d.win;
                                    const double* grow = gplane + static_cast<size_t>(oy) * d.wout;
                                    for (int ox = 0; ox < d.wout; ++ox) {
                                        const int ixx = ox * stride + kx - pad;
                                        if (ixx < 0 || ixx >= d.win) continue;
                                        s += grow[ox] * irow[ixx];
                                    }
                                }
                                pg[((static_cast<size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx] += s;
                            }
                        }
                    }
                }
            }
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                for (int co = 0; co < d.cout; ++co) {
                    const double* gplane = g.data() + co * out_plane;
                    for (int ci = 0; ci < d.cin; ++ci) {
                        double* pplane = pg.data() + ci * in_plane;
                        for (int ky = 0; ky < d.kh; ++ky) {
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const double wval =
                                    w[((static_cast<size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
                                for (int oy = 0; oy < d.hout; ++oy) {
                                    const int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= d.hin) continue;
                                    double* prow = pplane + static_cast<size_t>(iy) * d.win;
                                    const double* grow = gplane + static_cast<size_t>(oy) * d.wout;
                                    for (int ox = 0; ox < d.wout; ++ox) {
                                        const int ixx = ox * stride + kx - pad;
                                        if (ixx < 0 || ixx >= d.win) continue;
                                        prow[ixx] += wval * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            break;
        }
        case Op::Upsample2x: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int c = pg.dim(0), h = pg.dim(1), w = pg.dim(2);
                for (int ch = 0; ch < c; ++ch) {
                    for (int y = 0; y < 2 * h; ++y) {
                        const double* grow = g.data() + (static_cast<size_t>(ch) * 2 * h + y) * 2 * w;
                        double* prow = pg.data() + (static_cast<size_t>(ch) * h + y / 2) * w;
                        for (int xx = 0; xx < 2 * w; ++xx) prow[xx / 2] += grow[xx];
                    }
                }
            }
            break;
        }
        case Op::GroupNorm: {
            const Tensor& x = pval(0);
            const Tensor& gamma = pval(1);
            const int groups = n.iparams[0];
            const int c = x.dim(0);
            const int cs = c / groups;
            const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
            const size_t gsize = cs * plane;
            for (int grp = 0; grp < groups; ++grp) {
                const double mean = n.dparams[1 + 2 * static_cast<size_t>(grp)];
                const double inv = n.dparams[2 + 2 * static_cast<size_t>(grp)];
                // dgamma / dbeta
                if (wants(1) || wants(2)) {
                    for (int cc = 0; cc < cs; ++cc) {
                        const int ch = grp * cs + cc;
                        const double* xrow = x.data() + ch * plane;
                        const double* grow = g.data() + ch * plane;
                        double dg = 0.0, db = 0.0;
                        for (size_t i = 0; i < plane; ++i) {
                            dg += grow[i] * (xrow[i] - mean) * inv;
                            db += grow[i];
                        }
                        if (wants(1)) pgrad(1)[static_cast<size_t>(ch)] += dg;
                        if (wants(2)) pgrad(2)[static_cast<size_t>(ch)] += db;
                    }
                }
                if (wants(0)) {
                    // dx = inv * (dyh - mean(dyh) - xhat * mean(dyh*xhat)),
                    // dyh = dy * gamma, means over the group
                    double sum_dyh = 0.0, sum_dyh_xhat = 0.0;
                    for (int cc = 0; cc < cs; ++cc) {
                        const int ch = grp * cs + cc;
                        const double gm = gamma[static_cast<size_t>(ch)];
                        const double* xrow = x.data() + ch * plane;
                        const double* grow = g.data() + ch * plane;
                        for (size_t i = 0; i < plane; ++i) {
                            const double dyh = grow[i] * gm;
                            sum_dyh += dyh;
                            sum_dyh_xhat += dyh * (xrow[i] - mean) * inv;
                        }
                    }
                    const double m1 = sum_dyh / static_cast<double>(gsize);
                    const double m2 = sum_dyh_xhat / static_cast<double>(gsize);
                    Tensor& pg = pgrad(0);
                    for (int cc = 0; cc < cs; ++cc) {
                        const int ch = grp * cs + cc;
                        const double gm = gamma[static_cast<size_t>(ch)];
                        const double* xrow = x.data() + ch * plane;
                        const double* grow = g.data() + ch * plane;
                        double* prow = pg.data() + ch * plane;
                        for (size_t i = 0; i < plane; ++i) {
                            const double xhat = (xrow[i] - mean) * inv;
                            prow[i] += inv * (grow[i] * gm - m1 - xhat * m2);
                        }
                    }
                }
            }
            break;
        }
        case Op::Embed: {
            if (wants(0)) {
                Tensor& pg = pgrad(0);
                const int dim = n.value.dim(1);
                for (size_t i = 0; i < n.iparams.size(); ++i) {
                    const int id = n.iparams[i];
                    for (int j = 0; j < dim; ++j) pg.at(id, j) += g.at(static_cast<int>(i), j);
                }
            }
            break;
        }
    }
}

Gradient Tape::grad(Var loss, Var wrt) {
    check(wrt, "grad");
    backward(loss);
    const Node& n = nodes_[static_cast<size_t>(wrt.id)];
    Tensor gv = n.grad_live ? n.grad : Tensor(n.value.shape());
    if (!gv.all_finite()) throw nonfinite_error("grad: non-finite gradient");
    return Gradient{wrt, std::move(gv)};
}

std::vector<Gradient> Tape::gradients(Var loss, std::span<const Var> wrts) {
    backward(loss);
    std::vector<Gradient> out;
    out.reserve(wrts.size());
    for (Var v : wrts) {
        check(v, "gradients");
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        Tensor gv = n.grad_live ? n.grad : Tensor(n.value.shape());
        if (!gv.all_finite()) throw nonfinite_error("gradients: non-finite gradient");
        out.push_back(Gradient{v, std::move(gv)});
    }
    return out;
}

}  // namespace lgen
