#include "lgen/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lgen {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + std::to_string(d));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
}

Tensor Tensor::identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::min_value() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : data_) {
        if (v < m) m = v;
    }
    return m;
}

double Tensor::max_value() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : data_) {
        if (v > m) m = v;
    }
    return m;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void throw_if_shape_mismatch(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    throw_if_shape_mismatch(a, b, "add");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    throw_if_shape_mismatch(a, b, "sub");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    throw_if_shape_mismatch(a, b, "mul");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
    return out;
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double c) {
    throw_if_shape_mismatch(a, b, "add_scaled");
    Tensor out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + c * b[i];
    return out;
}

namespace {

void require_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected 2D tensor, got " + t.shape_str());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw std::invalid_argument("matmul: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    // i-k-j order: for each output element the sum still runs k = 0..K-1,
    // identical to the naive triple loop, but the inner loop is contiguous.
    for (int i = 0; i < m; ++i) {
        double* orow = po + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = pa[static_cast<size_t>(i) * k + kk];
            const double* brow = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1)) {
        throw std::invalid_argument("matmul_nt: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const double* brow = b.data() + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            out.at(i, j) = s;
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_tn");
    require_2d(b, "matmul_tn");
    const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
    if (k != b.dim(0)) {
        throw std::invalid_argument("matmul_tn: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out({m, n});
    double* po = out.data();
    for (int kk = 0; kk < k; ++kk) {
        const double* arow = a.data() + static_cast<size_t>(kk) * m;
        const double* brow = b.data() + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* orow = po + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    require_2d(x, "softmax_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* row = x.data() + static_cast<size_t>(i) * n;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) {
            if (row[j] > mx) mx = row[j];
        }
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= denom;
    }
    return out;
}

namespace {

void require_grid(const Tensor& x, int axis, int src_h, int src_w, int factor, const char* op) {
    if (x.rank() != 2 || src_h <= 0 || src_w <= 0 || factor < 1 || x.dim(axis) != src_h * src_w) {
        throw std::invalid_argument(std::string(op) + ": tensor " + x.shape_str() + " does not carry a " +
                                    std::to_string(src_h) + "x" + std::to_string(src_w) + " grid axis");
    }
}

}  // namespace

Tensor upsample_rows(const Tensor& x, int src_h, int src_w, int factor) {
    require_grid(x, 0, src_h, src_w, factor, "upsample_rows");
    const int n = x.dim(1);
    const int out_h = src_h * factor, out_w = src_w * factor;
    Tensor out({out_h * out_w, n});
    for (int y = 0; y < out_h; ++y) {
        for (int xx = 0; xx < out_w; ++xx) {
            const double* src = x.data() + (static_cast<size_t>(y / factor) * src_w + xx / factor) * n;
            double* dst = out.data() + (static_cast<size_t>(y) * out_w + xx) * n;
            for (int j = 0; j < n; ++j) dst[j] = src[j];
        }
    }
    return out;
}

Tensor upsample_cols(const Tensor& x, int src_h, int src_w, int factor) {
    require_grid(x, 1, src_h, src_w, factor, "upsample_cols");
    const int m = x.dim(0);
    const int out_h = src_h * factor, out_w = src_w * factor;
    Tensor out({m, out_h * out_w});
    for (int i = 0; i < m; ++i) {
        const double* src = x.data() + static_cast<size_t>(i) * (src_h * src_w);
        double* dst = out.data() + static_cast<size_t>(i) * (out_h * out_w);
        for (int y = 0; y < out_h; ++y) {
            for (int xx = 0; xx < out_w; ++xx) {
                dst[static_cast<size_t>(y) * out_w + xx] = src[static_cast<size_t>(y / factor) * src_w + xx / factor];
            }
        }
    }
    return out;
}

}  // namespace lgen
