#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace lgen {

// Dense row-major tensor of doubles. Shapes are immutable after
// construction; all math helpers return fresh tensors.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);
    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);
    static Tensor scalar(double value) { return full({1}, value); }
    static Tensor identity(int n);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // 2D accessors (row-major).
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    double sum() const;       // left-to-right accumulation
    double min_value() const;
    double max_value() const;

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Elementwise and linear-algebra helpers. All are pure and deterministic;
// reductions accumulate left-to-right in memory order.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scaled(const Tensor& a, const Tensor& b, double c);  // a + c*b

// Standard matrix product a[m,k] * b[k,n]. Inner sums run k = 0..K-1.
Tensor matmul(const Tensor& a, const Tensor& b);
// a[m,k] * b[n,k]^T and a[k,m]^T * b[k,n]; used by attention and backward passes.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// Row-wise softmax with row-max subtraction; rows sum to 1 for finite input.
Tensor softmax_rows(const Tensor& x);

// Nearest-neighbor upsampling of one axis of a y-major flattened grid by an
// integer factor: rows maps [h*w, n] -> [(f*h)*(f*w), n], cols maps
// [m, h*w] -> [m, (f*h)*(f*w)]. Each fine cell copies its coarse cell.
Tensor upsample_rows(const Tensor& x, int src_h, int src_w, int factor);
Tensor upsample_cols(const Tensor& x, int src_h, int src_w, int factor);

void throw_if_shape_mismatch(const Tensor& a, const Tensor& b, const char* op);

}  // namespace lgen
