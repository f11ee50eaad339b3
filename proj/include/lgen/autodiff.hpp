#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "lgen/tensor.hpp"

namespace lgen {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid only for the owning tape.
struct Var {
    int id = -1;
    const Tape* owner = nullptr;
    bool valid() const { return id >= 0 && owner != nullptr; }
};

// Gradient of a scalar loss with respect to one recorded tensor.
struct Gradient {
    Var with_respect_to;
    Tensor value;
};

struct unknown_variable_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct nonfinite_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dynamically recorded computation graph with reverse-mode differentiation.
// Nodes are appended in evaluation order (already topologically sorted);
// backward walks them in reverse. All kernels are single-threaded and
// accumulate in a fixed order, so results are bit-reproducible.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. Inputs participate in differentiation; constants do not.
    Var input(Tensor t);
    Var constant(Tensor t);
    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Elementwise (same shape).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var square(Var a);
    Var silu(Var a);
    Var scale(Var a, double c);

    // Broadcasts.
    Var add_row_vec(Var x, Var b);    // x[m,n] + b[n] per row
    Var add_channel(Var x, Var b);    // x[C,H,W] + b[C] per channel
    Var sub_bcast(Var x, Var s);      // x - s, s scalar
    Var div_bcast(Var x, Var s);      // x / s, s scalar (s must be nonzero)

    // Linear algebra.
    Var matmul(Var a, Var b);         // a[m,k] * b[k,n]
    Var matmul_nt(Var a, Var b);      // a[m,k] * b[n,k]^T
    Var matmul_tn(Var a, Var b);      // a[k,m]^T * b[k,n]
    Var softmax_rows(Var x);
    Var column(Var x, int j);         // x[m,n] -> [m,1]
    // Nearest-neighbor upsampling of a y-major grid axis (see tensor.hpp).
    Var upsample_rows(Var x, int src_h, int src_w, int factor);
    Var upsample_cols(Var x, int src_h, int src_w, int factor);

    // Reductions to scalar.
    Var sum_all(Var x);
    Var min_all(Var x);               // subgradient routed to first minimizer
    Var max_all(Var x);
    Var div_scalar(Var a, Var b);     // [1]/[1]
    Var min_of(std::span<const Var> xs);  // elementwise over scalars; ties -> lowest index
    Var lincomb(std::span<const Var> xs, std::span<const double> coeffs);

    // Shape manipulation.
    Var reshape(Var x, std::vector<int> shape);
    Var chw_to_seq(Var x);            // [C,H,W] -> [H*W, C]
    Var seq_to_chw(Var x, int c, int h, int w);

    // Neural-net kernels.
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var upsample2x(Var x);
    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
    Var embed(Var table, const std::vector<int>& token_ids);

    const Tensor& value(Var v) const;
    size_t node_count() const { return nodes_.size(); }

    // Reverse pass from a scalar loss. Gradients of all recorded inputs are
    // available via grad_value afterwards. Nodes the loss does not reach get
    // a zero gradient of the right shape.
    void backward(Var loss);
    Tensor grad_value(Var v) const;

    // One-shot convenience: fresh backward, then the single gradient.
    Gradient grad(Var loss, Var wrt);
    std::vector<Gradient> gradients(Var loss, std::span<const Var> wrts);

private:
    enum class Op {
        Leaf, Add, Sub, Mul, Square, Silu, Scale,
        AddRowVec, AddChannel, SubBcast, DivBcast,
        MatMul, MatMulNT, MatMulTN, SoftmaxRows, Column,
        UpsampleRows, UpsampleCols,
        SumAll, MinAll, MaxAll, DivScalar, MinOf, Lincomb,
        Reshape, ChwToSeq, SeqToChw,
        Conv2d, Upsample2x, GroupNorm, Embed,
    };

    struct Node {
        Op op;
        std::vector<int> parents;
        std::vector<int> iparams;
        std::vector<double> dparams;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_live = false;
    };

    int check(Var v, const char* what) const;
    Var push(Op op, std::vector<int> parents, Tensor value,
             std::vector<int> iparams = {}, std::vector<double> dparams = {});
    Tensor& grad_buffer(int id);
    void backward_node(int id);

    std::vector<Node> nodes_;
};

}  // namespace lgen
