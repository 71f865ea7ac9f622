#pragma once

#include "tsfuse/common.hpp"

#include <array>
#include <vector>

namespace tsfuse::diff {

/// Handle to a node on a Tape. Cheap to copy; only meaningful together with
/// the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Adjoints produced by Tape::backward, indexed by node id.
class Gradients {
public:
    explicit Gradients(std::vector<Matrix> adjoints) : adjoints_(std::move(adjoints)) {}

    const Matrix& at(Var v) const {
        if (v.id < 0 || v.id >= static_cast<int>(adjoints_.size()))
            throw ValidationError("Gradients::at: unknown var id");
        return adjoints_[static_cast<std::size_t>(v.id)];
    }

private:
    std::vector<Matrix> adjoints_;
};

/// Reverse-mode computation tape over dense double matrices. Values are
/// immutable once recorded; nodes are appended in topological order and
/// backward() replays them in exact reverse creation order. One tape per
/// training step; not thread-safe for concurrent appends.
class Tape {
public:
    /// Differentiable leaf (parameter or input).
    Var input(Matrix value);
    /// Non-differentiable leaf (targets, dropout masks). Adjoints are still
    /// accumulated but carry no meaning for constants.
    Var constant(Matrix value);

    const Matrix& value(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    // -- arithmetic -------------------------------------------------------
    /// Matrix product a(m x k) * b(k x n).
    Var matmul(Var a, Var b);
    /// Elementwise; shapes must be equal or one side 1x1 (scalar broadcast).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    /// Multiply by a compile-time constant.
    Var scale(Var a, double c);
    /// x .* a + b with all three the same shape.
    Var scale_shift(Var x, Var a, Var b);

    // -- activations ------------------------------------------------------
    Var tanh(Var a);
    Var sin(Var a);
    Var relu(Var a);
    Var leaky_relu(Var a, double slope);

    // -- reductions and shape ops ----------------------------------------
    /// Sum of all entries, 1x1 result.
    Var sum(Var a);
    /// Column means of a (r x c) matrix as a (c x 1) vector; the model's
    /// global average pooling over node rows.
    Var mean_rows(Var a);
    Var transpose(Var a);
    /// Stack column vectors vertically.
    Var vconcat(const std::vector<Var>& parts);

    // -- broadcast helpers ------------------------------------------------
    /// m (r x c) plus a (1 x c) row added to every row.
    Var add_rowwise(Var m, Var row);
    /// Row i of m scaled by s(i); s is (r x 1).
    Var scale_rows(Var m, Var s);
    /// out(i, j) = f(i) + g(j) for column vectors f, g of equal length.
    Var outer_sum(Var f, Var g);

    // -- model-specific ops ------------------------------------------------
    /// Row-wise softmax restricted to positions where mask > 0; zero
    /// elsewhere, stabilized by subtracting the row max over unmasked
    /// entries. Every mask row must have at least one positive entry.
    Var softmax_masked(Var scores, const Matrix& mask);
    /// Cross-correlation (no kernel flip) of a length-L signal with F
    /// width-5 kernels and SAME zero padding:
    ///   out(t, f) = bias(f) + sum_j kernels(j, f) * x(t + j - 2).
    Var conv1d_same(Var x, Var kernels, Var bias);
    /// Per-row layer normalization with learned gain/bias (1 x c each).
    Var layer_norm_rows(Var m, Var gain, Var bias, double eps = 1e-5);

    /// Reverse pass from a scalar (1x1) loss. Repeated use of a node sums
    /// its adjoints.
    Gradients backward(Var loss) const;

private:
    enum class Op {
        Input,
        Constant,
        MatMul,
        Add,
        Sub,
        Mul,
        Scale,
        ScaleShift,
        Tanh,
        Sin,
        Relu,
        LeakyRelu,
        Sum,
        MeanRows,
        Transpose,
        VConcat,
        AddRowwise,
        ScaleRows,
        OuterSum,
        SoftmaxMasked,
        Conv1dSame,
        LayerNormRows,
    };

    struct Node {
        Op op;
        std::array<int, 3> in{-1, -1, -1};
        std::vector<int> extra_in;  // VConcat only
        Matrix value;
        double c = 0.0;   // scale constant / leaky slope / layer-norm eps
        Matrix saved;     // op-specific (mask, normalized rows, ...)
        Matrix saved2;    // op-specific (inverse std per row, ...)
    };

    Var push(Node node);
    const Node& node(Var v) const;
    static std::string shape_str(const Matrix& m);
    void check_same_or_scalar(const char* op, const Matrix& a, const Matrix& b) const;

    std::vector<Node> nodes_;
};

}  // namespace tsfuse::diff
