#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tscm/errors.hpp"

namespace tscm {

class Tape;

/// One value in the computation graph. Nodes recorded on a tape keep
/// shared ownership of their parents so backward can always reach them;
/// detached nodes are plain immutable values.
struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated during backward, same length as value
    bool requires_grad = false;
    bool needs_grad = false;  // requires_grad, or downstream of a node that does
    Tape* tape = nullptr;
    std::size_t tape_index = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // scatters this->grad into parents

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

/// Handle to a graph node. Copies share the node. A default-constructed
/// Tensor is empty and unusable until assigned.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    /// Detached scalar constant.
    static Tensor scalar(double v);
    /// Detached constant with the given shape and row-major data.
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor zeros(std::vector<std::size_t> shape);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    const std::vector<double>& values() const;
    std::size_t numel() const;
    std::size_t rank() const { return shape().size(); }
    /// Value of a one-element tensor.
    double item() const;
    bool on_tape() const;
    bool requires_grad() const;
    /// Gradient buffer; zeros if backward never reached this node.
    std::vector<double> grad() const;

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

/// Records operations in execution order (every node appears after its
/// parents) and replays them in reverse for backpropagation.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf with requires_grad set.
    Tensor variable(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor variable(const Tensor& value);
    /// Leaf constant; no gradient flows into it.
    Tensor constant(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor constant(const Tensor& value);

    /// Reverse sweep from a scalar loss. Each recorded node is visited
    /// exactly once. A second call without reset() is rejected.
    void backward(const Tensor& loss);
    /// Clears all gradients and re-arms backward.
    void reset();

    std::size_t size() const { return nodes_.size(); }
    bool backward_has_run() const { return backward_done_; }
    /// True if a hinge op evaluated within kink_tolerance of its kink.
    bool hinge_boundary_hit() const { return hinge_boundary_; }
    void note_hinge_boundary() { hinge_boundary_ = true; }
    /// Rolling hash over every relu element's active/inactive state.
    /// Finite-difference checks compare the pattern at x+h and x-h and skip
    /// coordinates whose perturbation flips a hinge.
    std::uint64_t relu_pattern() const { return relu_pattern_; }
    void note_relu_state(bool active) {
        relu_pattern_ = (relu_pattern_ ^ (active ? 0x9e3779b97f4a7c15ULL : 0x2545f4914f6cdd1dULL)) *
                        1099511628211ULL;
    }

    static constexpr double kink_tolerance = 1e-8;

    void record(const std::shared_ptr<TensorNode>& node);

private:
    std::vector<std::shared_ptr<TensorNode>> nodes_;
    bool backward_done_ = false;
    bool hinge_boundary_ = false;
    std::uint64_t relu_pattern_ = 14695981039346656037ULL;
};

// --- elementwise and structural ops -------------------------------------
// Every op computes eagerly. If any input sits on a tape the result is
// recorded there (inputs on two different tapes are an error); if all
// inputs are detached the result is detached and carries no backprop
// closure. Gradients at the relu kink use the subgradient 0.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor relu(const Tensor& a);
/// Elementwise square root; inputs must be non-negative. The derivative at
/// exactly zero uses the subgradient 0 (and flags the tape boundary).
Tensor sqrt_elem(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
/// Unit-normalizes a vector; throws NumericError when the norm is <= 1e-12.
Tensor l2_normalize(const Tensor& x);
/// Row-wise unit normalization of a matrix; rows with norm <= 1e-12 pass
/// through as zeros (NetVLAD intra-normalization convention).
Tensor l2_normalize_rows(const Tensor& x);
/// Concatenation along the last axis; all other extents must agree.
Tensor concat(const Tensor& a, const Tensor& b);
/// Slice [start, start+len) along the last axis.
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t len);
Tensor reduce_sum(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
/// Adds a length-n vector to every row of an m x n matrix.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor transpose(const Tensor& m);
/// Scales row r of an m x n matrix by v[r].
Tensor scale_rows(const Tensor& m, const Tensor& v);
/// Column sums of an m x n matrix -> length-n vector.
Tensor col_sums(const Tensor& m);
/// Cuts gradient flow: the result is a constant with the same value.
Tensor detach(const Tensor& a);

// --- image ops (rank-3 C x H x W) ----------------------------------------

/// 3x3 convolution, stride 1, zero padding 1. weights: [out_c, in_c, 3, 3],
/// bias: [out_c]. Spatial extent is preserved.
Tensor conv2d_3x3(const Tensor& image, const Tensor& weights, const Tensor& bias);
/// Mean-pools a C x H x W map over a grid x grid partition into
/// grid^2 tokens of width C (row-major over patches).
Tensor patch_tokens(const Tensor& image, std::size_t grid);
/// Mean over all spatial positions -> length-C vector.
Tensor global_mean_pool(const Tensor& image);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace tscm
