#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace top {

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;  // accumulates this node's grad into its parents
};

}  // namespace detail

// Dense double-precision tensor with tape-based reverse-mode differentiation.
// A Tensor is a cheap shared handle; ops on grad-requiring tensors record the
// computation graph that backward() later replays in reverse topological
// order, visiting each node exactly once. Graphs are single-threaded; tensors
// with no pending backward pass may move freely between threads.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<double> data, std::vector<int> shape, bool requires_grad = false);

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const;
    int size() const;
    bool requires_grad() const;

    const std::vector<double>& data() const;
    std::vector<double>& data();  // mutate leaf values before graph construction only
    const std::vector<double>& grad() const;

    // Value of a size-1 tensor.
    double item() const;

    void zero_grad();

    // Index of the largest element; ties break toward the lowest index.
    int argmax() const;

    // Identity comparison of handles (same underlying node).
    bool same_node(const Tensor& other) const { return n_ == other.n_; }

    friend void backward(const Tensor& loss);
    friend class OpHelper;

private:
    std::shared_ptr<detail::Node> n_;
};

// Populates grad buffers of every grad-requiring ancestor of `loss` with
// d(loss)/d(tensor). Leaf gradients accumulate across repeated calls;
// op-result gradients are scratch and reflect the latest pass. `loss` must
// be a scalar, grad-requiring tensor.
void backward(const Tensor& loss);

// Elementwise ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor reshape(const Tensor& x, std::vector<int> shape);
// To a [1, n] row vector.
Tensor flatten(const Tensor& x);

// a: [r, k], b: [k, c] -> [r, c].
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [C_in, H, W], w: [C_out, C_in, k, k], zero padding. k must be odd.
// Differentiable w.r.t. both x and w.
Tensor conv2d(const Tensor& x, const Tensor& w, int padding);

// x: [C, H, W], w: [C, k, k]: each channel convolved with its own kernel
// (used by adversarial filters). Same conventions as conv2d.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, int padding);

// x: [C, H, W] -> [C, H/2, W/2], stride-2 window max; ties keep the first
// element in row-major scan order.
Tensor maxpool2x2(const Tensor& x);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

// Probability simplex over the flattened input (max-subtracted for stability).
Tensor softmax(const Tensor& logits);

// -log(softmax(logits)[target]), stable under large logits.
Tensor softmax_cross_entropy(const Tensor& logits, int target);

std::string shape_string(const std::vector<int>& shape);

}  // namespace top
