#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op records its parents and a backward closure on the result node when
// gradient recording is enabled and at least one input requires a gradient.
// `Tensor::backward()` on a scalar walks the graph in reverse topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace erasure {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer();
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    /// Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Direct write access. Only valid on leaves; used by optimizers and loaders.
    std::span<double> mutable_data();
    std::span<const double> grad() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    void zero_grad();

    /// Value copy that is cut off from the graph.
    Tensor detach() const;
    /// Deep copy preserving the requires_grad flag (a new leaf).
    Tensor clone() const;

    /// Backpropagates from a scalar (numel == 1) with seed gradient 1.
    void backward() const;

    // Internal plumbing for ops.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Builds an op result. `backward` receives the result node (with its grad filled)
/// and must accumulate into parents that require gradients.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward);

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [M,N] -> [N,M]
Tensor transpose(const Tensor& a);
/// [M,N] + [N] broadcast over rows.
Tensor add_row_vector(const Tensor& a, const Tensor& v);
/// [M,N] * [N] broadcast over rows.
Tensor mul_row_vector(const Tensor& a, const Tensor& v);
Tensor reshape(const Tensor& a, Shape shape);

/// Slices / concatenates along the leading axis.
Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat0(const std::vector<Tensor>& parts);
/// Column slice / concatenation for rank-2 tensors.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor softmax_rows(const Tensor& a);
/// Normalizes each row of a rank-2 tensor to zero mean and unit variance (no affine).
Tensor layer_norm_rows(const Tensor& a, double eps);

Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);

/// Same-padded stride-1 convolution. x: [B,Ci,H,W], w: [Co,Ci,K,K], b: [Co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
/// x * (1 + scale) + shift with scale/shift of shape [B,C] broadcast over H,W.
Tensor channel_film(const Tensor& x, const Tensor& scale, const Tensor& shift);

/// Mean over H, W: [B,C,H,W] -> [B,C].
Tensor spatial_mean(const Tensor& x);

Tensor sum_squares(const Tensor& a);
Tensor sum(const Tensor& a);

}  // namespace ops

/// Per-token layer normalization of an [L,d] (or [..., d]) value without grad tracking.
std::vector<double> layer_norm_values(std::span<const double> values, std::size_t width, double eps);

}  // namespace erasure
