#include "erasure/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "erasure/errors.hpp"

namespace erasure {

namespace {
thread_local bool g_grad_enabled = true;

void require(bool condition, const std::string& message) {
    if (!condition) throw ContractError(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
}

void accumulate(detail::Node& parent, std::span<const double> contribution) {
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}
}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = erasure::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (erasure::numel(shape) != values.size())
        throw ContractError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                            shape_string(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ContractError("axis out of range");
    return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
    if (!node_->parents.empty()) throw ContractError("mutable_data on a non-leaf tensor");
    return node_->value;
}

std::span<const double> Tensor::grad() const { return node_->grad; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw ContractError("at(): rank mismatch");
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw ContractError("at(): index out of range");
        offset = offset * s[axis] + i;
        ++axis;
    }
    return node_->value[offset];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_->parents.empty()) throw ContractError("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = flag;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad && node_->parents.empty();
    return t;
}

void Tensor::backward() const {
    if (numel() != 1) throw ContractError("backward() requires a scalar");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS over nodes that take part in differentiation.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (auto& p : parents) node->parents.push_back(p.node());
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.data();
    auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [pa = a.node(), pb = b.node()](detail::Node& self) {
        accumulate(*pa, self.grad);
        accumulate(*pb, self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.data();
    auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [pa = a.node(), pb = b.node()](detail::Node& self) {
        accumulate(*pa, self.grad);
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.data();
    auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [pa = a.node(), pb = b.node()](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node(), s](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto x = a.data();
    auto y = b.data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double v = x[i * k + p];
            const double* brow = y.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += v * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), {a, b}, [pa = a.node(), pb = b.node(), m, k, n](detail::Node& self) {
        const auto& dy = self.grad;
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = pb->value.data() + p * n;
                    const double* drow = dy.data() + i * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
                    g[i * k + p] += acc;
                }
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                const double* drow = dy.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double v = pa->value[i * k + p];
                    double* grow = g.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) grow[j] += v * drow[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [pa = a.node(), m, n](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

Tensor add_row_vector(const Tensor& a, const Tensor& v) {
    require(a.rank() == 2 && v.numel() == a.dim(1), "add_row_vector: shape mismatch");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.data();
    auto b = v.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    return make_result(a.shape(), std::move(out), {a, v}, [pa = a.node(), pv = v.node(), m, n](detail::Node& self) {
        accumulate(*pa, self.grad);
        if (pv->requires_grad) {
            auto& g = pv->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
    });
}

Tensor mul_row_vector(const Tensor& a, const Tensor& v) {
    require(a.rank() == 2 && v.numel() == a.dim(1), "mul_row_vector: shape mismatch");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.data();
    auto s = v.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * s[j];
    return make_result(a.shape(), std::move(out), {a, v}, [pa = a.node(), pv = v.node(), m, n](detail::Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * pv->value[j];
        }
        if (pv->requires_grad) {
            auto& g = pv->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * pa->value[i * n + j];
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(numel(shape) == a.numel(), "reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a},
                       [pa = a.node()](detail::Node& self) { accumulate(*pa, self.grad); });
}

Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end) {
    require(a.rank() >= 1 && begin <= end && end <= a.dim(0), "slice0: range out of bounds");
    const std::size_t stride = a.numel() / a.dim(0);
    Shape shape = a.shape();
    shape[0] = end - begin;
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
    return make_result(std::move(shape), std::move(out), {a},
                       [pa = a.node(), offset = begin * stride](detail::Node& self) {
                           auto& g = pa->grad_buffer();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
                       });
}

Tensor concat0(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat0: no inputs");
    Shape shape = parts.front().shape();
    Shape tail(shape.begin() + 1, shape.end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        require(Shape(p.shape().begin() + 1, p.shape().end()) == tail, "concat0: trailing shape mismatch");
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    shape[0] = rows;
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_result(std::move(shape), std::move(out), parts, [nodes](detail::Node& self) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
            if (n->requires_grad) {
                auto& g = n->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
            }
            offset += n->value.size();
        }
    });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require(a.rank() == 2 && begin <= end && end <= a.dim(1), "slice_cols: range out of bounds");
    const std::size_t m = a.dim(0), n = a.dim(1), w = end - begin;
    auto x = a.data();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
    return make_result({m, w}, std::move(out), {a}, [pa = a.node(), m, n, w, begin](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t m = parts.front().dim(0);
    std::size_t n = 0;
    for (const auto& p : parts) {
        require(p.rank() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
        n += p.dim(1);
    }
    std::vector<double> out(m * n);
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + col + j] = p.data()[i * w + j];
        col += w;
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_result({m, n}, std::move(out), parts, [nodes, m, n](detail::Node& self) {
        std::size_t c = 0;
        for (const auto& node : nodes) {
            const std::size_t w = node->shape[1];
            if (node->requires_grad) {
                auto& g = node->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + c + j];
            }
            c += w;
        }
    });
}

Tensor softmax_rows(const Tensor& a) {
    require(a.rank() == 2, "softmax_rows: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto x = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        const double hi = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += out[i * n + j] = std::exp(row[j] - hi);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
    }
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node(), m, n](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = self.value.data() + i * n;
            const double* dy = self.grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
        }
    });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
    require(a.rank() == 2, "layer_norm_rows: rank-2 tensor required");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> inv_std(m);
    auto x = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mean) * inv_std[i];
    }
    return make_result(a.shape(), std::move(out), {a},
                       [pa = a.node(), m, n, inv_std = std::move(inv_std)](detail::Node& self) {
                           auto& g = pa->grad_buffer();
                           const double inv_n = 1.0 / static_cast<double>(n);
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* y = self.value.data() + i * n;
                               const double* dy = self.grad.data() + i * n;
                               double mean_dy = 0.0, mean_dy_y = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   mean_dy += dy[j];
                                   mean_dy_y += dy[j] * y[j];
                               }
                               mean_dy *= inv_n;
                               mean_dy_y *= inv_n;
                               for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += inv_std[i] * (dy[j] - mean_dy - y[j] * mean_dy_y);
                           }
                       });
}

Tensor silu(const Tensor& a) {
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node()](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = pa->value[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
    return make_result(a.shape(), std::move(out), {a}, [pa = a.node()](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = pa->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

namespace {
struct ConvGeometry {
    std::size_t batch, cin, height, width, cout, kernel;
    std::size_t pixels() const { return height * width; }
    std::size_t rows() const { return cin * kernel * kernel; }
};

// cols[r, p] with r = (ci, ky, kx) and p = (y, x); zero padded.
void im2col(const ConvGeometry& g, const double* image, double* cols) {
    const auto pad = static_cast<std::ptrdiff_t>(g.kernel / 2);
    const auto h = static_cast<std::ptrdiff_t>(g.height);
    const auto w = static_cast<std::ptrdiff_t>(g.width);
    std::size_t r = 0;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* plane = image + ci * g.pixels();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++r) {
                double* dst = cols + r * g.pixels();
                const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    const auto sy = y + dy;
                    for (std::ptrdiff_t x = 0; x < w; ++x) {
                        const auto sx = x + dx;
                        dst[y * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? plane[sy * w + sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* image) {
    const auto pad = static_cast<std::ptrdiff_t>(g.kernel / 2);
    const auto h = static_cast<std::ptrdiff_t>(g.height);
    const auto w = static_cast<std::ptrdiff_t>(g.width);
    std::size_t r = 0;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        double* plane = image + ci * g.pixels();
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++r) {
                const double* src = cols + r * g.pixels();
                const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    const auto sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    for (std::ptrdiff_t x = 0; x < w; ++x) {
                        const auto sx = x + dx;
                        if (sx >= 0 && sx < w) plane[sy * w + sx] += src[y * w + x];
                    }
                }
            }
        }
    }
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3) && w.dim(2) % 2 == 1 &&
                b.numel() == w.dim(0),
            "conv2d: incompatible shapes " + shape_string(x.shape()) + " * " + shape_string(w.shape()));
    const ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2)};
    const std::size_t rows = g.rows(), pixels = g.pixels();
    auto cols = std::make_shared<std::vector<double>>(g.batch * rows * pixels);
    std::vector<double> out(g.batch * g.cout * pixels);
    auto weights = w.data();
    auto bias = b.data();
    for (std::size_t n = 0; n < g.batch; ++n) {
        double* c = cols->data() + n * rows * pixels;
        im2col(g, x.data().data() + n * g.cin * pixels, c);
        double* o = out.data() + n * g.cout * pixels;
        for (std::size_t co = 0; co < g.cout; ++co) {
            double* orow = o + co * pixels;
            std::fill(orow, orow + pixels, bias[co]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double wv = weights[co * rows + r];
                const double* crow = c + r * pixels;
                for (std::size_t p = 0; p < pixels; ++p) orow[p] += wv * crow[p];
            }
        }
    }
    return make_result(
        {g.batch, g.cout, g.height, g.width}, std::move(out), {x, w, b},
        [px = x.node(), pw = w.node(), pb = b.node(), g, cols](detail::Node& self) {
            const std::size_t rows = g.rows(), pixels = g.pixels();
            std::vector<double> dcols(rows * pixels);
            for (std::size_t n = 0; n < g.batch; ++n) {
                const double* dout = self.grad.data() + n * g.cout * pixels;
                const double* c = cols->data() + n * rows * pixels;
                if (pb->requires_grad) {
                    auto& gb = pb->grad_buffer();
                    for (std::size_t co = 0; co < g.cout; ++co)
                        for (std::size_t p = 0; p < pixels; ++p) gb[co] += dout[co * pixels + p];
                }
                if (pw->requires_grad) {
                    auto& gw = pw->grad_buffer();
                    for (std::size_t co = 0; co < g.cout; ++co) {
                        const double* drow = dout + co * pixels;
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* crow = c + r * pixels;
                            double acc = 0.0;
                            for (std::size_t p = 0; p < pixels; ++p) acc += drow[p] * crow[p];
                            gw[co * rows + r] += acc;
                        }
                    }
                }
                if (px->requires_grad) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    for (std::size_t co = 0; co < g.cout; ++co) {
                        const double* drow = dout + co * pixels;
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double wv = pw->value[co * rows + r];
                            double* dst = dcols.data() + r * pixels;
                            for (std::size_t p = 0; p < pixels; ++p) dst[p] += wv * drow[p];
                        }
                    }
                    col2im_add(g, dcols.data(), px->grad_buffer().data() + n * g.cin * pixels);
                }
            }
        });
}

Tensor channel_film(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    require(x.rank() == 4 && scale.rank() == 2 && shift.shape() == scale.shape() && scale.dim(0) == x.dim(0) &&
                scale.dim(1) == x.dim(1),
            "channel_film: shape mismatch");
    const std::size_t planes = x.dim(0) * x.dim(1), pixels = x.dim(2) * x.dim(3);
    auto v = x.data();
    auto s = scale.data();
    auto h = shift.data();
    std::vector<double> out(v.size());
    for (std::size_t q = 0; q < planes; ++q)
        for (std::size_t p = 0; p < pixels; ++p) out[q * pixels + p] = v[q * pixels + p] * (1.0 + s[q]) + h[q];
    return make_result(x.shape(), std::move(out), {x, scale, shift},
                       [px = x.node(), ps = scale.node(), ph = shift.node(), planes, pixels](detail::Node& self) {
                           for (std::size_t q = 0; q < planes; ++q) {
                               const double* dy = self.grad.data() + q * pixels;
                               if (px->requires_grad) {
                                   auto& g = px->grad_buffer();
                                   const double f = 1.0 + ps->value[q];
                                   for (std::size_t p = 0; p < pixels; ++p) g[q * pixels + p] += dy[p] * f;
                               }
                               if (ps->requires_grad) {
                                   double acc = 0.0;
                                   for (std::size_t p = 0; p < pixels; ++p) acc += dy[p] * px->value[q * pixels + p];
                                   ps->grad_buffer()[q] += acc;
                               }
                               if (ph->requires_grad) {
                                   double acc = 0.0;
                                   for (std::size_t p = 0; p < pixels; ++p) acc += dy[p];
                                   ph->grad_buffer()[q] += acc;
                               }
                           }
                       });
}

Tensor sum_squares(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v * v;
    return make_result({1}, {total}, {a}, [pa = a.node()](detail::Node& self) {
        auto& g = pa->grad_buffer();
        const double seed = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * pa->value[i] * seed;
    });
}

Tensor spatial_mean(const Tensor& x) {
    require(x.rank() == 4, "spatial_mean: expects [B,C,H,W]");
    const std::size_t planes = x.dim(0) * x.dim(1), pixels = x.dim(2) * x.dim(3);
    const auto v = x.data();
    std::vector<double> out(planes);
    for (std::size_t q = 0; q < planes; ++q) {
        double acc = 0.0;
        for (std::size_t p = 0; p < pixels; ++p) acc += v[q * pixels + p];
        out[q] = acc / static_cast<double>(pixels);
    }
    return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [px = x.node(), planes, pixels](detail::Node& self) {
        auto& g = px->grad_buffer();
        const double inv = 1.0 / static_cast<double>(pixels);
        for (std::size_t q = 0; q < planes; ++q)
            for (std::size_t p = 0; p < pixels; ++p) g[q * pixels + p] += self.grad[q] * inv;
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return make_result({1}, {total}, {a}, [pa = a.node()](detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

}  // namespace ops

std::vector<double> layer_norm_values(std::span<const double> values, std::size_t width, double eps) {
    if (width == 0 || values.size() % width != 0) throw ContractError("layer_norm_values: width does not divide size");
    NoGradGuard guard;
    const Tensor t = Tensor::from({values.size() / width, width}, std::vector<double>(values.begin(), values.end()));
    const Tensor n = ops::layer_norm_rows(t, eps);
    return {n.data().begin(), n.data().end()};
}

}  // namespace erasure
