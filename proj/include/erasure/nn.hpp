#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "erasure/rng.hpp"
#include "erasure/tensor.hpp"

namespace erasure {

/// Plain serialized tensor value.
struct Blob {
    Shape shape;
    std::vector<double> data;

    bool operator==(const Blob&) const = default;
};

using StateDict = std::map<std::string, Blob>;

/// SHA-256 over names, shapes and raw IEEE-754 bytes, in key order.
std::string state_dict_hash(const StateDict& state);
StateDict with_prefix(const StateDict& state, std::string_view prefix);
/// Entries whose key starts with `prefix`, with the prefix removed.
StateDict strip_prefix(const StateDict& state, std::string_view prefix);

/// Ordered, named collection of trainable leaves.
class ParameterSet {
public:
    Tensor add(std::string name, Tensor tensor);
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::vector<Tensor> tensors() const;
    std::size_t count() const;

    StateDict state() const;
    /// Copies values in place; every entry must be present with a matching shape.
    void load(const StateDict& state);
    void set_requires_grad(bool flag);
    void zero_grad();

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng);

/// y = x W + b on rank-2 input [M, in].
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           double init_std);
    Tensor forward(const Tensor& x) const;
    Tensor weight() const { return weight_; }

private:
    Tensor weight_;
    Tensor bias_;
};

/// Row-wise layer normalization with learned affine.
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParameterSet& params, const std::string& name, std::size_t width, double eps = 1e-5);
    Tensor forward(const Tensor& x) const;

private:
    Tensor gain_;
    Tensor shift_;
    double eps_ = 1e-5;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
           Rng& rng, double init_std);
    Tensor forward(const Tensor& x) const;

private:
    Tensor weight_;
    Tensor bias_;
};

struct AdamSettings {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction. Consumes and clears the gradients of its parameters.
class Adam {
public:
    Adam() = default;
    explicit Adam(std::vector<std::pair<std::string, Tensor>> params);

    void step(const AdamSettings& settings);
    void zero_grad();
    std::uint64_t steps_taken() const { return steps_; }

    StateDict state() const;
    void load_state(const StateDict& state);

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::uint64_t steps_ = 0;
};

}  // namespace erasure
