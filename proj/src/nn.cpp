#include "erasure/nn.hpp"

#include <cmath>
#include <cstring>

#include "erasure/errors.hpp"
#include "erasure/hashing.hpp"

namespace erasure {

std::string state_dict_hash(const StateDict& state) {
    std::string bytes;
    for (const auto& [name, blob] : state) {
        bytes += name;
        bytes.push_back('\0');
        bytes += shape_string(blob.shape);
        bytes.push_back('\0');
        const auto* raw = reinterpret_cast<const char*>(blob.data.data());
        bytes.append(raw, blob.data.size() * sizeof(double));
    }
    return sha256_hex(bytes);
}

StateDict with_prefix(const StateDict& state, std::string_view prefix) {
    StateDict out;
    for (const auto& [k, v] : state) out.emplace(std::string(prefix) + k, v);
    return out;
}

StateDict strip_prefix(const StateDict& state, std::string_view prefix) {
    StateDict out;
    for (const auto& [k, v] : state)
        if (k.starts_with(prefix)) out.emplace(k.substr(prefix.size()), v);
    return out;
}

Tensor ParameterSet::add(std::string name, Tensor tensor) {
    for (const auto& [existing, _] : entries_)
        if (existing == name) throw ContractError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    entries_.emplace_back(std::move(name), tensor);
    return tensor;
}

std::vector<Tensor> ParameterSet::tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : entries_) out.push_back(t);
    return out;
}

std::size_t ParameterSet::count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
}

StateDict ParameterSet::state() const {
    StateDict out;
    for (const auto& [name, t] : entries_) out.emplace(name, Blob{t.shape(), {t.data().begin(), t.data().end()}});
    return out;
}

void ParameterSet::load(const StateDict& state) {
    for (auto& [name, t] : entries_) {
        auto it = state.find(name);
        if (it == state.end()) throw ContractError("state is missing parameter " + name);
        if (it->second.shape != t.shape())
            throw ContractError("shape mismatch for parameter " + name + ": " + shape_string(it->second.shape) +
                                " vs " + shape_string(t.shape()));
        auto dst = t.mutable_data();
        std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
    }
}

void ParameterSet::set_requires_grad(bool flag) {
    for (auto& [_, t] : entries_) t.set_requires_grad(flag);
}

void ParameterSet::zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
}

std::vector<double> normal_values(std::size_t n, double stddev, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> out(n);
    for (auto& v : out) v = stddev * normal(rng);
    return out;
}

Linear::Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               double init_std)
    : weight_(params.add(name + ".weight", Tensor::from({in, out}, normal_values(in * out, init_std, rng)))),
      bias_(params.add(name + ".bias", Tensor::zeros({out}))) {}

Tensor Linear::forward(const Tensor& x) const { return ops::add_row_vector(ops::matmul(x, weight_), bias_); }

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, std::size_t width, double eps)
    : gain_(params.add(name + ".gain", Tensor::full({width}, 1.0))),
      shift_(params.add(name + ".shift", Tensor::zeros({width}))),
      eps_(eps) {}

Tensor LayerNorm::forward(const Tensor& x) const {
    return ops::add_row_vector(ops::mul_row_vector(ops::layer_norm_rows(x, eps_), gain_), shift_);
}

Conv2d::Conv2d(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               Rng& rng, double init_std)
    : weight_(params.add(name + ".weight", Tensor::from({out, in, kernel, kernel},
                                                        normal_values(out * in * kernel * kernel, init_std, rng)))),
      bias_(params.add(name + ".bias", Tensor::zeros({out}))) {}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight_, bias_); }

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params) : params_(std::move(params)) {
    for (const auto& [_, t] : params_) {
        first_.emplace_back(t.numel(), 0.0);
        second_.emplace_back(t.numel(), 0.0);
    }
}

void Adam::step(const AdamSettings& s) {
    ++steps_;
    const double correction1 = 1.0 - std::pow(s.beta1, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(s.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& t = params_[i].second;
        auto grad = t.grad();
        if (grad.empty()) continue;
        auto value = t.mutable_data();
        auto& m = first_[i];
        auto& v = second_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * grad[j];
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * grad[j] * grad[j];
            const double m_hat = m[j] / correction1;
            const double v_hat = v[j] / correction2;
            value[j] -= s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

StateDict Adam::state() const {
    StateDict out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& [name, t] = params_[i];
        out.emplace("m/" + name, Blob{t.shape(), first_[i]});
        out.emplace("v/" + name, Blob{t.shape(), second_[i]});
    }
    out.emplace("step", Blob{{1}, {static_cast<double>(steps_)}});
    return out;
}

void Adam::load_state(const StateDict& state) {
    auto step = state.find("step");
    if (step == state.end()) throw ContractError("optimizer state has no step counter");
    steps_ = static_cast<std::uint64_t>(step->second.data.at(0));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& name = params_[i].first;
        auto m = state.find("m/" + name);
        auto v = state.find("v/" + name);
        if (m == state.end() || v == state.end()) throw ContractError("optimizer state is missing moments of " + name);
        if (m->second.data.size() != first_[i].size() || v->second.data.size() != second_[i].size())
            throw ContractError("optimizer state size mismatch for " + name);
        first_[i] = m->second.data;
        second_[i] = v->second.data;
    }
}

}  // namespace erasure
