#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "jotr/ops.hpp"
#include "jotr/rng.hpp"
#include "jotr/tensor.hpp"

namespace jotr {

// Ordered name -> parameter map. Order is insertion order and defines the
// checkpoint layout, the optimizer state layout, and every iteration order
// that must stay deterministic.
template <typename T>
class ParamRegistry {
public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, t);
        return t;
    }

    const Tensor<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
    std::size_t count() const { return items_.size(); }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
std::vector<T> init_normal(std::size_t n, double stddev, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = T(rng.normal(0.0, stddev));
    return v;
}

template <typename T>
std::vector<T> init_xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double s = std::sqrt(2.0 / double(fan_in + fan_out));
    return init_normal<T>(fan_in * fan_out, s, rng);
}

// y = x W + b for row-stacked inputs [n, in].
template <typename T>
struct Linear {
    Tensor<T> weight; // [in, out]
    Tensor<T> bias;   // [1, out]

    Linear() = default;
    Linear(ParamRegistry<T>& reg, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        weight = reg.add(name + ".weight", Tensor<T>::from({in, out}, init_xavier<T>(in, out, rng)));
        bias = reg.add(name + ".bias", Tensor<T>::zeros({1, out}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }
};

// Stack of linear layers with gelu between them (none after the last).
template <typename T>
struct Mlp {
    std::vector<Linear<T>> layers;

    Mlp() = default;
    Mlp(ParamRegistry<T>& reg, const std::string& name, const std::vector<std::size_t>& widths,
        Rng& rng) {
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            layers.emplace_back(reg, name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
    }

    Tensor<T> operator()(Tensor<T> x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i](x);
            if (i + 1 < layers.size()) x = gelu(x);
        }
        return x;
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain;
    Tensor<T> bias;

    LayerNorm() = default;
    LayerNorm(ParamRegistry<T>& reg, const std::string& name, std::size_t c) {
        gain = reg.add(name + ".gain", Tensor<T>::filled({c}, T(1)));
        bias = reg.add(name + ".bias", Tensor<T>::zeros({c}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

} // namespace jotr
