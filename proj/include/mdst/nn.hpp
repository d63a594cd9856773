#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/ops.hpp"
#include "mdst/random.hpp"
#include "mdst/serialize.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Everything a forward pass needs besides weights and inputs.
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;   // dropout masks; required when training with dropout
    bool strict = false;  // assert spike binarity and reset at every step
};

inline Tensor dropout(const Tensor& x, double p, ForwardContext& ctx) {
    if (!ctx.training || p <= 0.0) return x;
    if (!ctx.rng) throw ContractError("dropout in training mode needs an rng");
    return dropout(x, p, *ctx.rng, true);
}

// Ordered registry of learnable parameters and non-learnable buffers
// (normalization running statistics). Names are unique.
class ParameterSet {
   public:
    Tensor add_parameter(const std::string& name, Tensor t) {
        check_new(name);
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }

    Tensor add_buffer(const std::string& name, Tensor t) {
        check_new(name);
        t.set_requires_grad(false);
        buffers_.emplace_back(name, t);
        return t;
    }

    const NamedTensorList& parameters() const { return params_; }
    const NamedTensorList& buffers() const { return buffers_; }

    NamedTensorList all() const {
        NamedTensorList out = params_;
        out.insert(out.end(), buffers_.begin(), buffers_.end());
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : params_) {
            if (n == name) return t;
        }
        for (const auto& [n, t] : buffers_) {
            if (n == name) return t;
        }
        throw ConfigError("unknown tensor '" + name + "'");
    }

    // Copies values from a loaded set; every name and shape must match.
    void assign(const NamedTensorList& loaded) {
        std::map<std::string, Tensor> by_name(loaded.begin(), loaded.end());
        for (auto* list : {&params_, &buffers_}) {
            for (auto& [name, t] : *list) {
                auto it = by_name.find(name);
                if (it == by_name.end()) throw DataError("weights missing tensor '" + name + "'");
                if (it->second.shape() != t.shape()) {
                    throw DataError("weights tensor '" + name + "' has shape " + to_string(it->second.shape()) +
                                    ", model expects " + to_string(t.shape()));
                }
                auto dst = t.mutable_values();
                auto src = it->second.values();
                std::copy(src.begin(), src.end(), dst.begin());
            }
        }
    }

   private:
    void check_new(const std::string& name) const {
        for (const auto* list : {&params_, &buffers_}) {
            for (const auto& [n, _] : *list) {
                if (n == name) throw ConfigError("duplicate tensor name '" + name + "'");
            }
        }
    }

    NamedTensorList params_;
    NamedTensorList buffers_;
};

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v));
}

// y = x W + b with W stored [in, out]; bias starts at zero.
struct Linear {
    Tensor weight, bias;
    std::size_t in = 0, out = 0;

    Linear() = default;
    Linear(ParameterSet& ps, const std::string& name, std::size_t in_features, std::size_t out_features, Rng& rng,
           bool with_bias = true)
        : in(in_features), out(out_features) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
        weight = ps.add_parameter(name + ".weight", uniform_tensor({in_features, out_features}, bound, rng));
        if (with_bias) bias = ps.add_parameter(name + ".bias", Tensor::zeros({out_features}));
    }

    Tensor operator()(const Tensor& x) const {
        if (x.dim(-1) != in) {
            throw DimensionError("linear layer expects width " + std::to_string(in) + ", got " + to_string(x.shape()));
        }
        Tensor y = matmul(x, weight);
        return bias.defined() ? add(y, bias) : y;
    }
};

struct BatchNorm {
    Tensor gamma, beta, running_mean, running_var;
    double momentum = 0.1;

    BatchNorm() = default;
    BatchNorm(ParameterSet& ps, const std::string& name, std::size_t features) {
        gamma = ps.add_parameter(name + ".gamma", Tensor::ones({features}));
        beta = ps.add_parameter(name + ".beta", Tensor::zeros({features}));
        running_mean = ps.add_buffer(name + ".running_mean", Tensor::zeros({features}));
        running_var = ps.add_buffer(name + ".running_var", Tensor::ones({features}));
    }

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        return batch_norm(x, gamma, beta, running_mean, running_var, ctx.training, momentum);
    }
};

struct LayerNorm {
    Tensor gain, bias;

    LayerNorm() = default;
    LayerNorm(ParameterSet& ps, const std::string& name, std::size_t features) {
        gain = ps.add_parameter(name + ".gain", Tensor::ones({features}));
        bias = ps.add_parameter(name + ".bias", Tensor::zeros({features}));
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Two-layer perceptron with a ReLU between.
struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParameterSet& ps, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng)
        : fc1(ps, name + ".fc1", width, hidden, rng), fc2(ps, name + ".fc2", hidden, width, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Scaled dot-product attention, queries from one sequence and keys/values
// from another: [B, Tq, d] x [B, Tk, d] -> [B, Tq, d]. Projections carry no
// bias, so zero inputs give zero output.
struct Attention {
    Linear wq, wk, wv, wo;
    std::size_t width = 0, heads = 1;

    Attention() = default;
    Attention(ParameterSet& ps, const std::string& name, std::size_t width_, std::size_t heads_, Rng& rng)
        : width(width_), heads(heads_) {
        if (heads == 0 || width % heads != 0) {
            throw ConfigError("attention width " + std::to_string(width) + " not divisible into " +
                              std::to_string(heads) + " heads");
        }
        wq = Linear(ps, name + ".wq", width, width, rng, false);
        wk = Linear(ps, name + ".wk", width, width, rng, false);
        wv = Linear(ps, name + ".wv", width, width, rng, false);
        wo = Linear(ps, name + ".wo", width, width, rng, false);
    }

    Tensor operator()(const Tensor& query_src, const Tensor& kv_src) const {
        if (query_src.dim(-1) != width || kv_src.dim(-1) != width) {
            throw DimensionError("attention width mismatch: " + to_string(query_src.shape()) + " vs " +
                                 to_string(kv_src.shape()));
        }
        const Tensor q = wq(query_src);
        const Tensor k = wk(kv_src);
        const Tensor v = wv(kv_src);
        const std::size_t hd = width / heads;
        const double s = 1.0 / std::sqrt(static_cast<double>(hd));
        if (heads == 1) return wo(matmul(softmax(scale(matmul(q, transpose_last2(k)), s)), v));
        std::vector<Tensor> parts;
        parts.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const Tensor qh = slice(q, -1, h * hd, hd);
            const Tensor kh = slice(k, -1, h * hd, hd);
            const Tensor vh = slice(v, -1, h * hd, hd);
            parts.push_back(matmul(softmax(scale(matmul(qh, transpose_last2(kh)), s)), vh));
        }
        return wo(concat(parts, -1));
    }
};

}  // namespace mdst
