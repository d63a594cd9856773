#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// E_a = a + (1 - exp(-((E_v - a) / beta)^2)), elementwise; E_v broadcasts
// against a.
inline Tensor dab(const Tensor& a, const Tensor& e_v, const Tensor& beta) {
    const Tensor gap = div(sub(e_v, a), beta);
    return add(a, rsub_scalar(1.0, exp(neg(square(gap)))));
}

// beta = softplus(rho) keeps beta positive; rho starts where beta = 1.
struct Dab {
    Tensor rho;

    Dab() = default;
    Dab(ParameterSet& ps, const std::string& name) {
        rho = ps.add_parameter(name + ".rho", Tensor::scalar(std::log(std::exp(1.0) - 1.0)));
    }

    Tensor beta() const { return softplus(rho); }

    // audio [B, T, D]; events [B, T, D] are averaged over time first.
    Tensor operator()(const Tensor& audio, const Tensor& events) const {
        if (audio.rank() != 3 || events.rank() != 3 || audio.dim(0) != events.dim(0) ||
            audio.dim(2) != events.dim(2)) {
            throw DimensionError("DAB expects [B, T, D] audio and events, got " + to_string(audio.shape()) + " and " +
                                 to_string(events.shape()));
        }
        return dab(audio, mean(events, 1, true), beta());
    }
};

// Cross-modal reasoning for one modality:
//   gated = sem * sigmoid(j),  R = CA(sem, gated),  P = MLP(LN(R)) + R
// sem is [B, T, emb]; j is the pooled spike rate [B, emb].
struct Crm {
    Attention attn;
    LayerNorm ln;
    Mlp mlp;
    std::size_t width = 0;

    Crm() = default;
    Crm(ParameterSet& ps, const std::string& name, std::size_t width_, Rng& rng) : width(width_) {
        attn = Attention(ps, name + ".ca", width, 1, rng);
        ln = LayerNorm(ps, name + ".ln", width);
        mlp = Mlp(ps, name + ".mlp", width, width, rng);
    }

    Tensor operator()(const Tensor& sem, const Tensor& j) const {
        if (sem.rank() != 3 || sem.dim(-1) != width || j.shape() != Shape{sem.dim(0), width}) {
            throw DimensionError("CRM expects sem [B, T, " + std::to_string(width) + "] and j [B, " +
                                 std::to_string(width) + "], got " + to_string(sem.shape()) + " and " +
                                 to_string(j.shape()));
        }
        const Tensor gate = sigmoid(reshape(j, {j.dim(0), 1, width}));
        const Tensor r = attn(sem, mul(sem, gate));
        return add(mlp(ln(r)), r);
    }
};

// Standard transformer layer with visual queries:
//   Z = P_v + MHCA(P_v, P_a),  F = MLP(LN(Z)) + Z, averaged over tokens -> [B, emb].
struct CrossModalTransformer {
    Attention attn;
    LayerNorm ln;
    Mlp mlp;

    CrossModalTransformer() = default;
    CrossModalTransformer(ParameterSet& ps, const std::string& name, std::size_t width, std::size_t heads, Rng& rng) {
        attn = Attention(ps, name + ".mhca", width, heads, rng);
        ln = LayerNorm(ps, name + ".ln", width);
        mlp = Mlp(ps, name + ".mlp", width, width, rng);
    }

    Tensor tokens(const Tensor& p_v, const Tensor& p_a) const {
        const Tensor z = add(p_v, attn(p_v, p_a));
        return add(mlp(ln(z)), z);
    }

    Tensor operator()(const Tensor& p_v, const Tensor& p_a) const {
        const Tensor f = tokens(p_v, p_a);
        return f.rank() == 3 ? mean(f, 1) : f;
    }
};

// Two blocks of Linear -> BatchNorm -> ReLU -> Dropout: in -> hidden -> out.
struct ProjectionHead {
    Linear fc1, fc2;
    BatchNorm bn1, bn2;
    double dropout_rate = 0.0;

    ProjectionHead() = default;
    ProjectionHead(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                   double dropout_p, Rng& rng)
        : dropout_rate(dropout_p) {
        fc1 = Linear(ps, name + ".fc1", in, hidden, rng);
        bn1 = BatchNorm(ps, name + ".bn1", hidden);
        fc2 = Linear(ps, name + ".fc2", hidden, out, rng);
        bn2 = BatchNorm(ps, name + ".bn2", out);
    }

    std::size_t out_width() const { return fc2.out; }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) {
        const Tensor h = dropout(relu(bn1(fc1(x), ctx)), dropout_rate, ctx);
        return dropout(relu(bn2(fc2(h), ctx)), dropout_rate, ctx);
    }
};

}  // namespace mdst
