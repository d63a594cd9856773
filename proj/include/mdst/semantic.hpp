#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

struct EncoderSpec {
    std::size_t in = 512;
    std::size_t hidden = 512;
    std::size_t emb = 512;
    double dropout = 0.25;

    void validate() const {
        if (in == 0 || hidden == 0 || emb == 0) throw ConfigError("encoder widths must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder dropout must lie in [0, 1)");
    }
};

// f_2(f_1(x)) with each f = Linear -> BatchNorm -> ReLU -> Dropout.
struct Encoder {
    Linear fc1, fc2;
    BatchNorm bn1, bn2;
    EncoderSpec spec;

    Encoder() = default;
    Encoder(ParameterSet& ps, const std::string& name, const EncoderSpec& s, Rng& rng) : spec(s) {
        spec.validate();
        fc1 = Linear(ps, name + ".fc1", spec.in, spec.hidden, rng);
        bn1 = BatchNorm(ps, name + ".bn1", spec.hidden);
        fc2 = Linear(ps, name + ".fc2", spec.hidden, spec.emb, rng);
        bn2 = BatchNorm(ps, name + ".bn2", spec.emb);
    }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) {
        const Tensor h = dropout(relu(bn1(fc1(x), ctx)), spec.dropout, ctx);
        return dropout(relu(bn2(fc2(h), ctx)), spec.dropout, ctx);
    }
};

struct RjluTrace {
    Tensor sem_a;                 // [B, T, emb] audio segment of S_ahv per frame
    Tensor sem_v;                 // [B, T, emb] visual segment of S_ahv per frame
    std::vector<Tensor> fused;    // S_ahv per frame, [B, 3, emb]
    Tensor h;                     // final joint knowledge [B, emb]
};

// Recurrent joint learning unit. Per frame, with one token per modality:
//   C_a = sigmoid(CA(AP(a), AP(h))), C_v = sigmoid(CA(AP(v), AP(h)))
//   S   = MLP(LN(SA(C))) + SA(C),   C = [a; h; v] along tokens
//   h'  = g h + (1 - g) pool(S),     g = (C_a + C_v) / 2
// Both gates share one cross-attention, so equal a and v give equal gates.
struct Rjlu {
    Attention gate_attn, self_attn;
    LayerNorm ln;
    Mlp mlp;
    std::size_t width = 0;

    Rjlu() = default;
    Rjlu(ParameterSet& ps, const std::string& name, std::size_t width_, Rng& rng) : width(width_) {
        gate_attn = Attention(ps, name + ".ca", width, 1, rng);
        self_attn = Attention(ps, name + ".sa", width, 1, rng);
        ln = LayerNorm(ps, name + ".ln", width);
        mlp = Mlp(ps, name + ".mlp", width, width, rng);
    }

    // Inputs are [B, emb] or token tensors [B, N, emb]; AP averages tokens.
    std::pair<Tensor, Tensor> gates(const Tensor& a, const Tensor& v, const Tensor& h_prev) const {
        const Tensor ha = pooled(h_prev);
        const Tensor ca = sigmoid(gate_attn(pooled(a), ha));
        const Tensor cv = sigmoid(gate_attn(pooled(v), ha));
        const std::size_t b = ca.dim(0);
        return {reshape(ca, {b, width}), reshape(cv, {b, width})};
    }

    Tensor fuse(const Tensor& a, const Tensor& h_prev, const Tensor& v) const {
        check_width(a, "audio");
        check_width(h_prev, "joint knowledge");
        check_width(v, "visual");
        const Tensor c = concat({tokens(a), tokens(h_prev), tokens(v)}, 1);
        const Tensor sa = self_attn(c, c);
        return add(mlp(ln(sa)), sa);
    }

    static Tensor update(const Tensor& h_prev, const Tensor& c_a, const Tensor& c_v, const Tensor& fused) {
        const Tensor g = scale(add(c_a, c_v), 0.5);
        const Tensor pooled_s = mean(fused, 1);
        return add(mul(g, h_prev), mul(rsub_scalar(1.0, g), pooled_s));
    }

    // Runs the recurrence over encoded [B, T, emb] sequences from h^0 = 0.
    RjluTrace run(const Tensor& a_seq, const Tensor& v_seq) const {
        if (a_seq.shape() != v_seq.shape() || a_seq.rank() != 3) {
            throw DimensionError("RJLU expects matching [B, T, emb] inputs, got " + to_string(a_seq.shape()) +
                                 " and " + to_string(v_seq.shape()));
        }
        const std::size_t b = a_seq.dim(0), steps = a_seq.dim(1);
        RjluTrace trace;
        trace.h = Tensor::zeros({b, width});
        std::vector<Tensor> seg_a, seg_v;
        for (std::size_t t = 0; t < steps; ++t) {
            const Tensor a = reshape(slice(a_seq, 1, t, 1), {b, width});
            const Tensor v = reshape(slice(v_seq, 1, t, 1), {b, width});
            const auto [c_a, c_v] = gates(a, v, trace.h);
            const Tensor s = fuse(a, trace.h, v);
            trace.h = update(trace.h, c_a, c_v, s);
            seg_a.push_back(slice(s, 1, 0, 1));
            seg_v.push_back(slice(s, 1, 2, 1));
            trace.fused.push_back(s);
        }
        trace.sem_a = concat(seg_a, 1);
        trace.sem_v = concat(seg_v, 1);
        return trace;
    }

   private:
    void check_width(const Tensor& x, const char* what) const {
        if (x.dim(-1) != width) {
            throw DimensionError(std::string("RJLU ") + what + " width " + std::to_string(x.dim(-1)) + ", expected " +
                                 std::to_string(width));
        }
    }

    Tensor tokens(const Tensor& x) const { return x.rank() == 2 ? reshape(x, {x.dim(0), 1, width}) : x; }
    Tensor pooled(const Tensor& x) const {
        check_width(x, "gate input");
        return x.rank() == 2 ? tokens(x) : mean(x, 1, true);
    }
};

}  // namespace mdst
