#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/fusion.hpp"
#include "mdst/gradcheck.hpp"
#include "mdst/losses.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/random.hpp"
#include "mdst/semantic.hpp"
#include "mdst/spiking.hpp"

namespace mdst {

// Named finite-difference checks grouped by module. Spiking cases run under
// SurrogateForwardScope, so the step is replaced by its surrogate in both the
// analytic and the numeric pass.
struct GradCase {
    std::string module;
    std::string name;
    GradCheckReport report;
};

inline const std::vector<std::string>& gradcheck_modules() {
    static const std::vector<std::string> names = {"tensorcore", "spiking", "semantic", "fusion", "training"};
    return names;
}

namespace detail {

inline Tensor random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

// Fixed projection so every case reduces to a scalar with non-uniform weights.
inline Tensor weigh(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return sum_all(mul(y, random_input(y.shape(), rng)));
}

inline void add_case(std::vector<GradCase>& out, const std::string& module, const std::string& name,
                     const std::function<Tensor()>& f, const NamedTensors& params, double h = 1e-5) {
    out.push_back({module, name, check_gradients(f, params, h)});
}

inline void tensorcore_cases(std::vector<GradCase>& out, std::uint64_t seed) {
    Rng rng(seed);
    const std::string m = "tensorcore";
    Tensor a = random_param({3, 4}, rng), b = random_param({3, 4}, rng);
    Tensor pos = random_param({3, 4}, rng, 0.5, 2.0);
    Tensor w = random_param({4, 5}, rng);
    NamedTensors ab = {{"a", a}, {"b", b}};
    add_case(out, m, "add", [=] { return weigh(add(a, b), 1); }, ab);
    add_case(out, m, "sub", [=] { return weigh(sub(a, b), 2); }, ab);
    add_case(out, m, "mul", [=] { return weigh(mul(a, b), 3); }, ab);
    add_case(out, m, "div", [=] { return weigh(div(a, pos), 4); }, {{"a", a}, {"pos", pos}});
    add_case(out, m, "scale_neg", [=] { return weigh(neg(scale(add_scalar(a, 0.3), 1.7)), 5); }, {{"a", a}});
    add_case(out, m, "exp", [=] { return weigh(exp(a), 6); }, {{"a", a}});
    add_case(out, m, "log", [=] { return weigh(log(pos), 7); }, {{"pos", pos}});
    add_case(out, m, "sigmoid", [=] { return weigh(sigmoid(a), 8); }, {{"a", a}});
    add_case(out, m, "relu", [=] { return weigh(relu(a), 9); }, {{"a", a}});
    add_case(out, m, "softplus", [=] { return weigh(softplus(a), 10); }, {{"a", a}});
    add_case(out, m, "square", [=] { return weigh(square(a), 11); }, {{"a", a}});
    add_case(out, m, "matmul", [=] { return weigh(matmul(a, w), 12); }, {{"a", a}, {"w", w}});
    add_case(out, m, "transpose", [=] { return weigh(transpose_last2(a), 13); }, {{"a", a}});
    add_case(out, m, "slice_concat",
             [=] { return weigh(concat({slice(a, 1, 1, 2), slice(b, 1, 0, 3)}, 1), 14); }, ab);
    add_case(out, m, "index_select", [=] { return weigh(index_select(a, {2, 0, 2}), 15); }, {{"a", a}});
    add_case(out, m, "sum_mean",
             [=] { return add(weigh(sum(a, 0, false), 16), weigh(mean(b, 1, true), 17)); }, ab);
    add_case(out, m, "max_min", [=] { return add(weigh(max(a, 1, false), 18), weigh(min(b, 0, false), 19)); }, ab);
    add_case(out, m, "softmax", [=] { return weigh(softmax(a), 20); }, {{"a", a}});
    add_case(out, m, "softmax_free_scale", [=] { return weigh(softmax_free_scale(a, 0.25), 21); }, {{"a", a}});
    Tensor gain = random_param({4}, rng), bias = random_param({4}, rng);
    add_case(out, m, "layer_norm", [=] { return weigh(layer_norm(a, gain, bias), 22); },
             {{"a", a}, {"gain", gain}, {"bias", bias}});
    add_case(out, m, "batch_norm",
             [=] {
                 Tensor rm = Tensor::zeros({4}), rv = Tensor::ones({4});
                 return weigh(batch_norm(a, gain, bias, rm, rv, true), 23);
             },
             {{"a", a}, {"gain", gain}, {"bias", bias}});
    add_case(out, m, "minmax_normalize", [=] { return weigh(minmax_normalize(a, 1e-3), 24); }, {{"a", a}});
    add_case(out, m, "squared_distance", [=] { return weigh(squared_distance(a, b), 25); }, ab);
}

inline void spiking_cases(std::vector<GradCase>& out, std::uint64_t seed) {
    SurrogateForwardScope smooth;
    Rng rng(seed);
    const std::string m = "spiking";
    Tensor x = random_param({3, 4}, rng, -1.0, 1.0);
    add_case(out, m, "heaviside", [=] { return weigh(heaviside(x, kDefaultSurrogateSlope), 30); }, {{"x", x}});

    LifParams p;
    Tensor current = random_param({2, 3}, rng, 0.0, 3.0);
    add_case(out, m, "lif_steps",
             [=] {
                 LifState s = LifState::resting({2, 3}, p);
                 Tensor acc = Tensor::zeros({2, 3});
                 for (int t = 0; t < 4; ++t) {
                     const auto [next, spikes] = lif_step(s, current, p, false);
                     s = next;
                     acc = add(acc, add(spikes, scale(s.v, 0.3)));
                 }
                 return weigh(acc, 31);
             },
             {{"current", current}});

    Tensor prev = random_param({2, 1}, rng, 0.5, 1.5);
    Tensor sem = random_param({2, 3, 4}, rng);
    Tensor mot = random_param({2, 4}, rng);
    add_case(out, m, "dynamic_threshold", [=] { return weigh(dynamic_threshold(prev, sem, mot, p), 32); },
             {{"prev", prev}, {"semantics", sem}, {"motion", mot}});

    ParameterSet ps;
    Rng init(seed + 1);
    SpikingLinear layer(ps, "sl", 4, 3, NormKind::Batch, init);
    Sequence seq;
    for (int t = 0; t < 3; ++t) seq.push_back(random_input({4, 4}, rng, 0.0, 2.0));
    add_case(out, m, "spiking_linear",
             [=]() mutable {
                 ForwardContext ctx{true, nullptr, false};
                 return weigh(firing_rate(spiking_linear(seq, layer, p, ctx)), 33);
             },
             ps.parameters());

    ParameterSet ps2;
    SpikingSelfAttention ssa(ps2, "ssa", 4, NormKind::Layer, init);
    Sequence tok;
    for (int t = 0; t < 2; ++t) tok.push_back(random_input({2, 3, 4}, rng, 0.0, 2.0));
    add_case(out, m, "spiking_self_attention",
             [=]() mutable {
                 ForwardContext ctx{true, nullptr, false};
                 return weigh(firing_rate(ssa(tok, p, ctx)), 34);
             },
             ps2.parameters());
}

inline void semantic_cases(std::vector<GradCase>& out, std::uint64_t seed) {
    Rng rng(seed), init(seed + 1);
    const std::string m = "semantic";
    ParameterSet ps;
    Encoder enc(ps, "enc", {4, 5, 4, 0.0}, init);
    Tensor feats = random_input({3, 4}, rng);
    add_case(out, m, "encoder",
             [=]() mutable {
                 ForwardContext ctx{true, nullptr, false};
                 return weigh(enc(feats, ctx), 40);
             },
             ps.parameters());

    ParameterSet ps2;
    Rjlu rjlu(ps2, "rjlu", 4, init);
    Tensor a = random_input({2, 3, 4}, rng), v = random_input({2, 3, 4}, rng);
    add_case(out, m, "rjlu",
             [=] {
                 const RjluTrace tr = rjlu.run(a, v);
                 return add(weigh(tr.h, 41), weigh(tr.sem_v, 42));
             },
             ps2.parameters());
}

inline void fusion_cases(std::vector<GradCase>& out, std::uint64_t seed) {
    Rng rng(seed), init(seed + 1);
    const std::string m = "fusion";
    Tensor a = random_param({2, 3, 4}, rng), ev = random_param({2, 1, 4}, rng);
    Tensor beta = random_param({1}, rng, 0.5, 1.5);
    add_case(out, m, "dab", [=] { return weigh(dab(a, ev, beta), 50); }, {{"a", a}, {"e_v", ev}, {"beta", beta}});

    ParameterSet ps;
    Crm crm(ps, "crm", 4, init);
    Tensor sem = random_input({2, 3, 4}, rng), j = random_input({2, 4}, rng, 0.0, 1.0);
    add_case(out, m, "crm", [=] { return weigh(crm(sem, j), 51); }, ps.parameters());

    ParameterSet ps2;
    CrossModalTransformer cmt(ps2, "cmt", 4, 2, init);
    ProjectionHead head(ps2, "proj", 4, 5, 3, 0.0, init);
    Tensor pv = random_input({3, 2, 4}, rng), pa = random_input({3, 2, 4}, rng);
    add_case(out, m, "project_cross_modal_transformer",
             [=]() mutable {
                 ForwardContext ctx{true, nullptr, false};
                 return weigh(head(cmt(pv, pa), ctx), 52);
             },
             ps2.parameters());
}

// End-to-end loss of a 4-dim toy model: encoder, RJLU, spiking MLP, CRM,
// transformer, projection and reconstruction heads, word projection.
inline void training_cases(std::vector<GradCase>& out, std::uint64_t seed) {
    SurrogateForwardScope smooth;
    Rng rng(seed), init(seed + 1);
    const std::size_t d = 4, frames = 3;
    ParameterSet ps;
    Encoder enc_a(ps, "enc_a", {d, d, d, 0.0}, init), enc_v(ps, "enc_v", {d, d, d, 0.0}, init);
    Rjlu rjlu(ps, "rjlu", d, init);
    SpikingConfig sc;
    sc.input_dim = d;
    sc.width = d;
    sc.mlp_hidden = d;
    sc.mdst_timesteps = frames;
    SpikingMlpBody body(ps, "snn", sc, init);
    Crm crm_a(ps, "crm_a", d, init), crm_v(ps, "crm_v", d, init);
    CrossModalTransformer cmt(ps, "cmt", d, 2, init);
    ProjectionHead av_proj(ps, "av_proj", d, d, d, 0.0, init), av_rec(ps, "av_rec", d, d, d, 0.0, init);
    ProjectionHead word_proj(ps, "word_proj", d, d, d, 0.0, init);
    Tensor audio = random_input({4, frames, d}, rng), visual = random_input({4, frames, d}, rng);
    Tensor events = random_input({4, frames, d}, rng, 0.0, 2.0), words = random_input({4, d}, rng);
    Tensor mask = Tensor::ones({4});
    add_case(out, "training", "toy_model_loss",
             [=]() mutable {
                 ForwardContext ctx{true, nullptr, false};
                 const RjluTrace tr = rjlu.run(enc_a(audio, ctx), enc_v(visual, ctx));
                 const Tensor rate = body(unstack_time(events), {}, ctx).front();
                 const Tensor f = cmt(crm_v(tr.sem_v, rate), crm_a(tr.sem_a, rate));
                 const Tensor o_av = av_proj(f, ctx), o_rec = av_rec(o_av, ctx), o_w = word_proj(words, ctx);
                 const std::vector<std::size_t> neg = {1, 2, 3, 0};
                 LossTerms t;
                 t.l_n = triplet_loss(o_av, o_w, index_select(o_av, neg), index_select(o_w, neg), 1.0, mask);
                 t.l_p = projection_loss(o_av, o_w);
                 t.l_r = reconstruction_loss(o_rec, o_w);
                 return t.total();
             },
             ps.parameters(), 1e-4);
}

}  // namespace detail

// Runs the checks of one module, or of every module for "all".
inline std::vector<GradCase> run_gradcheck(const std::string& module, std::uint64_t seed = 17) {
    std::vector<GradCase> out;
    const bool all = module == "all";
    bool known = all;
    auto want = [&](const char* name) {
        const bool hit = all || module == name;
        known = known || hit;
        return hit;
    };
    if (want("tensorcore")) detail::tensorcore_cases(out, seed);
    if (want("spiking")) detail::spiking_cases(out, seed);
    if (want("semantic")) detail::semantic_cases(out, seed);
    if (want("fusion")) detail::fusion_cases(out, seed);
    if (want("training")) detail::training_cases(out, seed);
    if (!known) throw ConfigError("unknown gradcheck module '" + module + "'");
    return out;
}

}  // namespace mdst
