#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Leaky integrate-and-fire constants. Time is measured in timesteps.
struct LifParams {
    double tau_m = 2.0;
    double resistance = 1.0;
    double v_reset = 0.0;
    double v_th_init = 1.0;
    double surrogate_alpha = kDefaultSurrogateSlope;

    void validate() const {
        if (!(tau_m > 1.0)) throw ConfigError("tau_m must exceed 1 timestep");
        if (!(v_th_init > v_reset)) throw ConfigError("initial threshold must exceed the reset potential");
        if (!(surrogate_alpha > 0.0)) throw ConfigError("surrogate slope must be positive");
    }
};

struct LifState {
    Tensor v;       // membrane potential
    Tensor v_th;    // threshold, broadcast against v
    Tensor spikes;  // last emitted spikes

    static LifState resting(const Shape& shape, const LifParams& p) {
        return {Tensor::zeros(shape), Tensor::scalar(p.v_th_init), Tensor::zeros(shape)};
    }
};

namespace detail {

inline bool is_binary(const Tensor& t) {
    for (double v : t.values()) {
        if (v != 0.0 && v != 1.0) return false;
    }
    return true;
}

}  // namespace detail

// One explicit-Euler step of tau dV/dt = -V + R I with dt = 1, followed by
// the inclusive threshold test V >= V_th and reset to v_reset.
inline std::pair<LifState, Tensor> lif_step(const LifState& state, const Tensor& input_current, const LifParams& p,
                                           bool strict = false) {
    if (state.v.shape() != input_current.shape()) {
        throw DimensionError("lif_step: membrane " + to_string(state.v.shape()) + " vs input " +
                             to_string(input_current.shape()));
    }
    const Tensor charged = add(scale(state.v, 1.0 - 1.0 / p.tau_m), scale(input_current, p.resistance / p.tau_m));
    const Tensor spikes = heaviside(sub(charged, state.v_th), p.surrogate_alpha);
    Tensor v = mul(charged, rsub_scalar(1.0, spikes));
    if (p.v_reset != 0.0) v = add(v, scale(spikes, p.v_reset));
    if (strict && spike_forward_mode() == SpikeForward::Step) {
        if (!detail::is_binary(spikes)) throw ContractError("lif_step produced non-binary spikes");
        auto sv = spikes.values();
        auto vv = v.values();
        for (std::size_t i = 0; i < sv.size(); ++i) {
            if (sv[i] == 1.0 && vv[i] != p.v_reset) throw ContractError("lif_step: spiking neuron not reset");
        }
    }
    return {LifState{v, state.v_th, spikes}, spikes};
}

inline constexpr double kThresholdFloor = 0.1;
inline constexpr double kThresholdCeilingFactor = 10.0;
inline constexpr double kNormalizationFloor = 1e-3;

// Threshold modulation by scene semantics and motion:
//   phi   = sigmoid(mean(S))
//   omega = -mean(N(S) * log(1 / N(S) + m))
//   V_th  = clamp((phi + omega) * V_th_prev, 0.1, 10 * v_th_init)
// N is per-sample min-max normalization into [1e-3, 1] and m the mean event
// magnitude of the sample's motion grid row. semantics is [B, ...] and motion
// [B, ...]; the result is [B, 1].
inline Tensor dynamic_threshold(const Tensor& v_th_prev, const Tensor& semantics, const Tensor& motion,
                                const LifParams& p) {
    const std::size_t batch = semantics.dim(0);
    if (motion.dim(0) != batch) throw DimensionError("dynamic_threshold: batch extents differ");
    const Tensor s = reshape(semantics, {batch, semantics.size() / batch});
    const Tensor phi = sigmoid(mean(s, 1, true));
    const Tensor normalized = minmax_normalize(s, kNormalizationFloor);
    const Tensor mot = reshape(motion, {batch, motion.size() / batch});
    const Tensor m = mean(add(relu(mot), relu(neg(mot))), 1, true);
    const Tensor arg = add(div(Tensor::scalar(1.0), normalized), m);
    const Tensor omega = neg(mean(mul(normalized, log(arg)), 1, true));
    return clamp(mul(add(phi, omega), v_th_prev), kThresholdFloor, kThresholdCeilingFactor * p.v_th_init);
}

using Sequence = std::vector<Tensor>;

enum class NormKind { None, Batch, Layer };

// Linear map followed by an optional normalization; drives a LIF layer.
struct SpikingLinear {
    Linear linear;
    NormKind norm = NormKind::Batch;
    BatchNorm bn;
    LayerNorm ln;

    SpikingLinear() = default;
    SpikingLinear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, NormKind norm_kind,
                  Rng& rng)
        : linear(ps, name + ".linear", in, out, rng), norm(norm_kind) {
        if (norm == NormKind::Batch) bn = BatchNorm(ps, name + ".bn", out);
        if (norm == NormKind::Layer) ln = LayerNorm(ps, name + ".ln", out);
    }

    Tensor current(const Tensor& x, ForwardContext& ctx) {
        const Tensor y = linear(x);
        switch (norm) {
            case NormKind::Batch: return bn(y, ctx);
            case NormKind::Layer: return ln(y);
            default: return y;
        }
    }
};

// Runs a spiking linear layer over a timestep sequence, carrying LIF state.
// thresholds, when given, supplies the per-step threshold tensor.
inline Sequence spiking_linear(const Sequence& x, SpikingLinear& layer, const LifParams& p, ForwardContext& ctx,
                               std::span<const Tensor> thresholds = {}, bool binary_input = false) {
    if (!thresholds.empty() && thresholds.size() != x.size()) {
        throw DimensionError("spiking_linear: " + std::to_string(thresholds.size()) + " thresholds for " +
                             std::to_string(x.size()) + " timesteps");
    }
    Sequence out;
    out.reserve(x.size());
    LifState state;
    for (std::size_t t = 0; t < x.size(); ++t) {
        if (binary_input && ctx.strict && !detail::is_binary(x[t])) {
            throw ContractError("spiking_linear: non-binary input spikes at step " + std::to_string(t));
        }
        const Tensor current = layer.current(x[t], ctx);
        if (t == 0) state = LifState::resting(current.shape(), p);
        if (!thresholds.empty()) state.v_th = thresholds[t];
        auto [next, spikes] = lif_step(state, current, p, ctx.strict);
        state = std::move(next);
        out.push_back(std::move(spikes));
    }
    return out;
}

// Softmax-free attention core: (Q K^T V) * s over the last two axes.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, double s) {
    return softmax_free_scale(matmul(matmul(q, transpose_last2(k)), v), s);
}

// Spiking self-attention over token sequences [B, N, d] per timestep:
// binary Q, K, V from spiking projections, G = (Q K^T V) / d, output spikes
// from a spiking linear layer on G.
struct SpikingSelfAttention {
    SpikingLinear q, k, v, proj;
    std::size_t width = 0;
    double scale = 1.0;

    SpikingSelfAttention() = default;
    SpikingSelfAttention(ParameterSet& ps, const std::string& name, std::size_t width_, NormKind norm, Rng& rng)
        : q(ps, name + ".q", width_, width_, norm, rng),
          k(ps, name + ".k", width_, width_, norm, rng),
          v(ps, name + ".v", width_, width_, norm, rng),
          proj(ps, name + ".proj", width_, width_, norm, rng),
          width(width_),
          scale(1.0 / static_cast<double>(width_)) {
        if (width_ == 0) throw DimensionError("spiking self-attention needs a positive width");
    }

    Sequence operator()(const Sequence& x, const LifParams& p, ForwardContext& ctx) {
        const Sequence qs = spiking_linear(x, q, p, ctx);
        const Sequence ks = spiking_linear(x, k, p, ctx);
        const Sequence vs = spiking_linear(x, v, p, ctx);
        Sequence g;
        g.reserve(x.size());
        for (std::size_t t = 0; t < x.size(); ++t) g.push_back(attention_core(qs[t], ks[t], vs[t], scale));
        return spiking_linear(g, proj, p, ctx);
    }
};

// ---------------------------------------------------------------------------
// Timestep schedules

struct Stage {
    std::size_t timesteps = 1;
    std::size_t units = 1;

    bool operator==(const Stage&) const = default;
};

// Strictly decreasing per-stage timesteps T_1 > ... > T_m >= 1, each stage
// holding m_i >= 1 spiking units.
class StageSchedule {
   public:
    StageSchedule() = default;
    explicit StageSchedule(std::vector<Stage> stages) : stages_(std::move(stages)) {
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            if (stages_[i].timesteps < 1) throw ContractError("stage timesteps must be >= 1");
            if (stages_[i].units < 1) throw ContractError("stage unit counts must be >= 1");
            if (i > 0 && stages_[i].timesteps >= stages_[i - 1].timesteps) {
                throw ContractError("stage timesteps must strictly decrease, got " +
                                    std::to_string(stages_[i - 1].timesteps) + " then " +
                                    std::to_string(stages_[i].timesteps));
            }
        }
    }

    static StageSchedule standard() { return StageSchedule({{8, 1}, {6, 1}, {4, 1}}); }

    const std::vector<Stage>& stages() const { return stages_; }
    std::size_t size() const { return stages_.size(); }
    bool empty() const { return stages_.empty(); }
    const Stage& operator[](std::size_t i) const { return stages_[i]; }

    bool operator==(const StageSchedule&) const = default;

   private:
    std::vector<Stage> stages_;
};

// sum(m_i T_i) / sum(m_i)
inline double average_timestep(const StageSchedule& schedule) {
    if (schedule.empty()) throw ContractError("average_timestep of an empty schedule");
    double num = 0.0, den = 0.0;
    for (const auto& s : schedule.stages()) {
        num += static_cast<double>(s.units * s.timesteps);
        den += static_cast<double>(s.units);
    }
    return num / den;
}

// Contiguous bins partitioning `steps` into `bins` groups whose sizes differ
// by at most one, larger bins first. Returns (start, size) pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> timestep_bins(std::size_t steps, std::size_t bins) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    const std::size_t base = steps / bins, extra = steps % bins;
    std::size_t start = 0;
    for (std::size_t i = 0; i < bins; ++i) {
        const std::size_t size = base + (i < extra ? 1 : 0);
        out.emplace_back(start, size);
        start += size;
    }
    return out;
}

inline Tensor sequence_mean(std::span<const Tensor> xs) {
    Tensor acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return xs.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// Bin-averages a T_i-step sequence down to T_next < T_i steps.
inline Sequence shrink_timesteps(const Sequence& x, std::size_t next_steps) {
    if (next_steps < 1 || next_steps >= x.size()) {
        throw ContractError("shrink_timesteps: target " + std::to_string(next_steps) + " must be in [1, " +
                            std::to_string(x.size()) + ")");
    }
    Sequence out;
    for (const auto& [start, size] : timestep_bins(x.size(), next_steps)) {
        out.push_back(sequence_mean(std::span<const Tensor>(x).subspan(start, size)));
    }
    return out;
}

// Tensor form over the leading time axis: [T_i, ...] -> [T_next, ...].
inline Tensor shrink_timesteps(const Tensor& x, std::size_t next_steps) {
    const std::size_t steps = x.dim(0);
    if (next_steps < 1 || next_steps >= steps) {
        throw ContractError("shrink_timesteps: target " + std::to_string(next_steps) + " must be in [1, " +
                            std::to_string(steps) + ")");
    }
    std::vector<Tensor> parts;
    for (const auto& [start, size] : timestep_bins(steps, next_steps)) {
        parts.push_back(mean(slice(x, 0, start, size), 0, true));
    }
    return concat(parts, 0);
}

// Fits an input sequence to a timestep count: bin means when shrinking,
// nearest-step repetition when stretching.
inline Sequence resample_timesteps(const Sequence& x, std::size_t steps) {
    if (steps == x.size()) return x;
    if (steps < x.size()) return shrink_timesteps(x, steps);
    Sequence out;
    for (std::size_t t = 0; t < steps; ++t) out.push_back(x[t * x.size() / steps]);
    return out;
}

// Splits [B, T, ...] into T tensors [B, ...].
inline Sequence unstack_time(const Tensor& x) {
    const std::size_t steps = x.dim(1);
    Shape step_shape = x.shape();
    step_shape.erase(step_shape.begin() + 1);
    Sequence out;
    out.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) out.push_back(reshape(slice(x, 1, t, 1), step_shape));
    return out;
}

// Mean over time; for token tensors [B, N, d] also over tokens -> [B, d].
inline Tensor firing_rate(const Sequence& spikes) {
    const Tensor rate = sequence_mean(spikes);
    return rate.rank() == 3 ? mean(rate, 1) : rate;
}

// ---------------------------------------------------------------------------
// Motion bodies

enum class Variant { Mdst, MdstPlusPlus };

struct SpikingConfig {
    std::size_t input_dim = 64;
    std::size_t width = 32;         // output rate width
    std::size_t mlp_hidden = 64;    // MDST spiking-MLP hidden width
    std::size_t tokens = 4;         // SpikeFormer token count
    std::size_t mdst_timesteps = 8;
    StageSchedule schedule = StageSchedule::standard();
    LifParams lif;
    NormKind norm = NormKind::Batch;
};

// Three spiking linear layers over T steps; the output is the firing-rate
// average with every timestep weighted equally.
struct SpikingMlpBody {
    SpikingLinear l1, l2, l3;
    LifParams lif;
    std::size_t timesteps = 8;

    SpikingMlpBody() = default;
    SpikingMlpBody(ParameterSet& ps, const std::string& name, const SpikingConfig& cfg, Rng& rng)
        : l1(ps, name + ".l1", cfg.input_dim, cfg.mlp_hidden, cfg.norm, rng),
          l2(ps, name + ".l2", cfg.mlp_hidden, cfg.mlp_hidden, cfg.norm, rng),
          l3(ps, name + ".l3", cfg.mlp_hidden, cfg.width, cfg.norm, rng),
          lif(cfg.lif),
          timesteps(cfg.mdst_timesteps) {}

    std::vector<Tensor> operator()(const Sequence& input, std::span<const Tensor> thresholds, ForwardContext& ctx) {
        Sequence h = spiking_linear(input, l1, lif, ctx, thresholds);
        h = spiking_linear(h, l2, lif, ctx, {}, true);
        h = spiking_linear(h, l3, lif, ctx, {}, true);
        return {firing_rate(h)};
    }
};

// Residual spiking block: y = x + SSA(x), then z = y + MLP(y) with a
// two-layer spiking MLP. Returns the stream z and the MLP's output spikes.
struct SpikeFormerUnit {
    SpikingSelfAttention attention;
    SpikingLinear mlp1, mlp2;

    struct Output {
        Sequence stream;
        Sequence spikes;
    };

    SpikeFormerUnit() = default;
    SpikeFormerUnit(ParameterSet& ps, const std::string& name, std::size_t width, NormKind norm, Rng& rng)
        : attention(ps, name + ".ssa", width, norm, rng),
          mlp1(ps, name + ".mlp1", width, width, norm, rng),
          mlp2(ps, name + ".mlp2", width, width, norm, rng) {}

    Output operator()(const Sequence& x, const LifParams& p, ForwardContext& ctx) {
        const Sequence a = attention(x, p, ctx);
        Sequence y;
        y.reserve(x.size());
        for (std::size_t t = 0; t < x.size(); ++t) y.push_back(add(x[t], a[t]));
        Output out;
        out.spikes = spiking_linear(spiking_linear(y, mlp1, p, ctx), mlp2, p, ctx, {}, true);
        out.stream.reserve(y.size());
        for (std::size_t t = 0; t < y.size(); ++t) out.stream.push_back(add(y[t], out.spikes[t]));
        return out;
    }
};

// Spiking patch embedding into tokens, then m stages of SpikeFormer units
// with timesteps shrinking between stages. Stage i reports the firing rate of
// its last unit's output spikes: shrunk to T_{i+1} steps for i < m, over T_m
// for the last stage. The residual stream is what shrinks and feeds the next
// stage.
struct SpikeFormer {
    SpikingLinear embed;
    std::vector<std::vector<SpikeFormerUnit>> stages;
    StageSchedule schedule;
    LifParams lif;
    std::size_t tokens = 4, width = 32;

    SpikeFormer() = default;
    SpikeFormer(ParameterSet& ps, const std::string& name, const SpikingConfig& cfg, Rng& rng)
        : embed(ps, name + ".embed", cfg.input_dim, cfg.tokens * cfg.width, cfg.norm, rng),
          schedule(cfg.schedule),
          lif(cfg.lif),
          tokens(cfg.tokens),
          width(cfg.width) {
        if (schedule.empty()) throw ConfigError("SpikeFormer needs at least one stage");
        for (std::size_t i = 0; i < schedule.size(); ++i) {
            std::vector<SpikeFormerUnit> units;
            for (std::size_t u = 0; u < schedule[i].units; ++u) {
                units.emplace_back(ps, name + ".stage" + std::to_string(i) + ".unit" + std::to_string(u), width,
                                   cfg.norm, rng);
            }
            stages.push_back(std::move(units));
        }
    }

    std::size_t timesteps() const { return schedule[0].timesteps; }

    std::vector<Tensor> operator()(const Sequence& input, std::span<const Tensor> thresholds, ForwardContext& ctx) {
        if (input.size() != timesteps()) {
            throw DimensionError("SpikeFormer expects " + std::to_string(timesteps()) + " input steps, got " +
                                 std::to_string(input.size()));
        }
        const Sequence embedded = spiking_linear(input, embed, lif, ctx, thresholds);
        Sequence x;
        x.reserve(embedded.size());
        for (const auto& e : embedded) x.push_back(reshape(e, {e.dim(0), tokens, width}));
        std::vector<Tensor> rates;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            Sequence spikes;
            for (auto& unit : stages[i]) {
                auto out = unit(x, lif, ctx);
                x = std::move(out.stream);
                spikes = std::move(out.spikes);
            }
            if (i + 1 < stages.size()) {
                const std::size_t next = schedule[i + 1].timesteps;
                x = shrink_timesteps(x, next);
                spikes = shrink_timesteps(spikes, next);
            }
            rates.push_back(firing_rate(spikes));
        }
        return rates;
    }
};

// Either motion body behind one call surface.
struct MotionBody {
    Variant variant = Variant::Mdst;
    SpikingMlpBody mlp;
    SpikeFormer former;

    MotionBody() = default;
    MotionBody(ParameterSet& ps, const std::string& name, const SpikingConfig& cfg, Variant v, Rng& rng) : variant(v) {
        if (v == Variant::Mdst) {
            mlp = SpikingMlpBody(ps, name, cfg, rng);
        } else {
            former = SpikeFormer(ps, name, cfg, rng);
        }
    }

    std::size_t timesteps() const { return variant == Variant::Mdst ? mlp.timesteps : former.timesteps(); }
    std::size_t stage_count() const { return variant == Variant::Mdst ? 1 : former.stages.size(); }

    std::vector<Tensor> operator()(const Sequence& input, std::span<const Tensor> thresholds, ForwardContext& ctx) {
        return variant == Variant::Mdst ? mlp(input, thresholds, ctx) : former(input, thresholds, ctx);
    }
};

}  // namespace mdst
