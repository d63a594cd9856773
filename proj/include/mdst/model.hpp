#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdst/errors.hpp"
#include "mdst/events.hpp"
#include "mdst/fusion.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/semantic.hpp"
#include "mdst/serialize.hpp"
#include "mdst/spiking.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Motion body choice; Auto follows the variant.
enum class BodyKind { Auto, SpikingMlp, SpikeFormer };

struct DropoutProfile {
    double enc, dec, wproj;
};

inline DropoutProfile dropout_profile(const std::string& name) {
    if (name == "vggsound") return {0.20, 0.25, 0.1};
    if (name == "ucf") return {0.25, 0.20, 0.1};
    if (name == "activitynet") return {0.10, 0.15, 0.1};
    throw ConfigError("unknown profile '" + name + "' (expected vggsound, ucf or activitynet)");
}

struct ModelConfig {
    Variant variant = Variant::MdstPlusPlus;
    BodyKind body = BodyKind::Auto;

    std::size_t enc_hidden = 512;   // T_hid
    std::size_t emb = 512;
    std::size_t proj_hidden = 512;
    std::size_t word_dim = 300;     // T_fin
    std::size_t word_hidden = 64;   // T_proj
    std::size_t heads = 8;
    std::size_t head_dim = 64;

    std::size_t snn_hidden = 512;
    std::size_t tokens = 4;
    LifParams lif;
    StageSchedule stages = StageSchedule::standard();
    std::size_t mdst_timesteps = 8;
    std::vector<double> stage_weights;  // empty: all 1
    NormKind snn_norm = NormKind::Batch;

    bool motion = true;             // false: semantics-only ablation
    bool dynamic_threshold = true;
    double contrast_threshold = kDefaultContrastThreshold;

    double gamma = 1.0;
    double lr = 1e-4;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;

    std::string profile = "ucf";
    DropoutProfile dropout = dropout_profile("ucf");

    void apply_profile(const std::string& name) {
        dropout = dropout_profile(name);
        profile = name;
    }

    // Reduced widths, a larger step size, a lower firing threshold and a margin
    // matched to squared distances in word space, for CPU-scale experiments.
    static ModelConfig desk() {
        ModelConfig c;
        c.enc_hidden = 64;
        c.emb = 32;
        c.proj_hidden = 64;
        c.heads = 4;
        c.head_dim = 8;
        c.snn_hidden = 64;
        c.tokens = 4;
        c.lif.v_th_init = 0.5;
        c.gamma = 200.0;
        c.lr = 3e-3;
        c.epochs = 30;
        c.batch_size = 16;
        return c;
    }

    BodyKind resolved_body() const {
        if (body != BodyKind::Auto) return body;
        return variant == Variant::Mdst ? BodyKind::SpikingMlp : BodyKind::SpikeFormer;
    }

    std::size_t stage_count() const {
        if (!motion || resolved_body() == BodyKind::SpikingMlp) return 1;
        return stages.size();
    }

    void validate() const {
        if (enc_hidden == 0 || emb == 0 || proj_hidden == 0 || word_dim == 0 || word_hidden == 0 || snn_hidden == 0 ||
            tokens == 0) {
            throw ConfigError("model widths must be positive");
        }
        if (heads == 0 || heads * head_dim != emb) {
            throw ConfigError("heads x head_dim = " + std::to_string(heads) + " x " + std::to_string(head_dim) +
                              " must equal emb " + std::to_string(emb));
        }
        lif.validate();
        if (stages.empty()) throw ConfigError("stage schedule needs at least one stage");
        if (mdst_timesteps < 1) throw ConfigError("mdst_timesteps must be >= 1");
        if (!stage_weights.empty() && stage_weights.size() != stage_count()) {
            throw ConfigError("stage_weights has " + std::to_string(stage_weights.size()) + " entries for " +
                              std::to_string(stage_count()) + " stages");
        }
        for (double w : stage_weights) {
            if (w < 0.0) throw ConfigError("stage weights must be non-negative");
        }
        if (!(contrast_threshold > 0.0)) throw ConfigError("contrast_threshold must be positive");
        if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
        if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
        if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
        for (double d : {dropout.enc, dropout.dec, dropout.wproj}) {
            if (!(d >= 0.0 && d < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
        }
    }

    SpikingConfig spiking(std::size_t input_dim) const {
        SpikingConfig s;
        s.input_dim = input_dim;
        s.width = emb;
        s.mlp_hidden = snn_hidden;
        s.tokens = tokens;
        s.mdst_timesteps = mdst_timesteps;
        s.schedule = stages;
        s.lif = lif;
        s.norm = snn_norm;
        return s;
    }
};

inline std::string to_string(Variant v) { return v == Variant::Mdst ? "mdst" : "mdstpp"; }
inline std::string to_string(BodyKind b) {
    switch (b) {
        case BodyKind::SpikingMlp: return "mlp";
        case BodyKind::SpikeFormer: return "spikeformer";
        default: return "auto";
    }
}
inline std::string to_string(NormKind n) {
    switch (n) {
        case NormKind::Batch: return "batch";
        case NormKind::Layer: return "layer";
        default: return "none";
    }
}

inline Variant parse_variant(const std::string& s) {
    if (s == "mdst") return Variant::Mdst;
    if (s == "mdstpp") return Variant::MdstPlusPlus;
    throw ConfigError("unknown model '" + s + "' (expected mdst or mdstpp)");
}
inline BodyKind parse_body(const std::string& s) {
    if (s == "auto") return BodyKind::Auto;
    if (s == "mlp") return BodyKind::SpikingMlp;
    if (s == "spikeformer") return BodyKind::SpikeFormer;
    throw ConfigError("unknown body '" + s + "' (expected auto, mlp or spikeformer)");
}
inline NormKind parse_norm(const std::string& s) {
    if (s == "batch") return NormKind::Batch;
    if (s == "layer") return NormKind::Layer;
    if (s == "none") return NormKind::None;
    throw ConfigError("unknown snn_norm '" + s + "' (expected batch, layer or none)");
}

inline nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.stages.stages()) stages.push_back({s.timesteps, s.units});
    return {{"model", to_string(c.variant)},
            {"body", to_string(c.body)},
            {"enc_hidden", c.enc_hidden},
            {"emb", c.emb},
            {"proj_hidden", c.proj_hidden},
            {"word_dim", c.word_dim},
            {"word_hidden", c.word_hidden},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"snn_hidden", c.snn_hidden},
            {"tokens", c.tokens},
            {"tau_m", c.lif.tau_m},
            {"resistance", c.lif.resistance},
            {"v_reset", c.lif.v_reset},
            {"v_th_init", c.lif.v_th_init},
            {"surrogate_alpha", c.lif.surrogate_alpha},
            {"stages", stages},
            {"mdst_timesteps", c.mdst_timesteps},
            {"stage_weights", c.stage_weights},
            {"snn_norm", to_string(c.snn_norm)},
            {"motion", c.motion},
            {"dynamic_threshold", c.dynamic_threshold},
            {"contrast_threshold", c.contrast_threshold},
            {"gamma", c.gamma},
            {"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"profile", c.profile},
            {"dropout_enc", c.dropout.enc},
            {"dropout_dec", c.dropout.dec},
            {"dropout_wproj", c.dropout.wproj}};
}

// Stacked inputs for a set of samples: audio and visual [N, T, D] plus the
// visual event grid [N, T, D_v].
struct Batch {
    Tensor audio, visual, events;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct StageOutput {
    Tensor o_av;   // [B, word_dim]
    Tensor o_rec;  // [B, word_dim]
};

struct ForwardResult {
    std::vector<StageOutput> stages;
    RjluTrace semantic;
    std::vector<Tensor> rates_a, rates_v;
    std::vector<Tensor> thresholds;
};

class Model {
   public:
    Model(const ModelConfig& cfg, std::size_t audio_dim, std::size_t visual_dim, std::uint64_t seed)
        : cfg_(cfg), audio_dim_(audio_dim), visual_dim_(visual_dim) {
        cfg_.validate();
        Rng rng(seed);
        enc_a_ = Encoder(ps_, "enc_a", {audio_dim, cfg_.enc_hidden, cfg_.emb, cfg_.dropout.enc}, rng);
        enc_v_ = Encoder(ps_, "enc_v", {visual_dim, cfg_.enc_hidden, cfg_.emb, cfg_.dropout.enc}, rng);
        rjlu_ = Rjlu(ps_, "rjlu", cfg_.emb, rng);
        if (cfg_.motion) {
            if (audio_dim != visual_dim) {
                throw DimensionError("DAB needs equal audio and visual widths, got " + std::to_string(audio_dim) +
                                     " and " + std::to_string(visual_dim));
            }
            const Variant body =
                cfg_.resolved_body() == BodyKind::SpikingMlp ? Variant::Mdst : Variant::MdstPlusPlus;
            dab_ = Dab(ps_, "dab");
            body_a_ = MotionBody(ps_, "snn_a", cfg_.spiking(audio_dim), body, rng);
            body_v_ = MotionBody(ps_, "snn_v", cfg_.spiking(visual_dim), body, rng);
        }
        crm_a_ = Crm(ps_, "crm_a", cfg_.emb, rng);
        crm_v_ = Crm(ps_, "crm_v", cfg_.emb, rng);
        cmt_ = CrossModalTransformer(ps_, "cmt", cfg_.emb, cfg_.heads, rng);
        av_proj_ = ProjectionHead(ps_, "av_proj", cfg_.emb, cfg_.proj_hidden, cfg_.word_dim, cfg_.dropout.dec, rng);
        av_rec_ = ProjectionHead(ps_, "av_rec", cfg_.word_dim, cfg_.proj_hidden, cfg_.word_dim, cfg_.dropout.dec, rng);
        word_proj_ =
            ProjectionHead(ps_, "word_proj", cfg_.word_dim, cfg_.word_hidden, cfg_.word_dim, cfg_.dropout.wproj, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterSet& parameters() { return ps_; }
    const ParameterSet& parameters() const { return ps_; }
    std::size_t audio_dim() const { return audio_dim_; }
    std::size_t visual_dim() const { return visual_dim_; }
    std::size_t stage_count() const { return cfg_.stage_count(); }

    Encoder& encoder_a() { return enc_a_; }
    Encoder& encoder_v() { return enc_v_; }
    Rjlu& rjlu() { return rjlu_; }
    MotionBody& body_a() { return body_a_; }
    MotionBody& body_v() { return body_v_; }
    Crm& crm_a() { return crm_a_; }
    Crm& crm_v() { return crm_v_; }
    CrossModalTransformer& cmt() { return cmt_; }
    ProjectionHead& av_proj() { return av_proj_; }
    ProjectionHead& av_rec() { return av_rec_; }
    ProjectionHead& word_proj() { return word_proj_; }

    ForwardResult forward(const Batch& batch, ForwardContext& ctx) {
        const std::size_t b = batch.size();
        if (batch.audio.rank() != 3 || batch.audio.dim(0) != b || batch.visual.dim(0) != b) {
            throw DimensionError("batch tensors must be [B, T, D] with B = " + std::to_string(b));
        }
        ForwardResult out;
        out.semantic = rjlu_.run(enc_a_(batch.audio, ctx), enc_v_(batch.visual, ctx));

        if (cfg_.motion) {
            const std::size_t steps = body_v_.timesteps();
            const Tensor e_a = dab_(batch.audio, batch.events);
            const Sequence seq_v = resample_timesteps(unstack_time(batch.events), steps);
            const Sequence seq_a = resample_timesteps(unstack_time(e_a), steps);
            if (cfg_.dynamic_threshold) out.thresholds = thresholds(out.semantic, batch.events, steps);
            out.rates_v = body_v_(seq_v, out.thresholds, ctx);
            out.rates_a = body_a_(seq_a, out.thresholds, ctx);
        } else {
            out.rates_v = {Tensor::zeros({b, cfg_.emb})};
            out.rates_a = out.rates_v;
        }

        for (std::size_t i = 0; i < out.rates_v.size(); ++i) {
            const Tensor p_v = crm_v_(out.semantic.sem_v, out.rates_v[i]);
            const Tensor p_a = crm_a_(out.semantic.sem_a, out.rates_a[i]);
            const Tensor f = cmt_(p_v, p_a);
            StageOutput so;
            so.o_av = av_proj_(f, ctx);
            so.o_rec = av_rec_(so.o_av, ctx);
            out.stages.push_back(std::move(so));
        }
        return out;
    }

    // Class word vectors [C, word_dim] -> O_w.
    Tensor project_words(const Tensor& words, ForwardContext& ctx) { return word_proj_(words, ctx); }

    // Frame feeding SNN step tau when `frames` are fitted to `steps`: the last
    // frame of the step's bin, or the repeated frame when stretching.
    static std::size_t frame_for_step(std::size_t tau, std::size_t steps, std::size_t frames) {
        if (steps > frames) return tau * frames / steps;
        const auto bins = timestep_bins(frames, steps);
        return bins[tau].first + bins[tau].second - 1;
    }

    // Per-step thresholds [B, 1] for the first spiking layer, starting from
    // v_th_init and modulated by the fused semantics and events of the frame
    // each step reads.
    std::vector<Tensor> thresholds(const RjluTrace& trace, const Tensor& events, std::size_t steps) const {
        const std::size_t b = events.dim(0), frames = events.dim(1);
        std::vector<Tensor> out;
        Tensor prev = Tensor::full({b, 1}, cfg_.lif.v_th_init);
        for (std::size_t tau = 0; tau < steps; ++tau) {
            const std::size_t f = frame_for_step(tau, steps, frames);
            const Tensor ev = reshape(slice(events, 1, f, 1), {b, events.dim(2)});
            prev = dynamic_threshold(prev, trace.fused[f], ev, cfg_.lif);
            out.push_back(prev);
        }
        return out;
    }

    void save(const std::filesystem::path& dir, const nlohmann::json& meta = {}) const {
        std::filesystem::create_directories(dir);
        save_named_tensors(dir, ps_.all());
        nlohmann::json m = meta;
        m["audio_dim"] = audio_dim_;
        m["visual_dim"] = visual_dim_;
        m["config"] = to_json(cfg_);
        std::ofstream os(dir / "model.json");
        if (!os) throw DataError("cannot write " + (dir / "model.json").string());
        os << m.dump(2) << "\n";
    }

    void load_weights(const std::filesystem::path& dir) { ps_.assign(load_named_tensors(dir)); }

   private:
    ModelConfig cfg_;
    std::size_t audio_dim_, visual_dim_;
    ParameterSet ps_;
    Encoder enc_a_, enc_v_;
    Rjlu rjlu_;
    Dab dab_;
    MotionBody body_a_, body_v_;
    Crm crm_a_, crm_v_;
    CrossModalTransformer cmt_;
    ProjectionHead av_proj_, av_rec_, word_proj_;
};

}  // namespace mdst
