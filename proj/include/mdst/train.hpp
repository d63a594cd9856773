#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdst/data.hpp"
#include "mdst/errors.hpp"
#include "mdst/events.hpp"
#include "mdst/losses.hpp"
#include "mdst/model.hpp"
#include "mdst/ops.hpp"
#include "mdst/random.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Adam with bias correction.
class Adam {
   public:
    Adam(const NamedTensorList& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& [_, p] : params) {
            params_.push_back(p);
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto w = p.mutable_values();
            for (std::size_t k = 0; k < w.size(); ++k) {
                m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g[k];
                v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g[k] * g[k];
                w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const { return t_; }

   private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

// Dataset tensors stacked for batching, with event grids computed once.
struct PreparedData {
    Tensor audio, visual, events;  // [N, T, D]
    std::vector<std::size_t> labels;
    std::vector<std::size_t> sample_ids;

    std::size_t size() const { return labels.size(); }

    Batch gather(const std::vector<std::size_t>& rows) const {
        Batch b;
        b.audio = index_select(audio, rows);
        b.visual = index_select(visual, rows);
        b.events = index_select(events, rows);
        for (auto r : rows) b.labels.push_back(labels[r]);
        return b;
    }
};

inline PreparedData prepare(const Dataset& ds, const std::vector<std::size_t>& ids, double contrast_threshold) {
    if (ids.empty()) throw DataError("cannot prepare an empty sample list");
    const std::size_t T = ds.frames(), da = ds.audio_dim(), dv = ds.visual_dim();
    std::vector<double> a, v, e;
    a.reserve(ids.size() * T * da);
    v.reserve(ids.size() * T * dv);
    e.reserve(ids.size() * T * dv);
    PreparedData out;
    for (auto id : ids) {
        const Sample& s = ds.samples.at(id);
        const auto av = s.audio.values(), vv = s.visual.values();
        a.insert(a.end(), av.begin(), av.end());
        v.insert(v.end(), vv.begin(), vv.end());
        const auto grid = feature_egm(s.visual, contrast_threshold);
        const auto ev = grid.tensor().values();
        e.insert(e.end(), ev.begin(), ev.end());
        out.labels.push_back(s.class_id);
        out.sample_ids.push_back(id);
    }
    out.audio = Tensor({ids.size(), T, da}, std::move(a));
    out.visual = Tensor({ids.size(), T, dv}, std::move(v));
    out.events = Tensor({ids.size(), T, dv}, std::move(e));
    return out;
}

inline Tensor word_matrix(const Dataset& ds) {
    const std::size_t w = ds.word_dim();
    std::vector<double> out;
    out.reserve(ds.classes.size() * w);
    for (const auto& c : ds.classes) out.insert(out.end(), c.word.begin(), c.word.end());
    return Tensor({ds.classes.size(), w}, std::move(out));
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double l_n = 0.0, l_p = 0.0, l_r = 0.0, l_total = 0.0;
    std::vector<double> per_stage;

    nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"L_n", l_n}, {"L_p", l_p}, {"L_r", l_r}, {"L_total", l_total},
                {"per_stage", per_stage}};
    }
};

enum class Algorithm {
    Mdst,        // loss on the final rate output only
    MdstStaged,  // weighted sum of per-stage losses
};

struct TrainOptions {
    std::uint64_t seed = 0;
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
    Model model;
    std::vector<EpochMetrics> history;
};

namespace detail {

// One negative per anchor, uniform over batch samples of another class.
// Anchors without such a sample get mask 0.
inline std::pair<std::vector<std::size_t>, Tensor> draw_negatives(const std::vector<std::size_t>& labels, Rng& rng) {
    const std::size_t b = labels.size();
    std::vector<std::size_t> neg(b);
    std::vector<double> mask(b, 1.0);
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < b; ++i) {
        pool.clear();
        for (std::size_t j = 0; j < b; ++j) {
            if (labels[j] != labels[i]) pool.push_back(j);
        }
        if (pool.empty()) {
            neg[i] = i;
            mask[i] = 0.0;
        } else {
            neg[i] = pool[rng.index(pool.size())];
        }
    }
    return {neg, Tensor({b}, std::move(mask))};
}

// Contiguous batches over a shuffled order; a trailing singleton joins the
// previous batch so batch normalization always sees two samples.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
    }
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back().front());
        out.pop_back();
    }
    return out;
}

}  // namespace detail

struct StepLosses {
    Tensor total;
    std::vector<LossTerms> stages;
};

// Losses of one forward pass. Algorithm::Mdst scores the final stage only;
// MdstStaged sums every stage with the configured weights.
inline StepLosses batch_losses(const ForwardResult& fwd, const Tensor& o_w, const std::vector<std::size_t>& labels,
                               const ModelConfig& cfg, Algorithm alg, Rng& rng) {
    const auto [neg, mask] = detail::draw_negatives(labels, rng);
    const Tensor w_neg = index_select(o_w, neg);
    StepLosses out;
    std::vector<Tensor> totals;
    const std::size_t first = alg == Algorithm::Mdst ? fwd.stages.size() - 1 : 0;
    for (std::size_t i = first; i < fwd.stages.size(); ++i) {
        const auto& s = fwd.stages[i];
        LossTerms t;
        t.l_n = triplet_loss(s.o_av, o_w, index_select(s.o_av, neg), w_neg, cfg.gamma, mask);
        t.l_p = projection_loss(s.o_av, o_w);
        t.l_r = reconstruction_loss(s.o_rec, o_w);
        totals.push_back(t.total());
        out.stages.push_back(std::move(t));
    }
    const bool weighted = alg == Algorithm::MdstStaged && !cfg.stage_weights.empty();
    out.total = stage_total(totals, weighted ? cfg.stage_weights : std::vector<double>{});
    return out;
}

inline TrainResult train(const Dataset& ds, const ModelConfig& cfg, Algorithm alg, const TrainOptions& opts = {}) {
    if (ds.splits.train.empty()) throw DataError("dataset has no training samples");
    const PreparedData data = prepare(ds, ds.splits.train, cfg.contrast_threshold);
    const Tensor words = word_matrix(ds);
    if (words.dim(1) != cfg.word_dim) {
        throw DimensionError("class vectors are " + std::to_string(words.dim(1)) + "-d, model expects " +
                             std::to_string(cfg.word_dim));
    }
    TrainResult result{Model(cfg, ds.audio_dim(), ds.visual_dim(), opts.seed), {}};
    Model& model = result.model;
    Adam adam(model.parameters().parameters(), cfg.lr);
    Rng root(opts.seed);
    Rng order_rng = root.fork(101), negative_rng = root.fork(102), dropout_rng = root.fork(103);

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        EpochMetrics m;
        m.epoch = epoch;
        std::size_t seen = 0;
        for (const auto& rows : detail::make_batches(order, cfg.batch_size)) {
            const Batch batch = data.gather(rows);
            Tape tape;
            TapeScope scope(tape);
            ForwardContext ctx{true, &dropout_rng, false};
            const ForwardResult fwd = model.forward(batch, ctx);
            const Tensor o_w = model.project_words(index_select(words, batch.labels), ctx);
            const StepLosses losses = batch_losses(fwd, o_w, batch.labels, cfg, alg, negative_rng);
            model.parameters().zero_grad();
            tape.backward(losses.total);
            adam.step();

            const double w = static_cast<double>(rows.size());
            const bool weighted = alg == Algorithm::MdstStaged && !cfg.stage_weights.empty();
            if (m.per_stage.empty()) m.per_stage.assign(losses.stages.size(), 0.0);
            for (std::size_t i = 0; i < losses.stages.size(); ++i) {
                const double sw = weighted ? cfg.stage_weights[i] : 1.0;
                const auto& t = losses.stages[i];
                m.l_n += w * sw * t.l_n.item();
                m.l_p += w * sw * t.l_p.item();
                m.l_r += w * sw * t.l_r.item();
                m.per_stage[i] += w * t.total().item();
            }
            m.l_total += w * losses.total.item();
            seen += rows.size();
        }
        const double inv = 1.0 / static_cast<double>(seen);
        m.l_n *= inv;
        m.l_p *= inv;
        m.l_r *= inv;
        m.l_total *= inv;
        for (auto& s : m.per_stage) s *= inv;
        if (opts.on_epoch) opts.on_epoch(m);
        result.history.push_back(std::move(m));
    }
    return result;
}

// Algorithm 1: EGM, encoders, RJLU, spiking body, fusion, loss on the rate
// output.
inline TrainResult train_mdst(const Dataset& ds, ModelConfig cfg, const TrainOptions& opts = {}) {
    cfg.variant = Variant::Mdst;
    return train(ds, cfg, Algorithm::Mdst, opts);
}

// Algorithm 2: per-stage fusion and losses over the shrinking schedule.
inline TrainResult train_mdstpp(const Dataset& ds, ModelConfig cfg, const TrainOptions& opts = {}) {
    cfg.variant = Variant::MdstPlusPlus;
    if (cfg.stages.empty()) throw ConfigError("MDST++ needs at least one stage");
    return train(ds, cfg, Algorithm::MdstStaged, opts);
}

// Final-stage embeddings of the given samples in eval mode.
inline Tensor embed_samples(Model& model, const Dataset& ds, const std::vector<std::size_t>& ids) {
    NoGradScope no_grad;
    const PreparedData data = prepare(ds, ids, model.config().contrast_threshold);
    ForwardContext ctx{false, nullptr, false};
    std::vector<Tensor> parts;
    const std::size_t chunk = model.config().batch_size;
    for (std::size_t i = 0; i < data.size(); i += chunk) {
        std::vector<std::size_t> rows;
        for (std::size_t r = i; r < std::min(data.size(), i + chunk); ++r) rows.push_back(r);
        parts.push_back(model.forward(data.gather(rows), ctx).stages.back().o_av);
    }
    return concat(parts, 0);
}

inline Tensor embed_classes(Model& model, const Dataset& ds) {
    NoGradScope no_grad;
    ForwardContext ctx{false, nullptr, false};
    return model.project_words(word_matrix(ds), ctx);
}

// Nearest candidate class by squared distance for each row of o_av.
inline std::vector<std::size_t> nearest_class(const Tensor& o_av, const Tensor& o_w,
                                              const std::vector<std::size_t>& candidates) {
    const std::size_t n = o_av.dim(0), w = o_av.dim(1);
    auto a = o_av.values();
    auto c = o_w.values();
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (auto cls : candidates) {
            double d = 0.0;
            for (std::size_t k = 0; k < w; ++k) {
                const double diff = a[i * w + k] - c[cls * w + k];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                out[i] = cls;
            }
        }
    }
    return out;
}

// Mean over classes of per-class accuracy, in percent.
inline double class_averaged_accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> per;  // class -> (correct, total)
    for (std::size_t i = 0; i < truth.size(); ++i) {
        auto& [ok, total] = per[truth[i]];
        ok += truth[i] == pred[i];
        ++total;
    }
    if (per.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& [_, p] : per) acc += static_cast<double>(p.first) / static_cast<double>(p.second);
    return 100.0 * acc / static_cast<double>(per.size());
}

// ZSL: unseen test samples against unseen classes. GZSL: seen and unseen
// test samples against every class, summarized by the harmonic mean.
inline EvalReport evaluate(Model& model, const Dataset& ds, EvalMode mode) {
    const auto& sp = ds.splits;
    if (sp.test_unseen.empty()) throw DataError("dataset has no test_unseen split");
    if (mode == EvalMode::Gzsl && sp.test_seen.empty()) throw DataError("dataset has no test_seen split");
    const Tensor o_w = embed_classes(model, ds);
    auto labels_of = [&](const std::vector<std::size_t>& ids) {
        std::vector<std::size_t> out;
        for (auto id : ids) out.push_back(ds.samples[id].class_id);
        return out;
    };
    EvalReport report;
    report.mode = mode;
    if (mode == EvalMode::Zsl) {
        std::set<std::size_t> cand;
        for (auto id : sp.test_unseen) cand.insert(ds.samples[id].class_id);
        const auto pred = nearest_class(embed_samples(model, ds, sp.test_unseen), o_w, {cand.begin(), cand.end()});
        report.zsl_acc = class_averaged_accuracy(labels_of(sp.test_unseen), pred);
        return report;
    }
    std::vector<std::size_t> all(ds.classes.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const double s =
        class_averaged_accuracy(labels_of(sp.test_seen), nearest_class(embed_samples(model, ds, sp.test_seen), o_w, all));
    const double u = class_averaged_accuracy(labels_of(sp.test_unseen),
                                             nearest_class(embed_samples(model, ds, sp.test_unseen), o_w, all));
    return gzsl_report(s, u);
}

inline nlohmann::json to_json(const EvalReport& r) {
    if (r.mode == EvalMode::Zsl) return {{"split", "zsl"}, {"zsl_acc", r.zsl_acc}};
    return {{"split", "gzsl"}, {"S", r.seen_acc}, {"U", r.unseen_acc}, {"HM", r.hm}};
}

}  // namespace mdst
