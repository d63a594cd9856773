#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/ops.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

inline constexpr double kDefaultMargin = 1.0;

// Margin ranking in distance form, both anchor directions:
//   [gamma + d(av+, w+) - d(av-, w+)]_+ + [gamma + d(av+, w+) - d(av+, w-)]_+
// with d the squared Euclidean distance. Inputs are [B, W] (or [W]); the
// result is the batch mean. mask, when given, is [B] with 1 for anchors that
// have a negative and 0 otherwise; masked anchors still count in the mean.
inline Tensor triplet_loss(const Tensor& av_pos, const Tensor& w_pos, const Tensor& av_neg, const Tensor& w_neg,
                           double gamma = kDefaultMargin, const Tensor& mask = {}) {
    if (!(gamma > 0.0)) throw ConfigError("triplet margin must be positive");
    for (const Tensor* t : {&w_pos, &av_neg, &w_neg}) {
        if (t->shape() != av_pos.shape()) {
            throw DimensionError("triplet_loss shapes differ: " + to_string(av_pos.shape()) + " vs " +
                                 to_string(t->shape()));
        }
    }
    const Tensor d_pos = squared_distance(av_pos, w_pos);
    const Tensor hinge_av = relu(add_scalar(sub(d_pos, squared_distance(av_neg, w_pos)), gamma));
    const Tensor hinge_w = relu(add_scalar(sub(d_pos, squared_distance(av_pos, w_neg)), gamma));
    Tensor per = add(hinge_av, hinge_w);
    if (mask.defined()) per = mul(per, mask);
    return mean_all(per);
}

// Batch mean of per-sample squared distances.
inline Tensor projection_loss(const Tensor& o_av, const Tensor& o_w) {
    if (o_av.shape() != o_w.shape()) {
        throw DimensionError("projection_loss shapes differ: " + to_string(o_av.shape()) + " vs " +
                             to_string(o_w.shape()));
    }
    return mean_all(squared_distance(o_av, o_w));
}

inline Tensor reconstruction_loss(const Tensor& o_rec, const Tensor& o_w) { return projection_loss(o_rec, o_w); }

struct LossTerms {
    Tensor l_n, l_p, l_r;

    Tensor total() const { return add(add(l_n, l_p), l_r); }
};

// Weighted stage sum; weights default to 1 per stage.
inline Tensor stage_total(const std::vector<Tensor>& stage_losses, const std::vector<double>& weights = {}) {
    if (stage_losses.empty()) throw ContractError("stage_total needs at least one stage loss");
    if (!weights.empty() && weights.size() != stage_losses.size()) {
        throw ConfigError("stage weight count " + std::to_string(weights.size()) + " differs from stage count " +
                          std::to_string(stage_losses.size()));
    }
    Tensor acc;
    for (std::size_t i = 0; i < stage_losses.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        if (w < 0.0) throw ConfigError("stage weights must be non-negative");
        const Tensor term = w == 1.0 ? stage_losses[i] : scale(stage_losses[i], w);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

// HM = 2 U S / (U + S); 0 when either accuracy is 0.
inline double harmonic_mean(double seen, double unseen) {
    if (seen <= 0.0 || unseen <= 0.0) return 0.0;
    return 2.0 * unseen * seen / (unseen + seen);
}

enum class EvalMode { Zsl, Gzsl };

// Accuracies in percent.
struct EvalReport {
    EvalMode mode = EvalMode::Zsl;
    double seen_acc = 0.0;
    double unseen_acc = 0.0;
    double hm = 0.0;
    double zsl_acc = 0.0;
};

inline EvalReport gzsl_report(double seen, double unseen) {
    return {EvalMode::Gzsl, seen, unseen, harmonic_mean(seen, unseen), 0.0};
}

}  // namespace mdst
