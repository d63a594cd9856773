#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "mdst/data.hpp"
#include "mdst/gradsuite.hpp"
#include "mdst/losses.hpp"
#include "mdst/random.hpp"
#include "mdst/train.hpp"

using namespace mdst;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double sd = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.mutable_values()) v = rng.normal() * sd;
    return t;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

SyntheticSpec tiny_spec() {
    SyntheticSpec s;
    s.n_seen_classes = 4;
    s.n_unseen_classes = 2;
    s.samples_per_class = 8;
    s.frames = 6;
    s.feature_dim = 12;
    s.attributes = 3;
    return s;
}

ModelConfig tiny_config() {
    ModelConfig c = ModelConfig::desk();
    c.enc_hidden = 12;
    c.emb = 8;
    c.proj_hidden = 12;
    c.word_hidden = 8;
    c.heads = 2;
    c.head_dim = 4;
    c.snn_hidden = 12;
    c.tokens = 2;
    c.stages = StageSchedule({{4, 1}, {3, 1}, {2, 1}});
    c.mdst_timesteps = 4;
    c.epochs = 5;
    c.batch_size = 8;
    return c;
}

std::vector<std::vector<double>> parameter_values(const Model& m) {
    std::vector<std::vector<double>> out;
    for (const auto& [_, t] : m.parameters().parameters()) out.push_back(t.to_vector());
    return out;
}

}  // namespace

TEST(TripletLoss, InactiveHingeAndFullViolation) {
    const double gamma = 2.0;
    // d(pos) = 0 and both negatives at squared distance gamma + 1.
    const Tensor av = Tensor({1, 2}, {0.0, 0.0}), w = Tensor({1, 2}, {0.0, 0.0});
    const double far = std::sqrt(gamma + 1.0);
    const Tensor av_neg = Tensor({1, 2}, {far, 0.0}), w_neg = Tensor({1, 2}, {0.0, far});
    EXPECT_EQ(triplet_loss(av, w, av_neg, w_neg, gamma).item(), 0.0);
    // Negatives coincide with positives: both hinges sit at gamma.
    EXPECT_DOUBLE_EQ(triplet_loss(av, w, av, w, gamma).item(), 2.0 * gamma);
}

TEST(TripletLoss, MatchesScalarHingeEvaluator) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t b = 1 + rng.index(5), d = 1 + rng.index(6);
        const double gamma = rng.uniform(0.1, 5.0);
        const Tensor ap = random_tensor({b, d}, rng), wp = random_tensor({b, d}, rng);
        const Tensor an = random_tensor({b, d}, rng), wn = random_tensor({b, d}, rng);
        double expected = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            auto row = [&](const Tensor& t) { return t.values().subspan(i * d, d); };
            const double pos = sq_dist(row(ap), row(wp));
            expected += std::max(0.0, gamma + pos - sq_dist(row(an), row(wp)));
            expected += std::max(0.0, gamma + pos - sq_dist(row(ap), row(wn)));
        }
        expected /= static_cast<double>(b);
        EXPECT_NEAR(triplet_loss(ap, wp, an, wn, gamma).item(), expected, 1e-12);
    }
}

TEST(TripletLoss, MaskedAnchorsContributeZero) {
    const Tensor z = Tensor::zeros({2, 3});
    const Tensor mask = Tensor::vector({1.0, 0.0});
    EXPECT_DOUBLE_EQ(triplet_loss(z, z, z, z, 1.5, mask).item(), 1.5);
    EXPECT_THROW(triplet_loss(z, z, z, Tensor::zeros({2, 4})), DimensionError);
    EXPECT_THROW(triplet_loss(z, z, z, z, 0.0), ConfigError);
}

TEST(ProjectionLoss, UnitOffsetAtWordWidth) {
    const Tensor w = Tensor::zeros({3, 300});
    const Tensor av = Tensor::ones({3, 300});
    EXPECT_DOUBLE_EQ(projection_loss(av, w).item(), 300.0);
    EXPECT_EQ(projection_loss(w, w).item(), 0.0);
    EXPECT_THROW(projection_loss(w, Tensor::zeros({3, 299})), DimensionError);
}

TEST(LossProperty, TotalIsComponentSumAndTermsAreNonNegative) {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t b = 1 + rng.index(4), d = 1 + rng.index(8);
        const Tensor av = random_tensor({b, d}, rng), w = random_tensor({b, d}, rng), rec = random_tensor({b, d}, rng);
        LossTerms t{triplet_loss(av, w, random_tensor({b, d}, rng), random_tensor({b, d}, rng), rng.uniform(0.1, 3.0)),
                    projection_loss(av, w), reconstruction_loss(rec, w)};
        EXPECT_GE(t.l_n.item(), 0.0);
        EXPECT_GE(t.l_p.item(), 0.0);
        EXPECT_GE(t.l_r.item(), 0.0);
        EXPECT_NEAR(t.total().item(), t.l_n.item() + t.l_p.item() + t.l_r.item(), 1e-12);
    }
    const Tensor zero = Tensor::scalar(0.0);
    EXPECT_EQ((LossTerms{zero, zero, zero}.total().item()), 0.0);
}

TEST(StageTotal, WeightsAndValidation) {
    const std::vector<Tensor> parts = {Tensor::scalar(1.5), Tensor::scalar(2.0), Tensor::scalar(0.25)};
    EXPECT_DOUBLE_EQ(stage_total(parts).item(), 3.75);
    EXPECT_DOUBLE_EQ(stage_total(parts, {1, 1, 1}).item(), 3.75);
    EXPECT_DOUBLE_EQ(stage_total(parts, {2, 0, 4}).item(), 4.0);
    EXPECT_THROW(stage_total({}), ContractError);
    EXPECT_THROW(stage_total(parts, {1, 1}), ConfigError);
    EXPECT_THROW(stage_total(parts, {1, -1, 1}), ConfigError);
}

TEST(HarmonicMean, TableValueAndDegenerateCases) {
    EXPECT_NEAR(harmonic_mean(52.41, 24.49), 33.38, 0.01);
    EXPECT_EQ(harmonic_mean(40.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(harmonic_mean(37.5, 37.5), 37.5);
}

TEST(HarmonicMeanProperty, SymmetricAndBounded) {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const double s = rng.uniform(0.0, 100.0), u = rng.uniform(0.0, 100.0);
        EXPECT_EQ(harmonic_mean(s, u), harmonic_mean(u, s));
        EXPECT_LE(harmonic_mean(s, u), 2.0 * std::min(s, u) + 1e-12);
        EXPECT_LE(harmonic_mean(s, u), std::max(s, u) + 1e-12);
    }
}

TEST(NearestClassProperty, InvariantToCommonPositiveScale) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor av = random_tensor({6, 5}, rng), w = random_tensor({4, 5}, rng);
        const double k = std::exp(rng.uniform(-3.0, 3.0));
        const std::vector<std::size_t> cand = {0, 1, 2, 3};
        EXPECT_EQ(nearest_class(av, w, cand), nearest_class(scale(av, k), scale(w, k), cand));
    }
}

TEST(NearestClass, RestrictsToCandidates) {
    const Tensor av = Tensor::matrix({{0.0, 0.0}, {5.0, 5.0}});
    const Tensor w = Tensor::matrix({{0.1, 0.0}, {5.0, 5.1}, {1.0, 1.0}});
    EXPECT_EQ(nearest_class(av, w, {0, 1, 2}), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(nearest_class(av, w, {2}), (std::vector<std::size_t>{2, 2}));
}

TEST(ClassAveragedAccuracy, AveragesPerClass) {
    // Class 0: 3 of 4 right; class 1: 0 of 1 right.
    EXPECT_DOUBLE_EQ(class_averaged_accuracy({0, 0, 0, 0, 1}, {0, 0, 0, 1, 0}), 37.5);
    EXPECT_EQ(class_averaged_accuracy({}, {}), 0.0);
}

TEST(TrainingGradients, FiniteDifferencesAgree) {
    for (const auto& c : run_gradcheck("training")) EXPECT_LT(c.report.max_rel_error(), 1e-4) << c.name;
}

TEST(Training, ZeroLearningRateLeavesWeightsUnchanged) {
    const Dataset ds = generate_synthetic(tiny_spec(), 1);
    ModelConfig cfg = tiny_config();
    cfg.lr = 0.0;
    cfg.epochs = 1;
    TrainOptions opts;
    opts.seed = 3;
    const TrainResult r = train_mdst(ds, cfg, opts);
    cfg.variant = Variant::Mdst;
    const Model fresh(cfg, ds.audio_dim(), ds.visual_dim(), 3);
    EXPECT_EQ(parameter_values(r.model), parameter_values(fresh));
}

TEST(Training, SameSeedGivesIdenticalHistoryAndWeights) {
    const Dataset ds = generate_synthetic(tiny_spec(), 2);
    ModelConfig cfg = tiny_config();
    cfg.epochs = 2;
    TrainOptions opts;
    opts.seed = 7;
    const TrainResult a = train_mdstpp(ds, cfg, opts), b = train_mdstpp(ds, cfg, opts);
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].to_json(), b.history[i].to_json());
    EXPECT_EQ(parameter_values(a.model), parameter_values(b.model));
}

TEST(Training, LossDropsByEpochFiveForMostSeeds) {
    int improved = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Dataset ds = generate_synthetic(tiny_spec(), seed);
        TrainOptions opts;
        opts.seed = seed;
        const TrainResult r = train_mdst(ds, tiny_config(), opts);
        ASSERT_EQ(r.history.size(), 5u);
        improved += r.history[4].l_total < r.history[0].l_total;
    }
    EXPECT_GE(improved, 4);
}

TEST(Training, StagedRunLogsFiniteLossPerStage) {
    const Dataset ds = generate_synthetic(tiny_spec(), 3);
    ModelConfig cfg = tiny_config();
    cfg.epochs = 2;
    std::vector<EpochMetrics> seen;
    TrainOptions opts;
    opts.on_epoch = [&](const EpochMetrics& m) { seen.push_back(m); };
    const TrainResult r = train_mdstpp(ds, cfg, opts);
    ASSERT_EQ(seen.size(), 2u);
    for (const auto& m : seen) {
        ASSERT_EQ(m.per_stage.size(), 3u);
        double sum = 0.0;
        for (double s : m.per_stage) {
            EXPECT_TRUE(std::isfinite(s));
            sum += s;
        }
        EXPECT_NEAR(sum, m.l_total, 1e-9 * std::max(1.0, m.l_total));
        EXPECT_NEAR(m.l_n + m.l_p + m.l_r, m.l_total, 1e-9 * std::max(1.0, m.l_total));
    }
}

TEST(Training, SingleStageStagedRunEqualsRateLossRun) {
    const Dataset ds = generate_synthetic(tiny_spec(), 4);
    ModelConfig cfg = tiny_config();
    cfg.epochs = 2;
    cfg.body = BodyKind::SpikeFormer;
    cfg.stages = StageSchedule({{4, 1}});
    TrainOptions opts;
    opts.seed = 11;
    const TrainResult staged = train_mdstpp(ds, cfg, opts);
    const TrainResult plain = train_mdst(ds, cfg, opts);
    ASSERT_EQ(staged.history.size(), plain.history.size());
    for (std::size_t i = 0; i < staged.history.size(); ++i) {
        EXPECT_NEAR(staged.history[i].l_total, plain.history[i].l_total, 1e-9 * plain.history[i].l_total);
    }
}

TEST(Training, RejectsEmptyDataAndSchedule) {
    Dataset ds = generate_synthetic(tiny_spec(), 5);
    ModelConfig cfg = tiny_config();
    cfg.stages = StageSchedule();
    EXPECT_THROW(train_mdstpp(ds, cfg), ConfigError);
    ds.splits.train.clear();
    EXPECT_THROW(train_mdst(ds, tiny_config()), DataError);
}

TEST(Evaluate, ReportsAndMissingSplits) {
    Dataset ds = generate_synthetic(tiny_spec(), 6);
    ModelConfig cfg = tiny_config();
    cfg.epochs = 1;
    TrainResult r = train_mdst(ds, cfg);
    const EvalReport zsl = evaluate(r.model, ds, EvalMode::Zsl);
    EXPECT_GE(zsl.zsl_acc, 0.0);
    EXPECT_LE(zsl.zsl_acc, 100.0);
    const EvalReport g = evaluate(r.model, ds, EvalMode::Gzsl);
    EXPECT_DOUBLE_EQ(g.hm, harmonic_mean(g.seen_acc, g.unseen_acc));
    ds.splits.test_seen.clear();
    EXPECT_THROW(evaluate(r.model, ds, EvalMode::Gzsl), DataError);
    ds.splits.test_unseen.clear();
    EXPECT_THROW(evaluate(r.model, ds, EvalMode::Zsl), DataError);
}
