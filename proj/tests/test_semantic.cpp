#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "mdst/random.hpp"
#include "mdst/semantic.hpp"

using namespace mdst;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double sd = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.mutable_values()) v = rng.normal() * sd;
    return t;
}

void expect_all(const Tensor& t, double value) {
    for (double v : t.values()) EXPECT_EQ(v, value);
}

}  // namespace

TEST(Encoder, ZeroInputGivesZeroOutput) {
    Rng rng(1);
    ParameterSet ps;
    Encoder enc(ps, "enc", {16, 12, 8, 0.25}, rng);
    ForwardContext ctx;
    const Tensor y = enc(Tensor::zeros({3, 16}), ctx);
    EXPECT_EQ(y.shape(), (Shape{3, 8}));
    expect_all(y, 0.0);
}

TEST(Encoder, OutputWidthForAnyLeadingExtent) {
    Rng rng(2);
    ParameterSet ps;
    Encoder enc(ps, "enc", {10, 6, 5, 0.1}, rng);
    ForwardContext ctx;
    for (std::size_t rows : {1u, 4u, 9u}) EXPECT_EQ(enc(random_tensor({rows, 10}, rng), ctx).shape(), (Shape{rows, 5}));
    EXPECT_EQ(enc(random_tensor({2, 7, 10}, rng), ctx).shape(), (Shape{2, 7, 5}));
    EXPECT_THROW(enc(random_tensor({2, 9}, rng), ctx), DimensionError);
}

TEST(Encoder, EvalModeIsDeterministic) {
    Rng rng(3);
    ParameterSet ps;
    Encoder enc(ps, "enc", {10, 6, 5, 0.5}, rng);
    const Tensor x = random_tensor({4, 10}, rng);
    ForwardContext ctx;
    EXPECT_EQ(enc(x, ctx).to_vector(), enc(x, ctx).to_vector());
}

TEST(Encoder, SpecValidation) {
    EXPECT_THROW((EncoderSpec{0, 4, 4, 0.1}.validate()), ConfigError);
    EXPECT_THROW((EncoderSpec{4, 4, 4, 1.0}.validate()), ConfigError);
    EXPECT_NO_THROW((EncoderSpec{4, 4, 4, 0.0}.validate()));
}

TEST(RjluGates, ZeroKnowledgeGivesHalfGates) {
    Rng rng(4);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 6, rng);
    const auto [ca, cv] = rjlu.gates(random_tensor({3, 6}, rng), random_tensor({3, 6}, rng), Tensor::zeros({3, 6}));
    expect_all(ca, 0.5);
    expect_all(cv, 0.5);
}

TEST(RjluGates, IdenticalModalitiesGiveIdenticalGates) {
    Rng rng(5);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 6, rng);
    const Tensor x = random_tensor({2, 6}, rng);
    const auto [ca, cv] = rjlu.gates(x, x, random_tensor({2, 6}, rng));
    EXPECT_EQ(ca.to_vector(), cv.to_vector());
}

TEST(RjluGatesProperty, GatesLieInOpenUnitInterval) {
    Rng rng(6);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 5, rng);
    for (int trial = 0; trial < 100; ++trial) {
        const auto [ca, cv] =
            rjlu.gates(random_tensor({2, 3, 5}, rng), random_tensor({2, 3, 5}, rng), random_tensor({2, 5}, rng));
        EXPECT_EQ(ca.shape(), (Shape{2, 5}));
        for (const Tensor* g : {&ca, &cv}) {
            for (double v : g->values()) {
                EXPECT_GT(v, 0.0);
                EXPECT_LT(v, 1.0);
            }
        }
    }
}

TEST(RjluFuse, ZeroInputsGiveZeroOutput) {
    Rng rng(7);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 4, rng);
    const Tensor s = rjlu.fuse(Tensor::zeros({2, 4}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4}));
    EXPECT_EQ(s.shape(), (Shape{2, 3, 4}));
    expect_all(s, 0.0);
}

TEST(RjluFuse, TokenCountTriples) {
    Rng rng(8);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 4, rng);
    const Tensor s = rjlu.fuse(random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng));
    EXPECT_EQ(s.shape(), (Shape{2, 15, 4}));
    EXPECT_THROW(rjlu.fuse(random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng)),
                 DimensionError);
}

TEST(RjluFuse, ZeroedMlpLeavesSelfAttentionOutput) {
    Rng rng(9);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 4, rng);
    for (Linear* l : {&rjlu.mlp.fc1, &rjlu.mlp.fc2}) {
        for (auto& w : l->weight.mutable_values()) w = 0.0;
        for (auto& b : l->bias.mutable_values()) b = 0.0;
    }
    const Tensor a = random_tensor({2, 4}, rng), h = random_tensor({2, 4}, rng), v = random_tensor({2, 4}, rng);
    const Tensor c = concat({reshape(a, {2, 1, 4}), reshape(h, {2, 1, 4}), reshape(v, {2, 1, 4})}, 1);
    EXPECT_EQ(rjlu.fuse(a, h, v).to_vector(), rjlu.self_attn(c, c).to_vector());
}

TEST(RjluUpdate, ConvexEndpoints) {
    Rng rng(10);
    const Tensor h = random_tensor({2, 3}, rng);
    const Tensor s = random_tensor({2, 4, 3}, rng);
    const Tensor pooled = mean(s, 1);
    const Tensor ones = Tensor::ones({2, 3}), zeros = Tensor::zeros({2, 3});
    EXPECT_EQ(Rjlu::update(h, ones, ones, s).to_vector(), h.to_vector());
    EXPECT_EQ(Rjlu::update(h, zeros, zeros, s).to_vector(), pooled.to_vector());
}

TEST(RjluUpdateProperty, StaysBetweenPreviousAndPooledFusion) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor h = random_tensor({2, 5}, rng);
        const Tensor s = random_tensor({2, 3, 5}, rng);
        Tensor ca = Tensor::zeros({2, 5}), cv = Tensor::zeros({2, 5});
        for (auto& v : ca.mutable_values()) v = rng.uniform(1e-6, 1.0 - 1e-6);
        for (auto& v : cv.mutable_values()) v = rng.uniform(1e-6, 1.0 - 1e-6);
        const auto out = Rjlu::update(h, ca, cv, s).to_vector();
        const auto pooled = mean(s, 1).to_vector();
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double lo = std::min(h.values()[i], pooled[i]), hi = std::max(h.values()[i], pooled[i]);
            EXPECT_GE(out[i], lo - 1e-15);
            EXPECT_LE(out[i], hi + 1e-15);
        }
    }
}

TEST(RjluRun, FirstStepUsesHalfGatesAndRunIsDeterministic) {
    Rng rng(12);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 4, rng);
    const Tensor a = random_tensor({2, 3, 4}, rng), v = random_tensor({2, 3, 4}, rng);
    const RjluTrace trace = rjlu.run(a, v);
    ASSERT_EQ(trace.fused.size(), 3u);
    EXPECT_EQ(trace.sem_a.shape(), (Shape{2, 3, 4}));
    EXPECT_EQ(trace.sem_v.shape(), (Shape{2, 3, 4}));
    EXPECT_EQ(trace.h.shape(), (Shape{2, 4}));

    // Step one from h = 0: h^1 = 0.5 * pool(S^1).
    const Tensor h1 = scale(mean(trace.fused[0], 1), 0.5);
    const RjluTrace one = rjlu.run(slice(a, 1, 0, 1), slice(v, 1, 0, 1));
    EXPECT_EQ(one.h.to_vector(), h1.to_vector());

    EXPECT_EQ(rjlu.run(a, v).h.to_vector(), trace.h.to_vector());
    EXPECT_THROW(rjlu.run(a, random_tensor({2, 2, 4}, rng)), DimensionError);
}

TEST(RjluRun, KnowledgeStaysFinite) {
    Rng rng(13);
    ParameterSet ps;
    Rjlu rjlu(ps, "rjlu", 6, rng);
    const RjluTrace trace = rjlu.run(random_tensor({3, 12, 6}, rng, 3.0), random_tensor({3, 12, 6}, rng, 3.0));
    for (double v : trace.h.values()) EXPECT_TRUE(std::isfinite(v));
}
