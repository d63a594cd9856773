#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <tuple>

#include <gtest/gtest.h>

#include "mdst/events.hpp"
#include "mdst/random.hpp"

using namespace mdst;

namespace {

std::vector<Tensor> scalar_log_frames(const std::vector<double>& values) {
    std::vector<Tensor> out;
    for (double v : values) out.push_back(Tensor({1}, {v}));
    return out;
}

// Scalar reference of the emission rule for one pixel's log sequence:
// returns (t, polarity) pairs and the final reference.
std::pair<std::vector<std::pair<std::size_t, int>>, double> pixel_oracle(const std::vector<double>& logs, double c) {
    std::vector<std::pair<std::size_t, int>> events;
    double ref = logs[0];
    for (std::size_t t = 1; t < logs.size(); ++t) {
        for (;;) {
            const double delta = logs[t] - ref;
            if (delta >= c) {
                events.emplace_back(t, +1);
                ref = ref + c;
            } else if (-delta >= c) {
                events.emplace_back(t, -1);
                ref = ref - c;
            } else {
                break;
            }
        }
    }
    return {events, ref};
}

std::vector<Tensor> random_video(Rng& rng, std::size_t frames, std::size_t h, std::size_t w) {
    std::vector<Tensor> out;
    std::vector<double> base(h * w);
    for (auto& b : base) b = rng.uniform(0.0, 2.0);
    for (std::size_t t = 0; t < frames; ++t) {
        std::vector<double> f(h * w);
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = std::max(0.0, base[i] + rng.normal() * 0.6);
        out.emplace_back(Shape{h, w}, std::move(f));
    }
    return out;
}

}  // namespace

TEST(LogIntensity, ConstantAndFloor) {
    for (double v : log_intensity(Tensor::ones({2, 2})).to_vector()) EXPECT_NEAR(v, 9.995e-4, 1e-7);
    EXPECT_NEAR(log_intensity(Tensor::zeros({1})).item(), -6.9078, 1e-4);
    EXPECT_THROW(log_intensity(Tensor::vector({1.0, -0.5})), NumericError);
}

TEST(LogIntensity, MonotoneInBrightness) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const double a = rng.uniform(0.0, 10.0), b = rng.uniform(0.0, 10.0);
        const auto out = log_intensity(Tensor::vector({a, b})).to_vector();
        if (a < b) {
            EXPECT_LT(out[0], out[1]);
        } else if (a > b) {
            EXPECT_GT(out[0], out[1]);
        }
    }
}

TEST(GenerateEvents, SingleCrossingAtSecondFrame) {
    const auto logs = scalar_log_frames({0.00, 0.15, 0.35});
    EgmState state(logs[0], 0.30);
    EventStream stream;
    for (std::size_t t = 1; t < logs.size(); ++t) state.step(logs[t], t, stream);
    ASSERT_EQ(stream.size(), 1u);
    EXPECT_EQ(stream[0], (Event{0, 0, 2, +1}));
    EXPECT_DOUBLE_EQ(state.reference()[0], 0.30);
}

TEST(GenerateEvents, LargeJumpEmitsTwoEventsAtSameTime) {
    const EventStream stream = generate_events_from_log(scalar_log_frames({0.00, 0.65}), 0.30);
    ASSERT_EQ(stream.size(), 2u);
    for (const auto& e : stream) {
        EXPECT_EQ(e.t, 1u);
        EXPECT_EQ(e.p, +1);
    }
}

TEST(GenerateEvents, ConstantVideoIsSilent) {
    const std::vector<Tensor> frames(5, Tensor::full({3, 4}, 0.7));
    EXPECT_TRUE(generate_events(frames, 0.1).empty());
}

TEST(GenerateEvents, Preconditions) {
    EXPECT_THROW(generate_events({Tensor::ones({2, 2})}, 0.3), ContractError);
    EXPECT_THROW(generate_events({Tensor::ones({2, 2}), Tensor::ones({2, 3})}, 0.3), DimensionError);
    EXPECT_THROW(generate_events({Tensor::ones({2}), Tensor::ones({2})}, 0.0), ContractError);
}

TEST(GenerateEvents, MatchesScalarOracleAndOrdering) {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t h = 1 + rng.index(4), w = 1 + rng.index(5), frames = 2 + rng.index(6);
        const double c = rng.uniform(0.05, 0.6);
        const auto video = random_video(rng, frames, h, w);
        const EventStream stream = generate_events(video, c);

        std::vector<std::tuple<std::size_t, std::size_t, std::size_t, int>> expected;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                std::vector<double> logs;
                for (const auto& f : video) logs.push_back(std::log(f.values()[y * w + x] + 1e-3));
                for (const auto& [t, p] : pixel_oracle(logs, c).first) expected.emplace_back(t, y, x, p);
            }
        }
        std::sort(expected.begin(), expected.end(), [](const auto& a, const auto& b) {
            return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a)) <
                   std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b));
        });
        ASSERT_EQ(stream.size(), expected.size());
        for (std::size_t i = 0; i < stream.size(); ++i) {
            const auto& [t, y, x, p] = expected[i];
            EXPECT_EQ(stream[i], (Event{x, y, t, p}));
        }
    }
}

TEST(EgmProperty, ReferenceStaysWithinThresholdOfTruth) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const double c = rng.uniform(0.05, 0.5);
        const auto video = random_video(rng, 6, 3, 3);
        EgmState state(log_intensity(video[0]), c);
        EventStream sink;
        for (std::size_t t = 1; t < video.size(); ++t) {
            const Tensor truth = log_intensity(video[t]);
            state.step(truth, t, sink);
            for (std::size_t i = 0; i < truth.size(); ++i) {
                ASSERT_LT(std::abs(state.reference()[i] - truth.values()[i]), c);
            }
        }
    }
}

TEST(EgmProperty, PolarityFollowsSignOfChange) {
    Rng rng(6);
    const auto video = random_video(rng, 8, 2, 5);
    std::vector<Tensor> logs;
    for (const auto& f : video) logs.push_back(log_intensity(f));
    for (const auto& e : generate_events_from_log(logs, 0.2)) {
        const double delta = logs[e.t].values()[e.y * 5 + e.x] - logs[e.t - 1].values()[e.y * 5 + e.x];
        // The reference lags the previous frame by less than C, so a change of 2C fixes the sign.
        EXPECT_TRUE(e.p == 1 || e.p == -1);
        if (std::abs(delta) >= 0.4) {
            EXPECT_EQ(e.p, delta > 0 ? 1 : -1);
        }
    }
}

TEST(EgmProperty, DeterministicAndMonotoneInThreshold) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const auto video = random_video(rng, 5, 4, 4);
        EXPECT_EQ(generate_events(video, 0.3), generate_events(video, 0.3));
        std::size_t prev = std::numeric_limits<std::size_t>::max();
        for (double c : {0.1, 0.2, 0.3, 0.5}) {
            const std::size_t n = generate_events(video, c).size();
            EXPECT_LE(n, prev);
            prev = n;
        }
    }
}

TEST(Rasterize, EmptyAndSingleEvent) {
    const EventGrid empty = rasterize({}, {1, 2, 2});
    EXPECT_EQ(empty.nonzero_count(), 0u);
    const EventGrid one = rasterize({{1, 0, 0, -1}}, {1, 2, 2});
    const auto v = one.tensor().to_vector();
    EXPECT_EQ(std::vector<double>(v.begin(), v.end()), (std::vector<double>{0, -1, 0, 0}));
}

TEST(Rasterize, LastEventWinsAndRangeIsChecked) {
    const EventGrid g = rasterize({{0, 0, 0, 1}, {0, 0, 0, -1}}, {1, 1});
    EXPECT_EQ(g.tensor().to_vector()[0], -1.0);
    EXPECT_THROW(rasterize({{2, 0, 0, 1}}, {1, 2}), IndexError);
    EXPECT_THROW(rasterize({{0, 0, 3, 1}}, {2, 2}), IndexError);
}

TEST(RasterizeProperty, NonzeroCellsNeverExceedEvents) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        EventStream s;
        const std::size_t n = rng.index(40);
        for (std::size_t i = 0; i < n; ++i) s.push_back({rng.index(4), rng.index(3), i / 10, rng.bernoulli(0.5) ? 1 : -1});
        const EventGrid g = rasterize(s, {4, 3, 4});
        EXPECT_LE(g.nonzero_count(), s.size());
        for (double v : g.tensor().to_vector()) EXPECT_TRUE(v == 0.0 || v == 1.0 || v == -1.0);
    }
}

TEST(FeatureEgm, ConstantAndStepSequences) {
    EXPECT_EQ(feature_egm(Tensor::full({4, 3}, 2.0)).nonzero_count(), 0u);
    // Row 0 is zero, row 1 jumps: |log(x + 1e-3) - log(1e-3)| >= C for x = 5, < C for x = 1e-4.
    const EventGrid g = feature_egm(Tensor({2, 2}, {0.0, 0.0, 5.0, 1e-4}), 0.3);
    EXPECT_EQ(g.shape(), (Shape{2, 2}));
    EXPECT_EQ(g.tensor().to_vector()[2], 1.0);
    EXPECT_EQ(g.tensor().to_vector()[3], 0.0);
    EXPECT_EQ(g.tensor().to_vector()[0], 0.0);
}

TEST(FeatureEgm, UsesMagnitudeAndNeedsTwoFrames) {
    const Tensor x({3, 2}, {1.0, -1.0, -3.0, 3.0, 0.5, -0.5});
    const Tensor mag({3, 2}, {1.0, 1.0, 3.0, 3.0, 0.5, 0.5});
    EXPECT_EQ(feature_egm(x).tensor().to_vector(), feature_egm(mag).tensor().to_vector());
    EXPECT_THROW(feature_egm(Tensor::ones({1, 4})), ContractError);
    EXPECT_THROW(feature_egm(Tensor::ones({4})), DimensionError);
}

TEST(EventFile, TextRoundTripAndValidation) {
    const EventStream s = {{1, 2, 0, 1}, {0, 0, 1, -1}, {3, 1, 1, 1}};
    std::stringstream io;
    write_event_stream(io, s);
    EXPECT_EQ(io.str(), "0 1 2 1\n1 0 0 -1\n1 3 1 1\n");
    EXPECT_EQ(read_event_stream(io), s);
    std::stringstream bad("0 0 0 2\n");
    EXPECT_THROW(read_event_stream(bad), DataError);
    std::stringstream unsorted("3 0 0 1\n1 0 0 1\n");
    EXPECT_THROW(read_event_stream(unsorted), DataError);
}
