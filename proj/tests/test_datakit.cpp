#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "mdst/data.hpp"

using namespace mdst;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("mdst_datakit_" + name);
    fs::remove_all(dir);
    return dir;
}

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.n_seen_classes = 4;
    s.n_unseen_classes = 2;
    s.samples_per_class = 5;
    s.frames = 8;
    s.feature_dim = 12;
    s.attributes = 3;
    s.word_dim = 20;
    return s;
}

using Feature = std::vector<double>;

// Per-feature mean over frames: blind to motion.
Feature frame_mean(const Tensor& x) {
    const std::size_t t = x.dim(0), d = x.dim(1);
    Feature f(d, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j) f[j] += x.values()[i * d + j] / static_cast<double>(t);
    }
    return f;
}

// Per-feature mean absolute frame difference: blind to the static background.
Feature frame_difference(const Tensor& x) {
    const std::size_t t = x.dim(0), d = x.dim(1);
    Feature f(d, 0.0);
    for (std::size_t i = 1; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            f[j] += std::abs(x.values()[i * d + j] - x.values()[(i - 1) * d + j]) / static_cast<double>(t - 1);
        }
    }
    return f;
}

// Nearest-centroid accuracy over every pair of classes that share a
// background; centroids come from the first half of each class's samples.
template <typename Extract>
double confounded_pair_accuracy(const Dataset& ds, Extract extract) {
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (const auto& s : ds.samples) by_class[s.class_id].push_back(s.id);
    std::size_t correct = 0, total = 0;
    for (std::size_t a = 0; a < ds.classes.size(); ++a) {
        for (std::size_t b = a + 1; b < ds.classes.size(); ++b) {
            if (ds.classes[a].group != ds.classes[b].group) continue;
            std::array<Feature, 2> centroid;
            const std::array<std::size_t, 2> pair = {a, b};
            for (std::size_t k = 0; k < 2; ++k) {
                const auto& ids = by_class[pair[k]];
                const std::size_t half = ids.size() / 2;
                for (std::size_t i = 0; i < half; ++i) {
                    const Feature f = extract(ds.samples[ids[i]].visual);
                    if (centroid[k].empty()) centroid[k].assign(f.size(), 0.0);
                    for (std::size_t j = 0; j < f.size(); ++j) centroid[k][j] += f[j] / static_cast<double>(half);
                }
            }
            for (std::size_t k = 0; k < 2; ++k) {
                const auto& ids = by_class[pair[k]];
                for (std::size_t i = ids.size() / 2; i < ids.size(); ++i) {
                    const Feature f = extract(ds.samples[ids[i]].visual);
                    double d0 = 0.0, d1 = 0.0;
                    for (std::size_t j = 0; j < f.size(); ++j) {
                        d0 += (f[j] - centroid[0][j]) * (f[j] - centroid[0][j]);
                        d1 += (f[j] - centroid[1][j]) * (f[j] - centroid[1][j]);
                    }
                    correct += (d0 <= d1 ? 0u : 1u) == k;
                    ++total;
                }
            }
        }
    }
    return total == 0 ? -1.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

// Magnitude of frequency `cycles` in feature j of a [T, D] sequence.
double harmonic_magnitude(const Tensor& x, std::size_t j, double cycles) {
    const std::size_t t = x.dim(0), d = x.dim(1);
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        const double angle = -2.0 * std::numbers::pi * cycles * static_cast<double>(i) / static_cast<double>(t);
        acc += x.values()[i * d + j] * std::polar(1.0, angle);
    }
    return std::abs(acc);
}

}  // namespace

TEST(Synthetic, ConfoundDefeatsFrameMeanButNotFrameDifference) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Dataset ds = generate_synthetic(SyntheticSpec{}, seed);
        const double blind = confounded_pair_accuracy(ds, frame_mean);
        const double aware = confounded_pair_accuracy(ds, frame_difference);
        ASSERT_GE(blind, 0.0) << "no confounded pairs for seed " << seed;
        EXPECT_LT(blind, 60.0) << "seed " << seed;
        EXPECT_GT(aware, 90.0) << "seed " << seed;
    }
}

TEST(Synthetic, NoiselessSamplesDifferOnlyInPhase) {
    SyntheticSpec spec = small_spec();
    spec.noise_sigma = 0.0;
    spec.background_jitter = 0.0;
    const Dataset ds = generate_synthetic(spec, 3);
    const std::size_t d = spec.feature_dim;
    for (std::size_t c = 0; c < ds.classes.size(); ++c) {
        const Sample& first = ds.samples[c * spec.samples_per_class];
        for (std::size_t s = 1; s < spec.samples_per_class; ++s) {
            const Sample& other = ds.samples[c * spec.samples_per_class + s];
            const Feature m0 = frame_mean(first.visual), m1 = frame_mean(other.visual);
            for (std::size_t j = 0; j < d; ++j) {
                EXPECT_NEAR(m0[j], m1[j], 1e-5);
                const double cycles = static_cast<double>(j * spec.attributes / d + 1);
                EXPECT_NEAR(harmonic_magnitude(first.visual, j, cycles), harmonic_magnitude(other.visual, j, cycles),
                            1e-4);
            }
        }
    }
}

TEST(Synthetic, SplitSizesMatchSpecCounts) {
    const SyntheticSpec spec = small_spec();
    const Dataset ds = generate_synthetic(spec, 1);
    const std::size_t held = 1;  // round(0.2 * 5)
    EXPECT_EQ(ds.samples.size(), 6u * 5u);
    EXPECT_EQ(ds.splits.train.size(), 4u * (5u - held));
    EXPECT_EQ(ds.splits.test_seen.size(), 4u * held);
    EXPECT_EQ(ds.splits.test_unseen.size(), 2u * 5u);
    EXPECT_EQ(ds.splits.seen_classes.size(), 4u);
    EXPECT_EQ(ds.splits.unseen_classes.size(), 2u);
    EXPECT_EQ(ds.word_dim(), 20u);
    EXPECT_EQ(ds.frames(), 8u);
}

TEST(SyntheticProperty, UnseenSamplesNeverTrainAndSeedsAreDeterministic) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Dataset ds = generate_synthetic(small_spec(), seed);
        const std::set<std::size_t> unseen(ds.splits.unseen_classes.begin(), ds.splits.unseen_classes.end());
        for (auto id : ds.splits.train) EXPECT_EQ(unseen.count(ds.samples[id].class_id), 0u);
        const Dataset again = generate_synthetic(small_spec(), seed);
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            ASSERT_EQ(ds.samples[i].visual.to_vector(), again.samples[i].visual.to_vector());
            ASSERT_EQ(ds.samples[i].audio.to_vector(), again.samples[i].audio.to_vector());
        }
    }
}

TEST(Synthetic, SpecValidation) {
    SyntheticSpec s = small_spec();
    s.attributes = 20;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
    s = small_spec();
    s.word_structure = 1.5;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
    s = small_spec();
    s.frames = 1;
    EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
}

TEST(Features, RoundTripIsBitIdentical) {
    const Dataset ds = generate_synthetic(small_spec(), 4);
    const fs::path dir = scratch_dir("roundtrip");
    save_features(dir, ds);
    const Dataset back = load_features(dir);
    ASSERT_EQ(back.samples.size(), ds.samples.size());
    ASSERT_EQ(back.classes.size(), ds.classes.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].class_id, ds.samples[i].class_id);
        EXPECT_EQ(back.samples[i].visual.to_vector(), ds.samples[i].visual.to_vector());
        EXPECT_EQ(back.samples[i].audio.to_vector(), ds.samples[i].audio.to_vector());
    }
    for (std::size_t c = 0; c < ds.classes.size(); ++c) EXPECT_EQ(back.classes[c].word, ds.classes[c].word);
    EXPECT_EQ(back.splits.train, ds.splits.train);
    EXPECT_EQ(back.splits.test_seen, ds.splits.test_seen);
    EXPECT_EQ(back.splits.test_unseen, ds.splits.test_unseen);
    EXPECT_EQ(back.splits.unseen_classes, ds.splits.unseen_classes);
    fs::remove_all(dir);
}

TEST(Features, MissingFileIsNamed) {
    const fs::path dir = scratch_dir("missing");
    save_features(dir, generate_synthetic(small_spec(), 5));
    fs::remove(dir / "features" / "s3_visual.spkt");
    try {
        load_features(dir);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("s3_visual.spkt"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(Features, EmptyManifestAndUnknownClass) {
    const fs::path dir = scratch_dir("empty");
    save_features(dir, generate_synthetic(small_spec(), 6));
    { std::ofstream(dir / "manifest.jsonl"); }
    EXPECT_THROW(load_features(dir), DataError);
    {
        std::ofstream os(dir / "manifest.jsonl");
        os << R"({"class_id": 99, "audio_file": "features/s0_audio.spkt", "visual_file": "features/s0_visual.spkt", "split": "train"})"
           << "\n";
    }
    EXPECT_THROW(load_features(dir), DataError);
    fs::remove(dir / "classes.jsonl");
    EXPECT_THROW(load_features(dir), DataError);
    fs::remove_all(dir);
}

TEST(Splits, UcfLikeClassCounts) {
    SyntheticSpec spec = small_spec();
    spec.n_seen_classes = 40;
    spec.n_unseen_classes = 8;
    spec.samples_per_class = 5;
    const Dataset ds = generate_synthetic(spec, 7);
    const DatasetSplits s = make_splits(ds, 11, SplitRatios{});
    EXPECT_EQ(s.seen_classes.size(), 30u);
    EXPECT_EQ(s.unseen_classes.size(), 18u);
    std::set<std::size_t> val, test;
    for (auto id : s.val_unseen) val.insert(ds.samples[id].class_id);
    for (auto id : s.test_unseen) test.insert(ds.samples[id].class_id);
    EXPECT_EQ(val.size(), 12u);
    EXPECT_EQ(test.size(), 6u);
    EXPECT_EQ(s.test_seen.size(), 30u * 1u);
    EXPECT_EQ(s.train.size(), 30u * 4u);
}

TEST(SplitsProperty, DeterministicAndDisjoint) {
    Rng rng(8);
    for (int trial = 0; trial < 30; ++trial) {
        SyntheticSpec spec = small_spec();
        spec.n_seen_classes = 3 + rng.index(10);
        spec.n_unseen_classes = 1 + rng.index(5);
        spec.samples_per_class = 2 + rng.index(4);
        spec.frames = 2;
        const Dataset ds = generate_synthetic(spec, trial);
        const SplitRatios ratios{rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.5)};
        DatasetSplits s;
        try {
            s = make_splits(ds, trial, ratios);
        } catch (const ConfigError&) {
            continue;  // ratio draw left no seen classes
        }
        const DatasetSplits again = make_splits(ds, trial, ratios);
        EXPECT_EQ(s.train, again.train);
        EXPECT_EQ(s.test_unseen, again.test_unseen);
        std::set<std::size_t> all;
        std::size_t count = 0;
        for (const auto* list : {&s.train, &s.val_unseen, &s.test_seen, &s.test_unseen}) {
            all.insert(list->begin(), list->end());
            count += list->size();
        }
        EXPECT_EQ(all.size(), count);
        EXPECT_EQ(count, ds.samples.size());
        const std::set<std::size_t> seen(s.seen_classes.begin(), s.seen_classes.end());
        for (auto c : s.unseen_classes) EXPECT_EQ(seen.count(c), 0u);
        for (auto id : s.train) EXPECT_EQ(seen.count(ds.samples[id].class_id), 1u);
    }
    EXPECT_THROW(make_splits(generate_synthetic(small_spec(), 1), 1, SplitRatios{0.6, 0.5, 0.2}), ConfigError);
}
