#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdst/errors.hpp"
#include "mdst/random.hpp"
#include "mdst/serialize.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Background-confounded audio-visual data. Classes are points z_c in a small
// latent attribute space. Attribute k drives a sinusoid with k + 1 whole
// cycles over the clip on its own block of features, so every class shares
// the zero temporal mean of its motion. Classes in one background group
// differ only in motion; word vectors are a linear image of z_c plus a
// class-specific random part.
struct SyntheticSpec {
    std::size_t n_seen_classes = 8;
    std::size_t n_unseen_classes = 4;
    std::size_t samples_per_class = 40;
    std::size_t frames = 16;
    std::size_t feature_dim = 64;
    std::size_t attributes = 3;
    std::size_t word_dim = 300;
    std::size_t classes_per_group = 3;
    double background_level = 4.0;
    double background_spread = 0.5;
    double background_jitter = 0.5;  // per-sample background offset sd
    double motion_amplitude = 2.0;
    double noise_sigma = 0.05;
    double latent_separation = 0.35;
    double word_structure = 1.0;  // weight of the latent-driven word component
    double word_norm = 3.0;
    double test_seen_fraction = 0.2;

    std::size_t class_count() const { return n_seen_classes + n_unseen_classes; }

    void validate() const {
        if (n_seen_classes < 1 || n_unseen_classes < 1) throw ConfigError("need at least one seen and one unseen class");
        if (samples_per_class < 2) throw ConfigError("samples_per_class must be >= 2");
        if (frames < 2) throw ConfigError("frames must be >= 2");
        if (attributes < 1 || feature_dim < attributes) throw ConfigError("feature_dim must cover every attribute");
        if (word_dim < 1) throw ConfigError("word_dim must be positive");
        if (classes_per_group < 2) throw ConfigError("background groups must hold at least 2 classes");
        if (class_count() < 2) throw ConfigError("need at least 2 classes");
        if (noise_sigma < 0.0 || background_jitter < 0.0 || background_spread < 0.0) {
            throw ConfigError("noise and spread parameters must be non-negative");
        }
        if (!(word_structure >= 0.0 && word_structure <= 1.0)) throw ConfigError("word_structure must lie in [0, 1]");
        if (!(test_seen_fraction > 0.0 && test_seen_fraction < 1.0)) {
            throw ConfigError("test_seen_fraction must lie in (0, 1)");
        }
    }
};

struct ClassInfo {
    std::size_t id = 0;
    std::string name;
    std::size_t group = 0;        // background group; synthetic data only
    std::vector<double> latent;   // synthetic data only
    std::vector<double> word;
};

struct Sample {
    std::size_t id = 0;
    std::size_t class_id = 0;
    Tensor audio;   // [T, D_a]
    Tensor visual;  // [T, D_v]
};

// Sample-id lists plus the class partition they imply.
struct DatasetSplits {
    std::vector<std::size_t> train, val_unseen, test_seen, test_unseen;
    std::vector<std::size_t> seen_classes, unseen_classes;
};

struct Dataset {
    std::vector<ClassInfo> classes;
    std::vector<Sample> samples;
    DatasetSplits splits;

    std::size_t frames() const { return samples.at(0).visual.dim(0); }
    std::size_t audio_dim() const { return samples.at(0).audio.dim(1); }
    std::size_t visual_dim() const { return samples.at(0).visual.dim(1); }
    std::size_t word_dim() const { return classes.at(0).word.size(); }
};

namespace detail {

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline void normalize_to(std::vector<double>& v, double norm) {
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    if (s == 0.0) return;
    for (double& x : v) x *= norm / s;
}

// Latent points in [0, 1]^K with pairwise distance >= sep, relaxing sep if
// the draw keeps failing.
inline std::vector<std::vector<double>> draw_latents(std::size_t n, std::size_t k, double sep, Rng& rng) {
    for (int relax = 0;; ++relax) {
        const double s = sep * std::pow(0.9, relax);
        std::vector<std::vector<double>> pts;
        for (int tries = 0; pts.size() < n && tries < 20000; ++tries) {
            std::vector<double> z(k);
            for (auto& x : z) x = rng.uniform(0.1, 1.0);
            bool ok = true;
            for (const auto& p : pts) {
                double d = 0.0;
                for (std::size_t i = 0; i < k; ++i) d += (p[i] - z[i]) * (p[i] - z[i]);
                if (std::sqrt(d) < s) {
                    ok = false;
                    break;
                }
            }
            if (ok) pts.push_back(std::move(z));
        }
        if (pts.size() == n) return pts;
    }
}

// Unseen classes go pairwise into groups, seen classes top them up and fill
// further groups; a trailing singleton joins the previous group.
inline std::vector<std::vector<std::size_t>> assign_groups(const std::vector<std::size_t>& seen,
                                                           const std::vector<std::size_t>& unseen,
                                                           std::size_t per_group) {
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i + 1 < unseen.size(); i += 2) groups.push_back({unseen[i], unseen[i + 1]});
    if (unseen.size() % 2 == 1) rest.push_back(unseen.back());
    rest.insert(rest.end(), seen.begin(), seen.end());
    std::size_t r = 0;
    for (auto& g : groups) {
        while (g.size() < per_group && r < rest.size()) g.push_back(rest[r++]);
    }
    while (r < rest.size()) {
        std::vector<std::size_t> g;
        while (g.size() < per_group && r < rest.size()) g.push_back(rest[r++]);
        groups.push_back(std::move(g));
    }
    if (groups.size() > 1 && groups.back().size() == 1) {
        groups[groups.size() - 2].push_back(groups.back().front());
        groups.pop_back();
    }
    return groups;
}

}  // namespace detail

inline void check_splits(const Dataset& ds) {
    const auto& s = ds.splits;
    std::set<std::size_t> seen_ids;
    for (const auto* list : {&s.train, &s.val_unseen, &s.test_seen, &s.test_unseen}) {
        for (auto id : *list) {
            if (id >= ds.samples.size()) throw DataError("split references unknown sample " + std::to_string(id));
            if (!seen_ids.insert(id).second) throw DataError("sample " + std::to_string(id) + " is in two splits");
        }
    }
    const std::set<std::size_t> unseen(s.unseen_classes.begin(), s.unseen_classes.end());
    for (auto c : s.seen_classes) {
        if (unseen.count(c)) throw DataError("class " + std::to_string(c) + " is both seen and unseen");
    }
    for (auto id : s.train) {
        if (unseen.count(ds.samples[id].class_id)) {
            throw DataError("unseen-class sample " + std::to_string(id) + " in the training split");
        }
    }
}

inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Rng latent_rng = rng.fork(1), layout_rng = rng.fork(2), word_rng = rng.fork(3), sample_rng = rng.fork(4);
    const std::size_t n_classes = spec.class_count(), T = spec.frames, D = spec.feature_dim, K = spec.attributes;

    std::vector<std::size_t> seen(spec.n_seen_classes), unseen(spec.n_unseen_classes);
    for (std::size_t i = 0; i < seen.size(); ++i) seen[i] = i;
    for (std::size_t i = 0; i < unseen.size(); ++i) unseen[i] = spec.n_seen_classes + i;

    Dataset ds;
    ds.classes.resize(n_classes);
    const auto latents = detail::draw_latents(n_classes, K, spec.latent_separation, latent_rng);
    const auto groups = detail::assign_groups(seen, unseen, spec.classes_per_group);
    for (std::size_t c = 0; c < n_classes; ++c) {
        ds.classes[c].id = c;
        ds.classes[c].name = (c < spec.n_seen_classes ? "seen_" : "unseen_") + std::to_string(c);
        ds.classes[c].latent = latents[c];
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (auto c : groups[g]) ds.classes[c].group = g;
    }

    // Feature layout: attribute of each feature, its amplitude profile, the
    // audio permutation and gains, and per-group backgrounds.
    std::vector<std::size_t> attribute(D);
    std::vector<double> profile(D), audio_gain(D);
    std::vector<std::size_t> audio_perm(D);
    for (std::size_t d = 0; d < D; ++d) {
        attribute[d] = d * K / D;
        profile[d] = layout_rng.uniform(0.5, 1.0);
        audio_gain[d] = layout_rng.uniform(0.5, 1.0);
        audio_perm[d] = d;
    }
    layout_rng.shuffle(audio_perm);
    std::vector<std::vector<double>> bg_v(groups.size(), std::vector<double>(D));
    std::vector<std::vector<double>> bg_a(groups.size(), std::vector<double>(D));
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t d = 0; d < D; ++d) {
            bg_v[g][d] = spec.background_level + layout_rng.uniform(-1.0, 1.0) * spec.background_spread;
            bg_a[g][d] = spec.background_level + layout_rng.uniform(-1.0, 1.0) * spec.background_spread;
        }
    }

    // Word vectors: structure * unit(M (z - mean z)) + (1 - structure) * unit(r).
    std::vector<double> z_mean(K, 0.0);
    for (const auto& z : latents) {
        for (std::size_t k = 0; k < K; ++k) z_mean[k] += z[k] / static_cast<double>(n_classes);
    }
    std::vector<double> m(spec.word_dim * K);
    for (auto& x : m) x = word_rng.normal();
    for (auto& cls : ds.classes) {
        std::vector<double> structured(spec.word_dim, 0.0), noise(spec.word_dim);
        for (std::size_t i = 0; i < spec.word_dim; ++i) {
            for (std::size_t k = 0; k < K; ++k) structured[i] += m[i * K + k] * (cls.latent[k] - z_mean[k]);
            noise[i] = word_rng.normal();
        }
        detail::normalize_to(structured, 1.0);
        detail::normalize_to(noise, 1.0);
        cls.word.resize(spec.word_dim);
        for (std::size_t i = 0; i < spec.word_dim; ++i) {
            cls.word[i] = spec.word_structure * structured[i] + (1.0 - spec.word_structure) * noise[i];
        }
        detail::normalize_to(cls.word, spec.word_norm);
    }

    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t c = 0; c < n_classes; ++c) {
        const auto& cls = ds.classes[c];
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            std::vector<double> phase(K), jitter_v(D), jitter_a(D);
            for (auto& p : phase) p = sample_rng.uniform(0.0, two_pi);
            for (std::size_t d = 0; d < D; ++d) {
                jitter_v[d] = spec.background_jitter * sample_rng.normal();
                jitter_a[d] = spec.background_jitter * sample_rng.normal();
            }
            std::vector<double> motion(T * D), vis(T * D), aud(T * D);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) {
                    const std::size_t k = attribute[d];
                    const double cycles = static_cast<double>(k + 1);
                    motion[t * D + d] = cls.latent[k] * profile[d] * spec.motion_amplitude *
                                        std::sin(two_pi * cycles * static_cast<double>(t) / static_cast<double>(T) +
                                                 phase[k]);
                }
            }
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) {
                    vis[t * D + d] = detail::to_f32(bg_v[cls.group][d] + jitter_v[d] + motion[t * D + d] +
                                                    spec.noise_sigma * sample_rng.normal());
                    aud[t * D + d] = detail::to_f32(bg_a[cls.group][d] + jitter_a[d] +
                                                    audio_gain[d] * motion[t * D + audio_perm[d]] +
                                                    spec.noise_sigma * sample_rng.normal());
                }
            }
            Sample smp;
            smp.id = ds.samples.size();
            smp.class_id = c;
            smp.visual = Tensor({T, D}, std::move(vis));
            smp.audio = Tensor({T, D}, std::move(aud));
            ds.samples.push_back(std::move(smp));
        }
    }

    // Seen classes: leading samples train, the rest test_seen. Unseen
    // classes: every sample is test_unseen.
    const auto n_test = static_cast<std::size_t>(
        std::lround(spec.test_seen_fraction * static_cast<double>(spec.samples_per_class)));
    for (const auto& smp : ds.samples) {
        const std::size_t within = smp.id % spec.samples_per_class;
        if (smp.class_id < spec.n_seen_classes) {
            (within + n_test < spec.samples_per_class ? ds.splits.train : ds.splits.test_seen).push_back(smp.id);
        } else {
            ds.splits.test_unseen.push_back(smp.id);
        }
    }
    ds.splits.seen_classes = seen;
    ds.splits.unseen_classes = unseen;
    check_splits(ds);
    return ds;
}

// Class-level split fractions. Unseen counts round to nearest; seen classes
// take the remainder. test_seen is the per-seen-class sample fraction held
// out of training.
struct SplitRatios {
    double val_unseen = 0.25;
    double test_unseen = 0.125;
    double test_seen = 0.2;
};

inline DatasetSplits make_splits(const Dataset& ds, std::uint64_t seed, const SplitRatios& ratios) {
    const std::size_t n = ds.classes.size();
    if (ratios.val_unseen < 0.0 || ratios.test_unseen < 0.0 || ratios.val_unseen + ratios.test_unseen >= 1.0) {
        throw ConfigError("unseen fractions must be non-negative and leave seen classes");
    }
    if (!(ratios.test_seen >= 0.0 && ratios.test_seen < 1.0)) throw ConfigError("test_seen must lie in [0, 1)");
    const auto n_val = static_cast<std::size_t>(std::lround(ratios.val_unseen * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::lround(ratios.test_unseen * static_cast<double>(n)));
    if (n_val + n_test >= n) throw ConfigError("split leaves no seen classes");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = ds.classes[i].id;
    Rng rng(seed);
    rng.shuffle(order);

    std::map<std::size_t, int> role;  // 0 seen, 1 val unseen, 2 test unseen
    DatasetSplits out;
    for (std::size_t i = 0; i < n; ++i) {
        const int r = i < n_test ? 2 : (i < n_test + n_val ? 1 : 0);
        role[order[i]] = r;
        (r == 0 ? out.seen_classes : out.unseen_classes).push_back(order[i]);
    }
    std::sort(out.seen_classes.begin(), out.seen_classes.end());
    std::sort(out.unseen_classes.begin(), out.unseen_classes.end());

    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (const auto& s : ds.samples) by_class[s.class_id].push_back(s.id);
    for (auto& [cls, ids] : by_class) {
        const auto it = role.find(cls);
        if (it == role.end()) throw DataError("sample of unknown class " + std::to_string(cls));
        if (it->second == 1) {
            out.val_unseen.insert(out.val_unseen.end(), ids.begin(), ids.end());
        } else if (it->second == 2) {
            out.test_unseen.insert(out.test_unseen.end(), ids.begin(), ids.end());
        } else {
            rng.shuffle(ids);
            const auto held = static_cast<std::size_t>(std::lround(ratios.test_seen * static_cast<double>(ids.size())));
            for (std::size_t i = 0; i < ids.size(); ++i) (i < held ? out.test_seen : out.train).push_back(ids[i]);
        }
    }
    for (auto* list : {&out.train, &out.val_unseen, &out.test_seen, &out.test_unseen}) {
        std::sort(list->begin(), list->end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files: manifest.jsonl {sample_id, class_id, audio_file, visual_file, split},
// classes.jsonl {class_id, name, vector}, SPKT tensors under features/.

namespace detail {

inline std::string split_of(const DatasetSplits& s, std::size_t id) {
    auto has = [id](const std::vector<std::size_t>& v) { return std::find(v.begin(), v.end(), id) != v.end(); };
    if (has(s.train)) return "train";
    if (has(s.val_unseen)) return "val_unseen";
    if (has(s.test_seen)) return "test_seen";
    if (has(s.test_unseen)) return "test_unseen";
    return "none";
}

}  // namespace detail

inline void save_features(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir / "features");
    std::ofstream classes(dir / "classes.jsonl");
    if (!classes) throw DataError("cannot write " + (dir / "classes.jsonl").string());
    for (const auto& c : ds.classes) {
        nlohmann::json j = {{"class_id", c.id}, {"name", c.name}, {"vector", c.word}};
        classes << j.dump() << "\n";
    }
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw DataError("cannot write " + (dir / "manifest.jsonl").string());
    for (const auto& s : ds.samples) {
        const std::string stem = "features/s" + std::to_string(s.id);
        spkt::write(dir / (stem + "_audio.spkt"), s.audio);
        spkt::write(dir / (stem + "_visual.spkt"), s.visual);
        nlohmann::json j = {{"sample_id", s.id},
                            {"class_id", s.class_id},
                            {"audio_file", stem + "_audio.spkt"},
                            {"visual_file", stem + "_visual.spkt"},
                            {"split", detail::split_of(ds.splits, s.id)}};
        manifest << j.dump() << "\n";
    }
}

inline Dataset load_features(const std::filesystem::path& dir) {
    Dataset ds;
    std::ifstream classes(dir / "classes.jsonl");
    if (!classes) throw DataError("missing class-embedding file " + (dir / "classes.jsonl").string());
    std::map<std::size_t, std::size_t> class_index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(classes, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ClassInfo c;
            c.id = j.at("class_id").get<std::size_t>();
            c.name = j.value("name", "class_" + std::to_string(c.id));
            c.word = j.at("vector").get<std::vector<double>>();
            if (!ds.classes.empty() && c.word.size() != ds.classes.front().word.size()) {
                throw DataError("class " + std::to_string(c.id) + " vector width differs from the first class");
            }
            if (!class_index.emplace(c.id, ds.classes.size()).second) {
                throw DataError("duplicate class_id " + std::to_string(c.id));
            }
            ds.classes.push_back(std::move(c));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("classes.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (ds.classes.empty()) throw DataError("no classes in " + (dir / "classes.jsonl").string());
    std::sort(ds.classes.begin(), ds.classes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < ds.classes.size(); ++i) {
        if (ds.classes[i].id != i) throw DataError("class ids must be 0.." + std::to_string(ds.classes.size() - 1));
    }

    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw DataError("missing manifest " + (dir / "manifest.jsonl").string());
    std::set<std::size_t> seen_cls, unseen_cls;
    lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            Sample s;
            s.id = ds.samples.size();
            s.class_id = j.at("class_id").get<std::size_t>();
            if (s.class_id >= ds.classes.size()) {
                throw DataError("manifest line " + std::to_string(lineno) + " names unknown class " +
                                std::to_string(s.class_id));
            }
            s.audio = spkt::read(dir / j.at("audio_file").get<std::string>());
            s.visual = spkt::read(dir / j.at("visual_file").get<std::string>());
            if (s.audio.rank() != 2 || s.visual.rank() != 2 || s.audio.dim(0) != s.visual.dim(0)) {
                throw DataError("sample on manifest line " + std::to_string(lineno) +
                                " needs [T, D] audio and visual with equal T, got " + to_string(s.audio.shape()) +
                                " and " + to_string(s.visual.shape()));
            }
            if (!ds.samples.empty() && (s.audio.shape() != ds.samples.front().audio.shape() ||
                                        s.visual.shape() != ds.samples.front().visual.shape())) {
                throw DataError("sample on manifest line " + std::to_string(lineno) +
                                " has a shape different from the first sample");
            }
            const std::string split = j.at("split").get<std::string>();
            if (split == "train") {
                ds.splits.train.push_back(s.id);
                seen_cls.insert(s.class_id);
            } else if (split == "test_seen") {
                ds.splits.test_seen.push_back(s.id);
                seen_cls.insert(s.class_id);
            } else if (split == "val_unseen") {
                ds.splits.val_unseen.push_back(s.id);
                unseen_cls.insert(s.class_id);
            } else if (split == "test_unseen") {
                ds.splits.test_unseen.push_back(s.id);
                unseen_cls.insert(s.class_id);
            } else if (split != "none") {
                throw DataError("manifest line " + std::to_string(lineno) + " has unknown split '" + split + "'");
            }
            ds.samples.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (ds.samples.empty()) throw DataError("empty manifest in " + dir.string());
    ds.splits.seen_classes.assign(seen_cls.begin(), seen_cls.end());
    ds.splits.unseen_classes.assign(unseen_cls.begin(), unseen_cls.end());
    check_splits(ds);
    return ds;
}

}  // namespace mdst
