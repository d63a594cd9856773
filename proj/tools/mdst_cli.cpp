#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mdst/mdst.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

mdst::RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return mdst::apply_config({});
    return mdst::apply_config(mdst::load_config(path));
}

struct DataSource {
    mdst::Dataset dataset;
    json meta;
};

DataSource synthetic_source(const mdst::SyntheticSpec& spec, std::uint64_t seed) {
    return {mdst::generate_synthetic(spec, seed), {{"source", "synthetic"}, {"seed", seed}, {"spec", mdst::to_json(spec)}}};
}

DataSource directory_source(const std::string& dir) {
    return {mdst::load_features(dir), {{"source", "directory"}, {"path", fs::absolute(dir).string()}}};
}

DataSource source_from_meta(const json& meta) {
    const std::string kind = meta.at("source").get<std::string>();
    if (kind == "synthetic") {
        return synthetic_source(mdst::synthetic_spec_from_json(meta.at("spec")), meta.at("seed").get<std::uint64_t>());
    }
    if (kind == "directory") return directory_source(meta.at("path").get<std::string>());
    throw mdst::DataError("unknown data source '" + kind + "' in model.json");
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw mdst::DataError("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

json full_report(mdst::Model& model, const mdst::Dataset& ds) {
    return {{"zsl", mdst::to_json(mdst::evaluate(model, ds, mdst::EvalMode::Zsl))},
            {"gzsl", mdst::to_json(mdst::evaluate(model, ds, mdst::EvalMode::Gzsl))}};
}

int run_train(const std::string& variant, const std::string& config, std::uint64_t seed, const std::string& out,
              const std::string& data_dir) {
    mdst::RunConfig rc = load_run_config(config);
    if (!variant.empty()) rc.model.variant = mdst::parse_variant(variant);
    rc.model.validate();
    const DataSource data = data_dir.empty()
                                ? synthetic_source(rc.data, rc.data_seed_set ? rc.data_seed : seed)
                                : directory_source(data_dir);
    fs::create_directories(out);
    std::ofstream metrics(fs::path(out) / "metrics.jsonl");
    if (!metrics) throw mdst::DataError("cannot write " + (fs::path(out) / "metrics.jsonl").string());

    mdst::TrainOptions opts;
    opts.seed = seed;
    opts.on_epoch = [&](const mdst::EpochMetrics& m) {
        metrics << m.to_json().dump() << "\n";
        metrics.flush();
        std::cerr << "epoch " << m.epoch << " L_total " << std::setprecision(6) << m.l_total << "\n";
    };
    mdst::TrainResult result = rc.model.variant == mdst::Variant::Mdst ? mdst::train_mdst(data.dataset, rc.model, opts)
                                                                       : mdst::train_mdstpp(data.dataset, rc.model, opts);
    result.model.save(fs::path(out) / "weights", {{"seed", seed}, {"data", data.meta}});
    const json report = full_report(result.model, data.dataset);
    write_json(fs::path(out) / "report.json", report);
    std::cout << report.dump() << "\n";
    return 0;
}

int run_eval(const std::string& weights, const std::string& split, const std::string& data_dir) {
    std::ifstream is(fs::path(weights) / "model.json");
    if (!is) throw mdst::DataError("missing " + (fs::path(weights) / "model.json").string());
    const json meta = json::parse(is);
    const mdst::ModelConfig cfg = mdst::model_config_from_json(meta.at("config"));
    mdst::Model model(cfg, meta.at("audio_dim").get<std::size_t>(), meta.at("visual_dim").get<std::size_t>(), 0);
    model.load_weights(weights);
    const DataSource data = data_dir.empty() ? source_from_meta(meta.at("data")) : directory_source(data_dir);
    const auto mode = split == "zsl" ? mdst::EvalMode::Zsl : mdst::EvalMode::Gzsl;
    std::cout << mdst::to_json(mdst::evaluate(model, data.dataset, mode)).dump() << "\n";
    return 0;
}

int run_gradcheck(const std::string& module, double tolerance) {
    bool ok = true;
    for (const auto& c : mdst::run_gradcheck(module)) {
        const double err = c.report.max_rel_error();
        const bool pass = err < tolerance;
        ok = ok && pass;
        std::cout << std::left << std::setw(11) << c.module << std::setw(34) << c.name << std::scientific
                  << std::setprecision(3) << err << (pass ? "  PASS" : "  FAIL") << "\n";
    }
    return ok ? 0 : 1;
}

int run_generate(const std::string& config, std::uint64_t seed, const std::string& out) {
    const mdst::RunConfig rc = load_run_config(config);
    const mdst::Dataset ds = mdst::generate_synthetic(rc.data, rc.data_seed_set ? rc.data_seed : seed);
    mdst::save_features(out, ds);
    std::cout << "wrote " << ds.samples.size() << " samples over " << ds.classes.size() << " classes to " << out
              << "\n";
    return 0;
}

// Frames come from a [T, W] or [T, H, W] SPKT tensor of non-negative brightness.
int run_events(const std::string& input, double threshold, const std::string& out) {
    const mdst::Tensor video = mdst::spkt::read(input);
    if (video.rank() != 2 && video.rank() != 3) {
        throw mdst::DimensionError("video must be [T, W] or [T, H, W], got " + mdst::to_string(video.shape()));
    }
    std::vector<mdst::Tensor> frames;
    const std::size_t t = video.dim(0);
    const mdst::Shape frame_shape(video.shape().begin() + 1, video.shape().end());
    for (std::size_t i = 0; i < t; ++i) frames.push_back(mdst::reshape(mdst::slice(video, 0, i, 1), frame_shape));
    const mdst::EventStream events = mdst::generate_events(frames, threshold);
    if (out.empty()) {
        mdst::write_event_stream(std::cout, events);
    } else {
        mdst::write_event_stream(fs::path(out), events);
    }
    std::cerr << events.size() << " events\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Motion-decoupled spiking transformer toolkit"};
    app.require_subcommand(1);

    std::string variant, config, out, data_dir, weights, split = "zsl", module = "all", input;
    std::uint64_t seed = 0;
    double tolerance = 1e-4, threshold = mdst::kDefaultContrastThreshold;

    auto* train = app.add_subcommand("train", "train a model and write metrics, weights and a report");
    train->add_option("--model", variant, "mdst or mdstpp; overrides the config's model key")
        ->check(CLI::IsMember({"mdst", "mdstpp"}));
    train->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
    train->add_option("--seed", seed, "training seed; also the synthetic data seed unless data.seed is set");
    train->add_option("--out", out, "output directory")->required();
    train->add_option("--data", data_dir, "feature directory instead of synthetic data");

    auto* eval = app.add_subcommand("eval", "evaluate saved weights");
    eval->add_option("--weights", weights, "weights directory written by train")->required();
    eval->add_option("--split", split, "zsl or gzsl")->check(CLI::IsMember({"zsl", "gzsl"}));
    eval->add_option("--data", data_dir, "feature directory; defaults to the training data");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    grad->add_option("--module", module, "tensorcore, spiking, semantic, fusion, training or all");
    grad->add_option("--tolerance", tolerance, "maximum relative error");

    auto* gen = app.add_subcommand("generate", "write a synthetic feature dataset");
    gen->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
    gen->add_option("--seed", seed, "data seed");
    gen->add_option("--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("events", "convert a brightness video to an event stream");
    ev->add_option("--input", input, "SPKT tensor [T, W] or [T, H, W]")->required()->check(CLI::ExistingFile);
    ev->add_option("--threshold", threshold, "contrast threshold C");
    ev->add_option("--out", out, "event text file; stdout when omitted");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return run_train(variant, config, seed, out, data_dir);
        if (*eval) return run_eval(weights, split, data_dir);
        if (*grad) return run_gradcheck(module, tolerance);
        if (*gen) return run_generate(config, seed, out);
        if (*ev) return run_events(input, threshold, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
