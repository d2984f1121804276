// cxrnet command-line front end: train, evaluate, predict, explain, synth,
// augment-preview and metrics.
//
// Exit codes: 0 ok, 1 usage, 2 dataset layout, 3 image format, 4 checkpoint
// corruption, 5 invalid parameter/shape/split, 6 numerical failure, 7 I/O.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cxrnet/cxrnet.hpp"

namespace fs = std::filesystem;

namespace {

int exit_code(cxr::ErrorKind k) {
    switch (k) {
        case cxr::ErrorKind::layout: return 2;
        case cxr::ErrorKind::format: return 3;
        case cxr::ErrorKind::corruption: return 4;
        case cxr::ErrorKind::numerical: return 6;
        case cxr::ErrorKind::io: return 7;
        case cxr::ErrorKind::shape:
        case cxr::ErrorKind::parameter:
        case cxr::ErrorKind::iteration:
        case cxr::ErrorKind::split:
        case cxr::ErrorKind::degenerate_batch:
        case cxr::ErrorKind::undefined_auc: return 5;
    }
    return 1;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    cxr::require(fs::is_directory(dir), cxr::ErrorKind::io, "cannot create output directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Assigns splits when the directory was not pre-split, using the run's seed
// and fractions so train and evaluate agree on membership.
cxr::DatasetIndex assign_splits(cxr::DatasetIndex index, const cxr::RunConfig& run) {
    const bool presplit = std::any_of(index.entries.begin(), index.entries.end(),
                                      [](const auto& e) { return e.split != cxr::Split::unsplit; });
    if (presplit) return index;
    return cxr::split(index, {run.split_train, run.split_val, run.split_test}, run.seed);
}

cxr::GrayImage load_input(const std::string& path) { return cxr::read_pgm_file(path); }

cxr::Tensor<cxr::real_t> model_input(const cxr::GrayImage& img, const cxr::RunConfig& run) {
    const auto pre = cxr::Preprocessor::from(run);
    const int s = run.model.input_size;
    return cxr::normalize<cxr::real_t>(pre.prepare(img)).reshaped({1, 1, s, s});
}

void write_report_files(const std::string& dir, const std::string& stem, const cxr::EvalReport& r) {
    cxr::write_text_file(join(dir, stem + "_report.txt"), cxr::format_report(r));
    cxr::write_text_file(join(dir, stem + "_metrics.txt"), cxr::report_key_values(r));
    if (r.auc_defined) cxr::write_text_file(join(dir, stem + "_roc.txt"), cxr::roc_points_text(r));
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, out, config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads, epochs;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    cxr::RunConfig run;
    if (!a.config.empty()) run = cxr::load_run_config(a.config);
    if (a.seed) run.seed = *a.seed;
    if (a.threads) run.threads = *a.threads;
    if (a.epochs) run.epochs = *a.epochs;
    cxr::validate(run);
    cxr::count_parameters(run.model);  // geometry check before touching the data

    const cxr::DatasetIndex index = assign_splits(cxr::scan_directory(a.data), run);
    ensure_dir(a.out);
    cxr::write_text_file(join(a.out, "config.txt"), cxr::to_text(run));
    cxr::write_text_file(join(a.out, "manifest.txt"), cxr::manifest_text(index));

    const auto pre = cxr::Preprocessor::from(run);
    cxr::Loader<cxr::real_t> train(index, cxr::Split::train, pre, run.batch, true, run.augment, run.seed, run.threads);
    cxr::Loader<cxr::real_t> val(index, cxr::Split::val, pre, run.batch, false, false, run.seed, run.threads);

    cxr::Rng init = cxr::Rng::derive(run.seed, {0x11ULL});
    cxr::Model<cxr::real_t> model(run.model, init);
    if (!a.quiet)
        std::cout << "train " << train.size() << "  val " << val.size() << "  skipped " << index.skipped
                  << "  parameters " << model.parameter_count() << "\n";

    cxr::TrainOptions opts;
    opts.checkpoint_path = join(a.out, "model.ckpt");
    opts.run = run;
    opts.log = a.quiet ? nullptr : &std::cout;
    const auto history = cxr::train<cxr::real_t>(
        model, train, [&](cxr::Model<cxr::real_t>& m) { return cxr::evaluate(m, val); }, cxr::TrainHyper::from(run),
        opts);
    cxr::write_text_file(join(a.out, "history.txt"), cxr::history_text(history));

    const auto report = cxr::evaluate(model, val);
    write_report_files(a.out, "val", report);
    if (!a.quiet) {
        std::cout << "best epoch " << history.best_epoch << "  val_loss " << cxr::fmt_fixed(history.best_val_loss, 6)
                  << (history.stopped_early ? "  (early stop)" : "") << "\n";
        std::cout << cxr::format_report(report);
    }
    return 0;
}

struct EvaluateArgs {
    std::string checkpoint, data, split = "test", out;
};

int cmd_evaluate(const EvaluateArgs& a) {
    auto loaded = cxr::load_checkpoint_full<cxr::real_t>(a.checkpoint);
    cxr::DatasetIndex index = cxr::scan_directory(a.data, false);
    cxr::Split which = cxr::Split::test;
    if (a.split == "all") {
        for (auto& e : index.entries) e.split = cxr::Split::test;
    } else {
        which = cxr::parse_split(a.split);
        index = assign_splits(std::move(index), loaded.run);
    }
    cxr::Loader<cxr::real_t> loader(index, which, cxr::Preprocessor::from(loaded.run), loaded.run.batch, false, false,
                                    loaded.run.seed, loaded.run.threads);
    const auto report = cxr::evaluate(loaded.model, loader);
    std::cout << cxr::format_report(report);
    if (!a.out.empty()) {
        ensure_dir(a.out);
        write_report_files(a.out, a.split, report);
    }
    return 0;
}

struct PredictArgs {
    std::string checkpoint;
    std::vector<std::string> images;
};

int cmd_predict(const PredictArgs& a) {
    auto loaded = cxr::load_checkpoint_full<cxr::real_t>(a.checkpoint);
    for (const auto& path : a.images) {
        const auto p = static_cast<double>(loaded.model.predict_proba(model_input(load_input(path), loaded.run))[0]);
        std::printf("%.6f\t%s\t%s\n", p, cxr::label_name(cxr::classify(p)), path.c_str());
    }
    return 0;
}

struct ExplainArgs {
    std::string checkpoint, image, out;
    std::optional<int> block;
    bool feature_maps = false;
};

int cmd_explain(const ExplainArgs& a) {
    auto loaded = cxr::load_checkpoint_full<cxr::real_t>(a.checkpoint);
    auto& model = loaded.model;
    if (a.block) cxr::require(*a.block >= 0, cxr::ErrorKind::parameter, "--block must be >= 0");
    const std::size_t block = a.block ? static_cast<std::size_t>(*a.block) : model.block_count() - 1;
    cxr::require_block(block, model.block_count());
    const auto x = model_input(load_input(a.image), loaded.run);
    ensure_dir(a.out);

    const auto hm = cxr::grad_cam(model, x, block, a.image);
    cxr::write_pgm_file(join(a.out, "gradcam.pgm"), cxr::map_to_image(hm.values));
    const double p = static_cast<double>(model.predict_proba(x)[0]);
    std::string side = "# input=" + hm.input_ref + "\n# source_block=" + std::to_string(hm.source_layer) +
                       "\n# probability=" + cxr::fmt_fixed(p, 6) + "\n# constant=" + (hm.constant ? "true" : "false") +
                       "\n";
    cxr::write_text_file(join(a.out, "gradcam.txt"), side + cxr::map_text(hm.values));

    if (a.feature_maps) {
        const auto maps = cxr::feature_maps(model, x, block);
        const std::string dir = join(a.out, "feature_maps");
        ensure_dir(dir);
        for (std::size_t i = 0; i < maps.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "map_%03zu.pgm", i);
            cxr::write_pgm_file(join(dir, name), cxr::map_to_image(maps[i]));
        }
    }
    std::printf("%.6f\t%s\tblock %zu\t%s\n", p, cxr::label_name(cxr::classify(p)), block,
                join(a.out, "gradcam.pgm").c_str());
    return 0;
}

struct SynthArgs {
    std::string out;
    int n = 200, size = 64;
    std::uint64_t seed = 42;
};

int cmd_synth(const SynthArgs& a) {
    const auto ds = cxr::synth_dataset(a.n, a.size, a.seed, a.out);
    std::cout << "wrote " << ds.index.entries.size() << " images to " << a.out << "\n";
    return 0;
}

struct PreviewArgs {
    std::string image, out, config;
    std::uint64_t seed = 42;
    int count = 8;
};

int cmd_augment_preview(const PreviewArgs& a) {
    cxr::RunConfig run;
    if (!a.config.empty()) run = cxr::load_run_config(a.config);
    cxr::validate(run);
    cxr::require(a.count >= 1, cxr::ErrorKind::parameter, "--count must be >= 1");
    const auto pre = cxr::Preprocessor::from(run);
    const cxr::GrayImage base = pre.prepare(load_input(a.image));
    ensure_dir(a.out);
    cxr::write_pgm_file(join(a.out, "preview_base.pgm"), base);
    std::string log = "# variant rotation_deg hflip zoom shear\n";
    for (int i = 0; i < a.count; ++i) {
        cxr::Rng rng = cxr::Rng::derive(a.seed, {0xa9ULL, static_cast<std::uint64_t>(i)});
        const auto p = cxr::random_augment_params(rng, pre.ranges);
        char name[32];
        std::snprintf(name, sizeof name, "preview_%02d.pgm", i);
        cxr::write_pgm_file(join(a.out, name), cxr::apply_augment(base, p));
        char line[160];
        std::snprintf(line, sizeof line, "%d %.9g %d %.9g %.9g\n", i, p.rotation_deg, p.hflip ? 1 : 0, p.zoom, p.shear);
        log += line;
    }
    cxr::write_text_file(join(a.out, "params.txt"), log);
    std::cout << "wrote " << a.count << " variants to " << a.out << "\n";
    return 0;
}

struct MetricsArgs {
    long tp = 0, tn = 0, fp = 0, fn = 0;
};

int cmd_metrics(const MetricsArgs& a) {
    std::cout << cxr::format_report(cxr::metrics_from_counts(a.tp, a.tn, a.fp, a.fn));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cxrnet: chest X-ray pneumonia classifier"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "cxrnet 1.0.0");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Train a model on a dataset directory");
    c_train->add_option("--data", train.data, "Dataset root (NORMAL/PNEUMONIA or train/val/test)")->required();
    c_train->add_option("--out", train.out, "Output directory")->required();
    c_train->add_option("--config", train.config, "key=value run configuration file");
    c_train->add_option("--seed", train.seed, "Override the configured seed");
    c_train->add_option("--threads", train.threads, "Preprocessing threads");
    c_train->add_option("--epochs", train.epochs, "Override the configured epoch limit");
    c_train->add_flag("--quiet", train.quiet, "Suppress per-epoch logging");

    EvaluateArgs eval;
    auto* c_eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset split");
    c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
    c_eval->add_option("--data", eval.data, "Dataset root")->required();
    c_eval->add_option("--split", eval.split, "train | val | test | all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    c_eval->add_option("--out", eval.out, "Directory for report, metrics and ROC files");

    PredictArgs predict;
    auto* c_predict = app.add_subcommand("predict", "Print probability and class for images");
    c_predict->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
    c_predict->add_option("--image", predict.images, "PGM image (repeatable)")->required();

    ExplainArgs explain;
    auto* c_explain = app.add_subcommand("explain", "Write a Grad-CAM heatmap for an image");
    c_explain->add_option("--checkpoint", explain.checkpoint, "Checkpoint file")->required();
    c_explain->add_option("--image", explain.image, "PGM image")->required();
    c_explain->add_option("--out", explain.out, "Output directory")->required();
    c_explain->add_option("--block", explain.block, "Conv block index (default: last)");
    c_explain->add_flag("--feature-maps", explain.feature_maps, "Also write the block's feature maps");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Generate the synthetic blob dataset");
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--n", synth.n, "Images per class");
    c_synth->add_option("--size", synth.size, "Image side length");
    c_synth->add_option("--seed", synth.seed, "Generator seed");

    PreviewArgs preview;
    auto* c_preview = app.add_subcommand("augment-preview", "Write random augmentations of one image");
    c_preview->add_option("--image", preview.image, "PGM image")->required();
    c_preview->add_option("--out", preview.out, "Output directory")->required();
    c_preview->add_option("--seed", preview.seed, "Augmentation seed");
    c_preview->add_option("--count", preview.count, "Number of variants");
    c_preview->add_option("--config", preview.config, "Run configuration (preprocessing and ranges)");

    MetricsArgs metrics;
    auto* c_metrics = app.add_subcommand("metrics", "Report metrics for given confusion counts");
    c_metrics->add_option("--tp", metrics.tp)->required();
    c_metrics->add_option("--tn", metrics.tn)->required();
    c_metrics->add_option("--fp", metrics.fp)->required();
    c_metrics->add_option("--fn", metrics.fn)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*c_train) return cmd_train(train);
        if (*c_eval) return cmd_evaluate(eval);
        if (*c_predict) return cmd_predict(predict);
        if (*c_explain) return cmd_explain(explain);
        if (*c_synth) return cmd_synth(synth);
        if (*c_preview) return cmd_augment_preview(preview);
        if (*c_metrics) return cmd_metrics(metrics);
    } catch (const cxr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
