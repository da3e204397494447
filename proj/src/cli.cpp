#include "anglekit/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anglekit/common.hpp"
#include "anglekit/pipeline.hpp"

namespace anglekit::cli {

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    std::string out;
    int workers = -1;  // -1 keeps the config value
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_workers = false) {
    cmd->add_option("--config", a.config_path, "config file (flat key=value lines)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", a.sets, "config override, key=value (repeatable)");
    cmd->add_option("--seed", a.seed, "seed governing all randomness")->capture_default_str();
    if (with_workers)
        cmd->add_option("--workers", a.workers, "prefetch batch assembly on worker threads");
}

config::RunConfig resolve_config(const CommonArgs& a) {
    config::RunConfig cfg;
    if (!a.config_path.empty()) cfg.load_file(a.config_path);
    for (const auto& kv : a.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ValidationError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (a.workers >= 0) cfg.set("train.workers", std::to_string(a.workers));
    return cfg;
}

std::filesystem::path resolve_out(const std::string& out, const char* cache_subdir) {
    if (!out.empty()) return out;
    if (const char* cache = std::getenv("ANGLEKIT_CACHE"))
        return std::filesystem::path(cache) / cache_subdir;
    throw ValidationError("pass --out or set ANGLEKIT_CACHE");
}

pipeline::AblationSpec parse_ablation(const std::string& text) {
    pipeline::AblationSpec spec;
    std::stringstream ss(text);
    std::string field;
    while (std::getline(ss, field, ',')) {
        auto eq = field.find('=');
        if (eq == std::string::npos)
            throw ValidationError("--ablation expects k=v pairs, got '" + field + "'");
        const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "encoder")
            spec.encoder = value;
        else if (key == "ppm")
            spec.ppm = config::RunConfig::parse_bool(value);
        else if (key == "kr")
            spec.kr = config::RunConfig::parse_bool(value);
        else if (key == "pred")
            spec.pred = value;
        else
            throw ValidationError("unknown --ablation key '" + key + "'");
    }
    if (spec.encoder.empty() || spec.pred.empty())
        throw ValidationError("--ablation needs at least encoder=... and pred=...");
    return spec;
}

std::optional<std::filesystem::path> opt_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"angle-closure screening toolkit: synthesis, training, prediction, evaluation"};
    app.require_subcommand(1);

    // synth ------------------------------------------------------------
    CommonArgs synth_a;
    int synth_count = -1;
    auto* synth = app.add_subcommand("synth", "generate the synthetic wedge dataset");
    add_common(synth, synth_a);
    synth->add_option("--count", synth_count, "number of images (overrides synth.count)");
    synth->add_option("--out", synth_a.out, "output directory (default $ANGLEKIT_CACHE/synth)");

    // prepare ----------------------------------------------------------
    CommonArgs prep_a;
    std::string prep_data, prep_images;
    double prep_ratio = -1.0;
    auto* prepare = app.add_subcommand("prepare", "split a manifest into train/test folds");
    add_common(prepare, prep_a);
    prepare->add_option("--data", prep_data, "annotation manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    prepare->add_option("--images", prep_images, "image root (default: manifest directory)");
    prepare->add_option("--ratio", prep_ratio, "train fraction (overrides split.ratio)");
    prepare->add_option("--out", prep_a.out, "output directory (default $ANGLEKIT_CACHE/prepare)");

    // train-cls ----------------------------------------------------------
    CommonArgs tcls_a;
    std::string tcls_train, tcls_val, tcls_images, tcls_resume;
    auto* tcls = app.add_subcommand("train-cls", "train the angle-closure classifier");
    add_common(tcls, tcls_a, /*with_workers=*/true);
    tcls->add_option("--train", tcls_train, "training manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    tcls->add_option("--val", tcls_val, "validation manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    tcls->add_option("--images", tcls_images, "image root (default: manifest directory)");
    tcls->add_option("--resume", tcls_resume, "checkpoint to resume from")
        ->check(CLI::ExistingFile);
    tcls->add_option("--out", tcls_a.out, "run directory")->required();

    // train-loc ----------------------------------------------------------
    CommonArgs tloc_a;
    std::string tloc_train, tloc_val, tloc_images, tloc_resume, tloc_coarse;
    int tloc_stage = 0;
    auto* tloc = app.add_subcommand("train-loc", "train the scleral-spur localizer");
    add_common(tloc, tloc_a, /*with_workers=*/true);
    tloc->add_option("--stage", tloc_stage, "training stage: 1 coarse, 2 refinement")
        ->required()
        ->check(CLI::IsMember({1, 2}));
    tloc->add_option("--train", tloc_train, "training manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    tloc->add_option("--val", tloc_val, "validation manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    tloc->add_option("--images", tloc_images, "image root (default: manifest directory)");
    tloc->add_option("--resume", tloc_resume, "checkpoint to resume from")
        ->check(CLI::ExistingFile);
    tloc->add_option("--coarse", tloc_coarse,
                     "stage-1 checkpoint (stage 2: warm start, and crop centers when "
                     "train.crops_from_coarse is set)")
        ->check(CLI::ExistingFile);
    tloc->add_option("--out", tloc_a.out, "run directory")->required();

    // predict ------------------------------------------------------------
    CommonArgs pred_a;
    std::string pred_task, pred_ckpt, pred_coarse, pred_fine, pred_data, pred_images;
    bool pred_overlays = false;
    auto* predict = app.add_subcommand("predict", "run inference and write predictions.csv");
    add_common(predict, pred_a);
    predict->add_option("--task", pred_task, "classification | localization")
        ->required()
        ->check(CLI::IsMember({"classification", "localization"}));
    predict->add_option("--ckpt", pred_ckpt, "classifier checkpoint (classification)")
        ->check(CLI::ExistingFile);
    predict->add_option("--coarse", pred_coarse, "stage-1 checkpoint (localization)")
        ->check(CLI::ExistingFile);
    predict->add_option("--fine", pred_fine, "stage-2 checkpoint (optional refinement)")
        ->check(CLI::ExistingFile);
    predict->add_option("--data", pred_data, "manifest CSV to predict on")
        ->required()
        ->check(CLI::ExistingFile);
    predict->add_option("--images", pred_images, "image root (default: manifest directory)");
    predict->add_flag("--overlays", pred_overlays, "emit heatmap overlay PNGs (localization)");
    predict->add_option("--out", pred_a.out, "run directory")->required();

    // eval ---------------------------------------------------------------
    CommonArgs eval_a;
    std::string eval_task, eval_pred, eval_gt, eval_images;
    auto* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
    add_common(eval_cmd, eval_a);
    eval_cmd->add_option("--task", eval_task, "classification | localization")
        ->required()
        ->check(CLI::IsMember({"classification", "localization"}));
    eval_cmd->add_option("--pred", eval_pred, "predictions.csv")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--gt", eval_gt, "ground-truth manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--images", eval_images, "image root (default: manifest directory)");
    eval_cmd->add_option("--out", eval_a.out, "report directory")->required();

    // report --------------------------------------------------------------
    CommonArgs rep_a;
    std::string rep_gt, rep_images, rep_cls, rep_loc;
    std::vector<std::string> rep_ablation;
    auto* report = app.add_subcommand("report", "combined report over prediction files");
    add_common(report, rep_a);
    report->add_option("--gt", rep_gt, "ground-truth manifest CSV")
        ->required()
        ->check(CLI::ExistingFile);
    report->add_option("--images", rep_images, "image root (default: manifest directory)");
    report->add_option("--cls-pred", rep_cls, "classification predictions.csv")
        ->check(CLI::ExistingFile);
    report->add_option("--loc-pred", rep_loc, "localization predictions.csv")
        ->check(CLI::ExistingFile);
    report->add_option("--ablation", rep_ablation,
                       "ablation row: encoder=NAME,ppm=BOOL,kr=BOOL,pred=FILE (repeatable)");
    report->add_option("--out", rep_a.out, "report directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (synth->parsed()) {
            auto cfg = resolve_config(synth_a);
            if (synth_count >= 0) cfg.set("synth.count", std::to_string(synth_count));
            const auto out = resolve_out(synth_a.out, "synth");
            auto m = pipeline::cmd_synth(cfg, synth_a.seed, out);
            std::cerr << "[synth] wrote " << m.records.size() << " images under " << out
                      << "\n";
        } else if (prepare->parsed()) {
            auto cfg = resolve_config(prep_a);
            if (prep_ratio >= 0.0) cfg.set("split.ratio", std::to_string(prep_ratio));
            const auto out = resolve_out(prep_a.out, "prepare");
            pipeline::cmd_prepare(cfg, prep_data, prep_images, prep_a.seed, out);
            std::cerr << "[prepare] wrote train.csv/test.csv under " << out << "\n";
        } else if (tcls->parsed()) {
            auto cfg = resolve_config(tcls_a);
            auto outcome = pipeline::cmd_train_cls(cfg, tcls_train, tcls_val, tcls_images,
                                                   tcls_a.seed, tcls_a.out, opt_path(tcls_resume));
            std::cerr << "[train-cls] best val AUC " << outcome.history.best_metric << " (epoch "
                      << outcome.history.best_epoch << ") -> " << outcome.best << "\n";
        } else if (tloc->parsed()) {
            auto cfg = resolve_config(tloc_a);
            auto outcome = pipeline::cmd_train_loc(cfg, tloc_stage, tloc_train, tloc_val,
                                                   tloc_images, tloc_a.seed, tloc_a.out,
                                                   opt_path(tloc_resume), opt_path(tloc_coarse));
            std::cerr << "[train-loc] best val ED " << outcome.history.best_metric << " px (epoch "
                      << outcome.history.best_epoch << ") -> " << outcome.best << "\n";
        } else if (predict->parsed()) {
            auto cfg = resolve_config(pred_a);
            if (pred_task == "classification") {
                if (pred_ckpt.empty())
                    throw ValidationError("predict --task classification needs --ckpt");
                pipeline::cmd_predict_cls(pred_ckpt, pred_data, pred_images, pred_a.out);
            } else {
                if (pred_coarse.empty())
                    throw ValidationError("predict --task localization needs --coarse");
                const bool overlays = pred_overlays || cfg.get_bool("report.overlays");
                pipeline::cmd_predict_loc(pred_coarse, opt_path(pred_fine), pred_data,
                                          pred_images, pred_a.out, overlays);
            }
            std::cerr << "[predict] wrote " << (std::filesystem::path(pred_a.out) /
                                                "predictions.csv")
                      << "\n";
        } else if (eval_cmd->parsed()) {
            auto cfg = resolve_config(eval_a);
            pipeline::cmd_eval(eval_task, eval_pred, eval_gt, eval_images,
                               cfg.get_double("eval.threshold"), eval_a.out);
            std::cerr << "[eval] wrote report under " << eval_a.out << "\n";
        } else if (report->parsed()) {
            auto cfg = resolve_config(rep_a);
            std::vector<pipeline::AblationSpec> specs;
            for (const auto& text : rep_ablation) specs.push_back(parse_ablation(text));
            pipeline::cmd_report(opt_path(rep_cls), opt_path(rep_loc), specs, rep_gt, rep_images,
                                 cfg.get_double("eval.threshold"), rep_a.out);
            std::cerr << "[report] wrote report under " << rep_a.out << "\n";
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace anglekit::cli
