#include "anglekit/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "anglekit/common.hpp"
#include "anglekit/image_io.hpp"

namespace anglekit::pipeline {

namespace {

torch::Tensor mat_to_tensor(const cv::Mat& m) {
    TORCH_CHECK(m.type() == CV_32F && m.isContinuous(), "expected continuous float image");
    return torch::from_blob(m.data, {m.rows, m.cols}, torch::kFloat32).clone();
}

}  // namespace

synth::SynthConfig synth_config(const config::RunConfig& cfg, std::uint64_t seed) {
    synth::SynthConfig s;
    s.count = cfg.get_int("synth.count");
    s.height = cfg.get_int("synth.height");
    s.width = cfg.get_int("synth.width");
    s.aperture_open_lo = cfg.get_double("synth.open_lo");
    s.aperture_open_hi = cfg.get_double("synth.open_hi");
    s.aperture_closed_lo = cfg.get_double("synth.closed_lo");
    s.aperture_closed_hi = cfg.get_double("synth.closed_hi");
    s.noise_sigma = cfg.get_double("synth.noise_sigma");
    s.closed_prior = cfg.get_double("synth.closed_prior");
    s.margin = cfg.get_int("synth.margin");
    s.seed = seed;
    return s;
}

models::ClassifierConfig classifier_config(const config::RunConfig& cfg) {
    models::ClassifierConfig c;
    c.stage_depths = cfg.get_ints("cls.depths");
    c.base_width = cfg.get_int("cls.base_width");
    c.scale_factor = cfg.get_double("cls.scale");
    c.input_size = cfg.get_int("cls.input_size");
    c.tweak_b = cfg.get_bool("cls.tweak_b");
    c.tweak_d = cfg.get_bool("cls.tweak_d");
    c.zero_init_residual = cfg.get_bool("cls.zero_init_residual");
    return c;
}

models::LocalizerConfig localizer_config(const config::RunConfig& cfg) {
    models::LocalizerConfig c;
    c.encoder.variant = cfg.get_string("loc.encoder");
    c.encoder.stage_widths = cfg.get_ints("loc.widths");
    c.encoder.depth_mult = cfg.get_double("loc.depth_mult");
    c.encoder.width_mult = cfg.get_double("loc.width_mult");
    c.encoder.base_depths = cfg.get_ints("loc.base_depths");
    c.ppm_enabled = cfg.get_bool("loc.ppm");
    c.ppm_bins = cfg.get_ints("loc.ppm_bins");
    c.decoder_width = cfg.get_int("loc.decoder_width");
    c.skip_mode = cfg.get_string("loc.skip_mode");
    c.input_size = cfg.get_int("loc.pad");
    c.heatmap_stride = cfg.get_int("loc.stride");
    c.head_bias = cfg.get_double("loc.head_bias");
    return c;
}

train::OptimConfig optim_config(const config::RunConfig& cfg) {
    train::OptimConfig o;
    o.lr0 = cfg.get_double("train.lr0");
    o.adam_beta1 = cfg.get_double("train.adam_beta1");
    o.adam_beta2 = cfg.get_double("train.adam_beta2");
    o.adam_eps = cfg.get_double("train.adam_eps");
    o.weight_decay = cfg.get_double("train.weight_decay");
    return o;
}

train::TrainConfig train_config(const config::RunConfig& cfg, bool classification,
                                std::uint64_t seed) {
    train::TrainConfig t;
    t.batch_size = cfg.get_int("train.batch_size");
    if (t.batch_size == 0) t.batch_size = classification ? 72 : 27;
    t.epochs = cfg.get_int("train.epochs");
    t.stop_after_epochs = cfg.get_int("train.stop_after");
    t.seed = seed;
    t.crop_jitter = cfg.get_double("train.crop_jitter");
    t.crops_from_coarse = cfg.get_bool("train.crops_from_coarse");
    t.grad_clip = cfg.get_double("train.grad_clip");
    t.workers = cfg.get_int("train.workers");
    t.augment_shift = cfg.get_int("train.augment_shift");
    return t;
}

train::ClsLossParams cls_loss_params(const config::RunConfig& cfg) {
    train::ClsLossParams p;
    p.hybrid.rho1 = cfg.get_double("loss.rho1");
    p.hybrid.rho2 = cfg.get_double("loss.rho2");
    p.focal.alpha = cfg.get_double("loss.alpha");
    p.focal.gamma = cfg.get_double("loss.gamma");
    p.focal.class_balanced = cfg.get_bool("loss.class_balanced_alpha");
    p.fbeta.beta = cfg.get_double("loss.beta");
    p.fbeta.eps = cfg.get_double("loss.eps");
    p.fbeta.conventional = cfg.get_bool("loss.fbeta_conventional");
    return p;
}

train::LocTrainParams loc_train_params(const config::RunConfig& cfg, int stage) {
    train::LocTrainParams p;
    p.pad_size = cfg.get_int("loc.pad");
    p.crop_w = cfg.get_int("loc.crop_w");
    p.crop_h = cfg.get_int("loc.crop_h");
    p.crop_pad_w = cfg.get_int("loc.crop_pad_w");
    p.crop_pad_h = cfg.get_int("loc.crop_pad_h");
    p.stride = cfg.get_int("loc.stride");
    const double s2 = cfg.get_double("loc.sigma_stage2");
    p.sigma = (stage == 2 && s2 >= 0.0) ? s2 : cfg.get_double("loc.sigma");
    p.kr.rho3 = cfg.get_double("loss.rho3");
    p.kr.rho4 = cfg.get_double("loss.rho4");
    p.kr.eps = cfg.get_double("loss.eps");
    const auto& loss = cfg.get_string("loc.loss");
    if (loss != "kr" && loss != "mse")
        throw ValidationError("loc.loss must be 'kr' or 'mse', got '" + loss + "'");
    p.use_mse = loss == "mse";
    return p;
}

models::TwoStageParams two_stage_params(const config::RunConfig& cfg) {
    models::TwoStageParams p;
    p.resize_size = cfg.get_int("loc.resize");
    p.pad_size = cfg.get_int("loc.pad");
    p.crop_w = cfg.get_int("loc.crop_w");
    p.crop_h = cfg.get_int("loc.crop_h");
    p.crop_pad_w = cfg.get_int("loc.crop_pad_w");
    p.crop_pad_h = cfg.get_int("loc.crop_pad_h");
    p.stride = cfg.get_int("loc.stride");
    p.stage2_min_peak = cfg.get_double("loc.stage2_min_peak");
    return p;
}

std::vector<data::HalfSample> split_all(const data::DatasetManifest& m, bool mirror_right) {
    std::vector<data::HalfSample> halves;
    halves.reserve(m.records.size() * 2);
    for (const auto& rec : m.records) {
        auto img = data::load_raw_image(m, rec);
        auto [left, right] = data::split_half(img, rec, mirror_right);
        halves.push_back(std::move(left));
        halves.push_back(std::move(right));
    }
    return halves;
}

train::ClsData build_cls_data(const data::DatasetManifest& m, const config::RunConfig& cfg) {
    const int size = cfg.get_int("cls.input_size");
    const auto halves = split_all(m, cfg.get_bool("data.mirror_right"));
    std::vector<torch::Tensor> xs;
    std::vector<float> ys;
    xs.reserve(halves.size());
    for (const auto& h : halves) {
        auto [resized, back] = data::resize_for_task(h, data::ResizeTask::classification, size);
        (void)back;
        xs.push_back(mat_to_tensor(resized).unsqueeze(0));
        ys.push_back(static_cast<float>(h.label));
    }
    train::ClsData d;
    d.x = torch::stack(xs, 0);
    d.y = torch::tensor(ys, torch::kFloat32).reshape({-1, 1});
    return d;
}

train::LocData build_loc_data(const data::DatasetManifest& m, const config::RunConfig& cfg) {
    const int size = cfg.get_int("loc.resize");
    const auto halves = split_all(m, cfg.get_bool("data.mirror_right"));
    train::LocData d;
    for (const auto& h : halves) {
        auto [resized, to_half] =
            data::resize_for_task(h, data::ResizeTask::localization_stage1, size);
        d.resized.push_back(resized);
        d.gt_resized.push_back(geometry::apply_transform(geometry::invert(to_half), h.ss));
        d.gt_raw.push_back(geometry::apply_transform(h.to_raw, h.ss));
        d.resized_to_raw.push_back(geometry::compose(h.to_raw, to_half));
    }
    return d;
}

namespace {

config::RunConfig config_from_checkpoint(const train::CheckpointMeta& meta,
                                         const std::filesystem::path& ckpt) {
    if (meta.config_echo.empty())
        throw ValidationError("checkpoint has no config echo: " + ckpt.string());
    config::RunConfig cfg;
    cfg.load_string(meta.config_echo);
    return cfg;
}

}  // namespace

std::pair<models::Classifier, config::RunConfig> load_classifier(
    const std::filesystem::path& ckpt) {
    auto meta = train::read_checkpoint_meta(ckpt);
    if (meta.task != "classifier")
        throw ValidationError("checkpoint holds a " + meta.task + " model, expected classifier");
    auto cfg = config_from_checkpoint(meta, ckpt);
    auto model = models::build_classifier(classifier_config(cfg));
    train::load_checkpoint(ckpt, *model, nullptr);
    return {std::move(model), std::move(cfg)};
}

std::pair<models::Localizer, config::RunConfig> load_localizer(const std::filesystem::path& ckpt,
                                                               int expected_stage) {
    auto meta = train::read_checkpoint_meta(ckpt);
    const std::string want = "localizer_stage" + std::to_string(expected_stage);
    if (meta.task != want)
        throw ValidationError("checkpoint holds a " + meta.task + " model, expected " + want);
    auto cfg = config_from_checkpoint(meta, ckpt);
    auto model = models::build_localizer(localizer_config(cfg));
    train::load_checkpoint(ckpt, *model, nullptr);
    return {std::move(model), std::move(cfg)};
}

void write_run_echo(const std::filesystem::path& out, const config::RunConfig& cfg,
                    const std::vector<std::string>& invocation_lines) {
    std::filesystem::create_directories(out);
    std::ofstream f(out / "config.txt");
    if (!f) throw std::runtime_error("cannot write config echo");
    for (const auto& line : invocation_lines) f << "# " << line << "\n";
    f << cfg.echo();
}

data::DatasetManifest cmd_synth(const config::RunConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& out) {
    auto m = synth::synth_generate(synth_config(cfg, seed), out);
    write_run_echo(out, cfg, {"synth seed=" + std::to_string(seed)});
    return m;
}

void cmd_prepare(const config::RunConfig& cfg, const std::filesystem::path& manifest,
                 const std::filesystem::path& images_root, std::uint64_t seed,
                 const std::filesystem::path& out) {
    const double ratio = cfg.get_double("split.ratio");
    auto m = data::load_manifest(manifest, images_root);
    auto [train_m, test_m] = data::make_split(m, ratio, seed);
    std::filesystem::create_directories(out);
    data::save_manifest(train_m, out / "train.csv");
    data::save_manifest(test_m, out / "test.csv");
    write_run_echo(out, cfg,
                   {"prepare data=" + manifest.string() + " seed=" + std::to_string(seed)});
}

TrainOutcome cmd_train_cls(const config::RunConfig& cfg,
                           const std::filesystem::path& train_manifest,
                           const std::filesystem::path& val_manifest,
                           const std::filesystem::path& images_root, std::uint64_t seed,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& resume) {
    auto train_m = data::load_manifest(train_manifest, images_root);
    auto val_m = data::load_manifest(val_manifest, images_root);
    auto train_d = build_cls_data(train_m, cfg);
    auto val_d = build_cls_data(val_m, cfg);

    torch::manual_seed(seed);
    auto model = models::build_classifier(classifier_config(cfg));

    write_run_echo(out, cfg,
                   {"train-cls seed=" + std::to_string(seed),
                    "train=" + train_manifest.string() + " val=" + val_manifest.string()});
    auto hist = train::train_classifier(model, train_d, val_d, optim_config(cfg),
                                        train_config(cfg, true, seed), cls_loss_params(cfg), out,
                                        cfg.echo(), resume);
    return {std::move(hist), out / "best.ckpt", out / "last.ckpt"};
}

namespace {

// Stage-1 inference over a LocData fold, filling coarse_resized (used when
// stage-2 crops follow live coarse predictions instead of jittered truth).
void fill_coarse(train::LocData& d, models::Localizer& model, int pad_size, int stride) {
    torch::NoGradGuard ng;
    model->eval();
    d.coarse_resized.clear();
    for (std::size_t i = 0; i < d.resized.size(); ++i) {
        const auto& m = d.resized[i];
        if (m.cols > pad_size || m.rows > pad_size)
            throw ValidationError("stage-1 pad size smaller than a resized input");
        cv::Mat canvas = cv::Mat::zeros(pad_size, pad_size, CV_32F);
        m.copyTo(canvas(cv::Rect(0, 0, m.cols, m.rows)));
        auto out = model->forward(mat_to_tensor(canvas).unsqueeze(0).unsqueeze(0))[0][0];
        cv::Mat hm(static_cast<int>(out.size(0)), static_cast<int>(out.size(1)), CV_32F);
        auto c = out.contiguous();
        std::memcpy(hm.data, c.data_ptr<float>(), sizeof(float) * hm.total());
        geometry::Point2D p{m.cols / 2.0, m.rows / 2.0};
        if (auto dr = geometry::decode_heatmap({hm, stride}))
            p = geometry::heatmap_to_input(dr->point, stride);
        p.x = std::clamp(p.x, 0.0, m.cols - 1.0);
        p.y = std::clamp(p.y, 0.0, m.rows - 1.0);
        d.coarse_resized.push_back(p);
    }
}

}  // namespace

TrainOutcome cmd_train_loc(const config::RunConfig& cfg, int stage,
                           const std::filesystem::path& train_manifest,
                           const std::filesystem::path& val_manifest,
                           const std::filesystem::path& images_root, std::uint64_t seed,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& resume,
                           const std::optional<std::filesystem::path>& coarse_ckpt) {
    if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2");
    auto train_m = data::load_manifest(train_manifest, images_root);
    auto val_m = data::load_manifest(val_manifest, images_root);
    auto train_d = build_loc_data(train_m, cfg);
    auto val_d = build_loc_data(val_m, cfg);

    auto tc = train_config(cfg, false, seed);
    const auto lp = loc_train_params(cfg, stage);

    torch::manual_seed(seed);
    auto model = models::build_localizer(localizer_config(cfg));

    if (stage == 2) {
        if (tc.crops_from_coarse) {
            if (!coarse_ckpt)
                throw ValidationError("crops_from_coarse needs a stage-1 checkpoint");
            auto [coarse, ccfg] = load_localizer(*coarse_ckpt, 1);
            fill_coarse(train_d, coarse, ccfg.get_int("loc.pad"), ccfg.get_int("loc.stride"));
            fill_coarse(val_d, coarse, ccfg.get_int("loc.pad"), ccfg.get_int("loc.stride"));
        }
        // Warm-starting from the stage-1 weights when the checkpoint is given
        // (the architectures match; only the training regime differs).
        if (coarse_ckpt && !resume) {
            auto meta = train::read_checkpoint_meta(*coarse_ckpt);
            if (meta.task == "localizer_stage1") train::load_checkpoint(*coarse_ckpt, *model, nullptr);
        }
    }

    write_run_echo(out, cfg,
                   {"train-loc stage=" + std::to_string(stage) + " seed=" + std::to_string(seed),
                    "train=" + train_manifest.string() + " val=" + val_manifest.string()});
    auto hist = train::train_localizer(model, train_d, val_d, stage, optim_config(cfg), tc, lp,
                                       out, cfg.echo(), resume);
    return {std::move(hist), out / "best.ckpt", out / "last.ckpt"};
}

void cmd_predict_cls(const std::filesystem::path& ckpt, const std::filesystem::path& manifest,
                     const std::filesystem::path& images_root,
                     const std::filesystem::path& out) {
    auto [model, cfg] = load_classifier(ckpt);
    auto m = data::load_manifest(manifest, images_root);
    const int size = cfg.get_int("cls.input_size");
    const auto halves = split_all(m, cfg.get_bool("data.mirror_right"));

    std::vector<eval::PredictionRow> rows;
    constexpr std::int64_t kBatch = 72;
    for (std::size_t i0 = 0; i0 < halves.size(); i0 += kBatch) {
        const std::size_t i1 = std::min(halves.size(), i0 + kBatch);
        std::vector<torch::Tensor> xs;
        for (std::size_t i = i0; i < i1; ++i) {
            auto [resized, back] =
                data::resize_for_task(halves[i], data::ResizeTask::classification, size);
            (void)back;
            xs.push_back(mat_to_tensor(resized).unsqueeze(0));
        }
        auto scores = models::classify(model, torch::stack(xs, 0)).reshape({-1});
        for (std::size_t i = i0; i < i1; ++i)
            rows.push_back({halves[i].image_id, halves[i].side,
                            scores[static_cast<std::int64_t>(i - i0)].item<double>(),
                            std::nullopt});
    }
    std::filesystem::create_directories(out);
    eval::save_predictions(rows, out / "predictions.csv");
    write_run_echo(out, cfg, {"predict task=classification ckpt=" + ckpt.string()});
}

namespace {

void write_overlay(const data::HalfSample& half, models::Localizer& model,
                   const models::TwoStageParams& p, const std::filesystem::path& path) {
    torch::NoGradGuard ng;
    model->eval();
    auto [resized, to_half] =
        data::resize_for_task(half, data::ResizeTask::localization_stage1, p.resize_size);
    cv::Mat padded = models::pad_to(resized, p.pad_size, p.pad_size);
    auto out = model->forward(mat_to_tensor(padded).unsqueeze(0).unsqueeze(0))[0][0];
    cv::Mat hm(static_cast<int>(out.size(0)), static_cast<int>(out.size(1)), CV_32F);
    auto c = out.contiguous();
    std::memcpy(hm.data, c.data_ptr<float>(), sizeof(float) * hm.total());

    cv::Mat hm_up;
    cv::resize(hm, hm_up, padded.size(), 0, 0, cv::INTER_LINEAR);
    cv::Mat gray8, heat8;
    padded.convertTo(gray8, CV_8U, 255.0);
    hm_up.convertTo(heat8, CV_8U, 255.0);
    cv::Mat bgr;
    cv::cvtColor(gray8, bgr, cv::COLOR_GRAY2BGR);
    std::vector<cv::Mat> ch(3);
    cv::split(bgr, ch);
    ch[2] = cv::max(ch[2], heat8);  // response in the red channel
    cv::merge(ch, bgr);
    if (!cv::imwrite(path.string(), bgr))
        throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

void cmd_predict_loc(const std::filesystem::path& coarse_ckpt,
                     const std::optional<std::filesystem::path>& fine_ckpt,
                     const std::filesystem::path& manifest,
                     const std::filesystem::path& images_root, const std::filesystem::path& out,
                     bool overlays) {
    auto [coarse, cfg] = load_localizer(coarse_ckpt, 1);
    auto params = two_stage_params(cfg);
    models::TorchHeatmapModel coarse_model(coarse);

    std::optional<models::TorchHeatmapModel> fine_model;
    if (fine_ckpt) {
        auto [fine, fcfg] = load_localizer(*fine_ckpt, 2);
        // Crop geometry follows the stage-2 model's training configuration.
        auto fparams = two_stage_params(fcfg);
        params.crop_w = fparams.crop_w;
        params.crop_h = fparams.crop_h;
        params.crop_pad_w = fparams.crop_pad_w;
        params.crop_pad_h = fparams.crop_pad_h;
        params.stage2_min_peak = fparams.stage2_min_peak;
        fine_model.emplace(fine);
    }

    auto m = data::load_manifest(manifest, images_root);
    const auto halves = split_all(m, cfg.get_bool("data.mirror_right"));
    std::filesystem::create_directories(out);
    if (overlays) std::filesystem::create_directories(out / "overlays");

    std::vector<eval::PredictionRow> rows;
    for (const auto& half : halves) {
        eval::PredictionRow row{half.image_id, half.side, 0.0, std::nullopt};
        if (fine_model) {
            if (auto r = models::localize_two_stage(coarse_model, *fine_model, half, params)) {
                row.score = r->refined ? r->peak_fine : r->peak_coarse;
                row.pred = r->raw;
            }
        } else {
            // Coarse-only path: the same stage-1 geometry without refinement.
            auto [resized, to_half] = data::resize_for_task(
                half, data::ResizeTask::localization_stage1, params.resize_size);
            cv::Mat padded = models::pad_to(resized, params.pad_size, params.pad_size);
            models::InferContext ctx{to_half, params.stride};
            if (auto dr = geometry::decode_heatmap(coarse_model.infer(padded, ctx))) {
                auto p = geometry::heatmap_to_input(dr->point, params.stride);
                p.x = std::clamp(p.x, 0.0, static_cast<double>(params.resize_size - 1));
                p.y = std::clamp(p.y, 0.0, static_cast<double>(params.resize_size - 1));
                row.score = dr->peak;
                row.pred = geometry::apply_transform(half.to_raw,
                                                     geometry::apply_transform(to_half, p));
            }
        }
        if (!row.pred)
            throw std::runtime_error("no stage-1 response for " + half.image_id + "/" +
                                     data::side_name(half.side));
        rows.push_back(std::move(row));
        if (overlays)
            write_overlay(half, coarse_model.model, params,
                          out / "overlays" /
                              (half.image_id + "_" + data::side_name(half.side) + ".png"));
    }
    eval::save_predictions(rows, out / "predictions.csv");
    write_run_echo(out, cfg, {"predict task=localization ckpt=" + coarse_ckpt.string()});
}

void cmd_eval(const std::string& task, const std::filesystem::path& pred,
              const std::filesystem::path& gt, const std::filesystem::path& images_root,
              double threshold, const std::filesystem::path& out) {
    auto gt_m = data::load_manifest(gt, images_root);
    auto rows = eval::load_predictions(pred);
    eval::ReportInputs in;
    in.threshold = threshold;
    if (task == "classification")
        in.classification = eval::join_classification(rows, gt_m);
    else if (task == "localization")
        in.localization = eval::join_localization(rows, gt_m);
    else
        throw ValidationError("task must be 'classification' or 'localization'");
    eval::write_report(in, out);
}

void cmd_report(const std::optional<std::filesystem::path>& cls_pred,
                const std::optional<std::filesystem::path>& loc_pred,
                const std::vector<AblationSpec>& ablation, const std::filesystem::path& gt,
                const std::filesystem::path& images_root, double threshold,
                const std::filesystem::path& out) {
    auto gt_m = data::load_manifest(gt, images_root);
    eval::ReportInputs in;
    in.threshold = threshold;
    if (cls_pred) in.classification = eval::join_classification(eval::load_predictions(*cls_pred), gt_m);
    if (loc_pred) in.localization = eval::join_localization(eval::load_predictions(*loc_pred), gt_m);
    for (const auto& ab : ablation) {
        auto results = eval::join_localization(eval::load_predictions(ab.pred), gt_m);
        in.ablation.push_back({ab.encoder, ab.ppm, ab.kr, eval::ed_error(results)});
    }
    eval::write_report(in, out);
}

}  // namespace anglekit::pipeline
