#include "anglekit/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <opencv2/imgproc.hpp>

#include "anglekit/classifier.hpp"  // init_weights
#include "anglekit/common.hpp"

namespace anglekit::models {

namespace F = torch::nn::functional;

namespace {

torch::nn::Sequential conv_bn_relu(int in_ch, int out_ch, int kernel, int stride) {
    return torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, kernel)
                              .stride(stride)
                              .padding(kernel / 2)
                              .bias(false)),
        torch::nn::BatchNorm2d(out_ch), torch::nn::ReLU());
}

void check_pyramid(const std::vector<torch::Tensor>& p, int64_t in_h, int64_t in_w) {
    TORCH_CHECK(p.size() == 5, "expected 5 pyramid levels");
    for (size_t i = 0; i < 5; ++i) {
        const int64_t stride = 2LL << i;
        TORCH_CHECK(p[i].size(2) == in_h / stride && p[i].size(3) == in_w / stride,
                    "pyramid level ", i, " is not at stride ", stride);
    }
}

}  // namespace

Default4EncoderImpl::Default4EncoderImpl(const EncoderConfig& cfg) : widths(cfg.stage_widths) {
    if (widths.size() != 5) throw ValidationError("encoder needs 5 stage widths");
    for (int w : widths)
        if (w < 1) throw ValidationError("encoder widths must be positive");

    // Stem at stride 2, then conv + pool stages at strides 4..32.
    levels.push_back(conv_bn_relu(cfg.in_channels, widths[0], 3, 2));
    for (int i = 1; i < 5; ++i) {
        auto stage = conv_bn_relu(widths[i - 1], widths[i], 3, 1);
        stage->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2).stride(2)));
        levels.push_back(stage);
    }
    for (size_t i = 0; i < levels.size(); ++i)
        register_module("level" + std::to_string(i + 1), levels[i]);
}

std::vector<torch::Tensor> Default4EncoderImpl::forward_pyramid(torch::Tensor x) {
    const int64_t h = x.size(2), w = x.size(3);
    std::vector<torch::Tensor> out;
    for (auto& level : levels) {
        x = level->forward(x);
        out.push_back(x);
    }
    check_pyramid(out, h, w);
    return out;
}

MBConvImpl::MBConvImpl(int in_ch, int out_ch, int stride) {
    const int exp_ch = in_ch * 6;
    const int se_ch = std::max(1, in_ch / 4);
    residual = (stride == 1 && in_ch == out_ch);

    expand = register_module("expand", conv_bn_relu(in_ch, exp_ch, 1, 1));
    depthwise = register_module(
        "depthwise",
        torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(exp_ch, exp_ch, 3)
                                                    .stride(stride)
                                                    .padding(1)
                                                    .groups(exp_ch)
                                                    .bias(false)),
                              torch::nn::BatchNorm2d(exp_ch), torch::nn::ReLU()));
    se_reduce = register_module(
        "se", torch::nn::Sequential(
                  torch::nn::Conv2d(torch::nn::Conv2dOptions(exp_ch, se_ch, 1)),
                  torch::nn::ReLU(),
                  torch::nn::Conv2d(torch::nn::Conv2dOptions(se_ch, exp_ch, 1)),
                  torch::nn::Sigmoid()));
    project = register_module(
        "project",
        torch::nn::Sequential(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(exp_ch, out_ch, 1).bias(false)),
            torch::nn::BatchNorm2d(out_ch)));
}

torch::Tensor MBConvImpl::forward(torch::Tensor x) {
    auto y = depthwise->forward(expand->forward(x));
    auto gate = se_reduce->forward(torch::adaptive_avg_pool2d(y, {1, 1}));
    y = project->forward(y * gate);
    return residual ? x + y : y;
}

ScaledMBConvEncoderImpl::ScaledMBConvEncoderImpl(const EncoderConfig& cfg) {
    if (cfg.stage_widths.size() != 5) throw ValidationError("encoder needs 5 stage widths");
    if (cfg.base_depths.size() != 4) throw ValidationError("scaled_mbconv needs 4 base depths");
    if (cfg.depth_mult <= 0.0 || cfg.width_mult <= 0.0)
        throw ValidationError("multipliers must be positive");

    widths.resize(5);
    for (int i = 0; i < 5; ++i) {
        widths[i] = std::max(4, static_cast<int>(std::lround(cfg.stage_widths[i] * cfg.width_mult)));
        if (cfg.stage_widths[i] < 1) throw ValidationError("encoder widths must be positive");
    }

    stem = register_module("stem", conv_bn_relu(cfg.in_channels, widths[0], 3, 2));
    int in_ch = widths[0];
    for (int s = 0; s < 4; ++s) {
        const int count =
            static_cast<int>(std::ceil(cfg.depth_mult * cfg.base_depths[s]));
        block_counts.push_back(count);
        torch::nn::Sequential stage;
        for (int b = 0; b < count; ++b) {
            stage->push_back(MBConv(in_ch, widths[s + 1], b == 0 ? 2 : 1));
            in_ch = widths[s + 1];
        }
        stage_list.push_back(register_module("stage" + std::to_string(s + 1), stage));
    }
}

std::vector<torch::Tensor> ScaledMBConvEncoderImpl::forward_pyramid(torch::Tensor x) {
    const int64_t h = x.size(2), w = x.size(3);
    std::vector<torch::Tensor> out;
    x = stem->forward(x);
    out.push_back(x);
    for (auto& stage : stage_list) {
        x = stage->forward(x);
        out.push_back(x);
    }
    check_pyramid(out, h, w);
    return out;
}

PPMImpl::PPMImpl(int channels, std::vector<int> bins_in) : bins(std::move(bins_in)) {
    if (bins.empty()) throw ValidationError("ppm needs at least one bin");
    for (size_t i = 1; i < bins.size(); ++i)
        if (bins[i] <= bins[i - 1]) throw ValidationError("ppm bins must be strictly increasing");
    if (bins.front() < 1) throw ValidationError("ppm bins must be positive");

    const int branch_ch = std::max(1, channels / static_cast<int>(bins.size()));
    for (size_t i = 0; i < bins.size(); ++i) {
        auto branch = torch::nn::Sequential(
            torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(bins[i])),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, branch_ch, 1).bias(false)),
            torch::nn::BatchNorm2d(branch_ch), torch::nn::ReLU());
        branches.push_back(register_module("branch" + std::to_string(bins[i]), branch));
    }
    const int cat_ch = channels + branch_ch * static_cast<int>(bins.size());
    fuse = register_module("fuse", conv_bn_relu(cat_ch, channels, 3, 1));
}

std::vector<torch::Tensor> PPMImpl::forward_pooled(const torch::Tensor& f5) {
    TORCH_CHECK(f5.size(2) >= bins.back() && f5.size(3) >= bins.back(),
                "ppm bin larger than the feature map");
    std::vector<torch::Tensor> out;
    for (auto& branch : branches) out.push_back(branch->forward(f5));
    return out;
}

torch::Tensor PPMImpl::forward(torch::Tensor f5) {
    auto pooled = forward_pooled(f5);
    std::vector<torch::Tensor> cat{f5};
    for (auto& p : pooled) {
        cat.push_back(F::interpolate(p, F::InterpolateFuncOptions()
                                            .size(std::vector<int64_t>{f5.size(2), f5.size(3)})
                                            .mode(torch::kBilinear)
                                            .align_corners(false)));
    }
    return fuse->forward(torch::cat(cat, 1));
}

LocalizerImpl::LocalizerImpl(const LocalizerConfig& cfg) : config(cfg) {
    if (cfg.input_size % 32 != 0) throw ValidationError("input_size must be divisible by 32");
    if (cfg.heatmap_stride != 2) throw ValidationError("decoder emits stride-2 heatmaps");
    if (cfg.decoder_width < 1) throw ValidationError("decoder width must be positive");
    if (cfg.skip_mode != "add" && cfg.skip_mode != "concat")
        throw ValidationError("skip_mode must be add or concat");

    if (cfg.encoder.variant == "default4")
        encoder = std::make_shared<Default4EncoderImpl>(cfg.encoder);
    else if (cfg.encoder.variant == "scaled_mbconv")
        encoder = std::make_shared<ScaledMBConvEncoderImpl>(cfg.encoder);
    else
        throw ValidationError("unknown encoder variant '" + cfg.encoder.variant + "'");
    register_module("encoder", std::static_pointer_cast<torch::nn::Module>(encoder));

    const auto widths = encoder->level_widths();
    if (cfg.ppm_enabled) ppm = register_module("ppm", PPM(widths[4], cfg.ppm_bins));

    // Four stride-2 transposed convs walk the pyramid back from stride 32 to
    // stride 2, fusing levels f4, f3, f2, f1 on the way.
    const int dw = cfg.decoder_width;
    int in_ch = widths[4];
    for (int i = 0; i < 4; ++i) {
        const int skip_w = widths[3 - i];
        ups.push_back(register_module(
            "up" + std::to_string(i + 1),
            torch::nn::ConvTranspose2d(
                torch::nn::ConvTranspose2dOptions(in_ch, dw, 4).stride(2).padding(1).bias(false))));
        up_norms.push_back(register_module(
            "up_norm" + std::to_string(i + 1),
            torch::nn::Sequential(torch::nn::BatchNorm2d(dw), torch::nn::ReLU())));
        skip_projs.push_back(register_module(
            "skip_proj" + std::to_string(i + 1),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(skip_w, dw, 1).bias(false))));
        const int refine_in = (cfg.skip_mode == "concat") ? 2 * dw : dw;
        refines.push_back(
            register_module("refine" + std::to_string(i + 1), conv_bn_relu(refine_in, dw, 3, 1)));
        in_ch = dw;
    }
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(dw, 1, 1)));

    init_weights(*this, /*zero_init_residual=*/false);
    torch::nn::init::constant_(head->bias, cfg.head_bias);
}

std::vector<torch::Tensor> LocalizerImpl::forward_pyramid(torch::Tensor x) {
    return encoder->forward_pyramid(std::move(x));
}

torch::Tensor LocalizerImpl::forward(torch::Tensor x) {
    TORCH_CHECK(x.dim() == 4, "localizer expects (N, C, H, W) input");
    TORCH_CHECK(x.size(2) % 32 == 0 && x.size(3) % 32 == 0,
                "localizer input sizes must be divisible by 32");
    auto pyramid = encoder->forward_pyramid(x);
    auto d = config.ppm_enabled ? ppm->forward(pyramid[4]) : pyramid[4];
    for (int i = 0; i < 4; ++i) {
        d = up_norms[i]->forward(ups[i]->forward(d));
        auto skip = skip_projs[i]->forward(pyramid[3 - i]);
        TORCH_CHECK(skip.sizes().slice(2).equals(d.sizes().slice(2)),
                    "skip level does not match the upsampled map");
        d = (config.skip_mode == "concat") ? refines[i]->forward(torch::cat({d, skip}, 1))
                                           : refines[i]->forward(d + skip);
    }
    return torch::sigmoid(head->forward(d));
}

Localizer build_localizer(const LocalizerConfig& cfg) { return Localizer(cfg); }

Heatmap TorchHeatmapModel::infer(const cv::Mat& input, const InferContext& ctx) {
    CV_Assert(input.type() == CV_32F);
    torch::NoGradGuard no_grad;
    model->eval();
    cv::Mat cont = input.isContinuous() ? input : input.clone();
    auto x = torch::from_blob(cont.data, {1, 1, cont.rows, cont.cols}, torch::kFloat).clone();
    auto y = model->forward(x).squeeze(0).squeeze(0).contiguous();

    Heatmap hm;
    hm.stride = ctx.stride;
    hm.values.create(static_cast<int>(y.size(0)), static_cast<int>(y.size(1)), CV_32F);
    std::memcpy(hm.values.data, y.data_ptr<float>(), sizeof(float) * y.numel());
    return hm;
}

Heatmap OracleHeatmapModel::infer(const cv::Mat& input, const InferContext& ctx) {
    const auto gt_input = geometry::apply_transform(geometry::invert(ctx.input_to_half), gt);
    const auto center = geometry::input_to_heatmap(gt_input, ctx.stride);
    const int hh = input.rows / ctx.stride, hw = input.cols / ctx.stride;
    if (center.x < 0 || center.x >= hw || center.y < 0 || center.y >= hh) {
        // Ground truth outside this frame: emit a flat no-response map.
        Heatmap hm;
        hm.stride = ctx.stride;
        hm.values = cv::Mat::zeros(hh, hw, CV_32F);
        return hm;
    }
    return geometry::encode_heatmap(center, hh, hw, spec, ctx.stride);
}

cv::Mat pad_to(const cv::Mat& image, int width, int height) {
    if (width < image.cols || height < image.rows)
        throw ValidationError("pad target smaller than the image");
    cv::Mat out;
    cv::copyMakeBorder(image, out, 0, height - image.rows, 0, width - image.cols,
                       cv::BORDER_CONSTANT, cv::Scalar(0));
    return out;
}

std::optional<TwoStageResult> localize_two_stage(HeatmapModel& coarse, HeatmapModel& fine,
                                                 const data::HalfSample& half,
                                                 const TwoStageParams& p) {
    if (p.resize_size > p.pad_size || p.crop_w > p.crop_pad_w || p.crop_h > p.crop_pad_h)
        throw ValidationError("pad sizes must not be smaller than their content");
    if (p.crop_w > p.resize_size || p.crop_h > p.resize_size)
        throw ValidationError("crop window larger than the stage-1 frame");

    auto clamp_point = [](Point2D q, double w, double h) {
        return Point2D{std::clamp(q.x, 0.0, w - 1.0), std::clamp(q.y, 0.0, h - 1.0)};
    };

    // Stage 1: resize -> pad (top-left anchored, so padding is the identity
    // on coordinates) -> decode in the heatmap frame -> back through the
    // resize to the half frame.
    auto [resized, to_half] =
        data::resize_for_task(half, data::ResizeTask::localization_stage1, p.resize_size);
    cv::Mat padded = pad_to(resized, p.pad_size, p.pad_size);
    InferContext ctx1{to_half, p.stride};
    auto d1 = geometry::decode_heatmap(coarse.infer(padded, ctx1));
    if (!d1) return std::nullopt;

    auto p1_input = geometry::heatmap_to_input(d1->point, p.stride);
    p1_input = clamp_point(p1_input, p.resize_size, p.resize_size);

    TwoStageResult result;
    result.peak_coarse = d1->peak;
    result.raw_coarse = geometry::apply_transform(
        half.to_raw, geometry::apply_transform(to_half, p1_input));
    result.raw = result.raw_coarse;

    // Stage 2: crop around the coarse point in the resized frame, pad, and
    // refine; a failed refinement keeps the coarse result.
    auto [crop, crop_to_resized] = geometry::crop_window(resized, p1_input, p.crop_w, p.crop_h);
    cv::Mat crop_padded = pad_to(crop, p.crop_pad_w, p.crop_pad_h);
    InferContext ctx2{geometry::compose(to_half, crop_to_resized), p.stride};
    auto d2 = geometry::decode_heatmap(fine.infer(crop_padded, ctx2));
    if (!d2 || d2->peak < p.stage2_min_peak) return result;

    auto p2_input = geometry::heatmap_to_input(d2->point, p.stride);
    p2_input = clamp_point(p2_input, p.crop_w, p.crop_h);
    result.raw = geometry::apply_transform(
        half.to_raw, geometry::apply_transform(ctx2.input_to_half, p2_input));
    result.peak_fine = d2->peak;
    result.refined = true;
    return result;
}

}  // namespace anglekit::models
