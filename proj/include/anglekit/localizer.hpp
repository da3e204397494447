#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "anglekit/data.hpp"
#include "anglekit/geometry.hpp"

namespace anglekit::models {

using geometry::Heatmap;
using geometry::Point2D;
using geometry::SimilarityTransform2D;

struct EncoderConfig {
    std::string variant = "default4";  // default4 | scaled_mbconv
    std::vector<int> stage_widths{32, 64, 128, 256, 512};  // f1..f5 widths
    double depth_mult = 1.0;   // scaled_mbconv only
    double width_mult = 1.0;   // scaled_mbconv only
    std::vector<int> base_depths{1, 2, 2, 3};  // scaled_mbconv base block counts
    int in_channels = 1;
};

struct LocalizerConfig {
    EncoderConfig encoder;
    bool ppm_enabled = true;
    std::vector<int> ppm_bins{1, 2, 3, 6};
    int decoder_width = 64;
    std::string skip_mode = "add";  // add | concat
    int input_size = 512;           // nominal; the net is fully convolutional
    int heatmap_stride = 2;
    double head_bias = 0.0;
};

// Both encoders emit a five-level pyramid at strides {2, 4, 8, 16, 32}.
struct EncoderImpl : torch::nn::Module {
    virtual ~EncoderImpl() = default;
    virtual std::vector<torch::Tensor> forward_pyramid(torch::Tensor x) = 0;
    virtual std::vector<int> level_widths() const = 0;
};

// Stem conv (stride 2) followed by four conv + norm + rectifier + 2x2
// max-pool stages.
struct Default4EncoderImpl : EncoderImpl {
    explicit Default4EncoderImpl(const EncoderConfig& cfg);
    std::vector<torch::Tensor> forward_pyramid(torch::Tensor x) override;
    std::vector<int> level_widths() const override { return widths; }

    std::vector<int> widths;
    std::vector<torch::nn::Sequential> levels;
};

// Inverted bottleneck: pointwise expansion (x6), depthwise 3x3,
// squeeze-excitation gate (ratio 0.25), pointwise projection; residual when
// the shape is preserved.
struct MBConvImpl : torch::nn::Module {
    MBConvImpl(int in_ch, int out_ch, int stride);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Sequential expand{nullptr}, depthwise{nullptr}, project{nullptr};
    torch::nn::Sequential se_reduce{nullptr};
    bool residual = false;
};
TORCH_MODULE(MBConv);

// Stem then four stages of MBConv blocks; block counts are
// ceil(depth_mult * base) and widths are rounded by width_mult.
struct ScaledMBConvEncoderImpl : EncoderImpl {
    explicit ScaledMBConvEncoderImpl(const EncoderConfig& cfg);
    std::vector<torch::Tensor> forward_pyramid(torch::Tensor x) override;
    std::vector<int> level_widths() const override { return widths; }
    std::vector<int> stage_block_counts() const { return block_counts; }

    std::vector<int> widths;
    std::vector<int> block_counts;
    torch::nn::Sequential stem{nullptr};
    std::vector<torch::nn::Sequential> stage_list;
};

// Pyramid pooling over the deepest level: per bin, adaptive average pool to
// bin x bin, 1x1 conv to C/len(bins), bilinear upsample back, concatenate
// with the input, 3x3 fusion conv. Output spatial size equals the input's.
struct PPMImpl : torch::nn::Module {
    PPMImpl(int channels, std::vector<int> bins);
    torch::Tensor forward(torch::Tensor f5);
    // Pre-upsample branch outputs, exposed so tests can check the bin sizes.
    std::vector<torch::Tensor> forward_pooled(const torch::Tensor& f5);

    std::vector<int> bins;
    std::vector<torch::nn::Sequential> branches;
    torch::nn::Sequential fuse{nullptr};
};
TORCH_MODULE(PPM);

// Encoder (+ optional PPM) followed by four stride-2 transposed convolutions,
// each fused with the corresponding encoder level (1x1-projected, added or
// concatenated), ending in a 1x1 head; sigmoid output at stride 2.
struct LocalizerImpl : torch::nn::Module {
    explicit LocalizerImpl(const LocalizerConfig& cfg);

    torch::Tensor forward(torch::Tensor x);  // (N,1,H,W) -> (N,1,H/2,W/2) in (0,1)
    std::vector<torch::Tensor> forward_pyramid(torch::Tensor x);

    LocalizerConfig config;
    std::shared_ptr<EncoderImpl> encoder;
    PPM ppm{nullptr};
    std::vector<torch::nn::ConvTranspose2d> ups;
    std::vector<torch::nn::Sequential> up_norms;
    std::vector<torch::nn::Conv2d> skip_projs;
    std::vector<torch::nn::Sequential> refines;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(Localizer);

Localizer build_localizer(const LocalizerConfig& cfg);

// Inference abstraction for the two-stage pipeline. The context carries the
// transform from the model's input frame back to the half frame so oracle
// implementations can place ground truth without seeing pixels.
struct InferContext {
    SimilarityTransform2D input_to_half;
    int stride = 2;
};

struct HeatmapModel {
    virtual ~HeatmapModel() = default;
    virtual Heatmap infer(const cv::Mat& input, const InferContext& ctx) = 0;
};

struct TorchHeatmapModel : HeatmapModel {
    explicit TorchHeatmapModel(Localizer model) : model(std::move(model)) {}
    Heatmap infer(const cv::Mat& input, const InferContext& ctx) override;
    Localizer model;
};

// Emits the encoded ground-truth heatmap for its half-frame point; isolates
// the geometry chain from learning in tests.
struct OracleHeatmapModel : HeatmapModel {
    OracleHeatmapModel(Point2D gt_half, geometry::GaussianSpec spec) : gt(gt_half), spec(spec) {}
    Heatmap infer(const cv::Mat& input, const InferContext& ctx) override;
    Point2D gt;
    geometry::GaussianSpec spec;
};

struct TwoStageParams {
    int resize_size = 499;
    int pad_size = 512;
    int crop_w = 384;
    int crop_h = 288;
    int crop_pad_w = 384;
    int crop_pad_h = 320;
    int stride = 2;
    double stage2_min_peak = 0.0;  // fall back to the coarse point below this
};

struct TwoStageResult {
    Point2D raw;         // final prediction in raw coordinates
    Point2D raw_coarse;  // stage-1 prediction in raw coordinates
    bool refined = false;
    float peak_coarse = 0.f;
    float peak_fine = 0.f;
};

// Stage 1: resize the half, pad top-left to the network size, decode the
// coarse point. Stage 2: crop around the coarse point in the stage-1 resized
// frame, pad, decode, and map the refinement through the full transform
// chain back to raw coordinates. Returns nullopt when stage 1 has no
// response; a failed stage 2 falls back to the coarse point.
std::optional<TwoStageResult> localize_two_stage(HeatmapModel& coarse, HeatmapModel& fine,
                                                 const data::HalfSample& half,
                                                 const TwoStageParams& params = {});

// Pads with zeros on the bottom/right to (width, height); coordinates are
// untouched, so the pad transform is the identity.
cv::Mat pad_to(const cv::Mat& image, int width, int height);

}  // namespace anglekit::models
