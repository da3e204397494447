#pragma once

#include <vector>

#include <torch/torch.h>

namespace anglekit::models {

struct ClassifierConfig {
    std::vector<int> stage_depths{3, 8, 36, 3};
    int base_width = 64;
    double scale_factor = 1.0;  // multiplies widths for reduced configurations
    bool tweak_b = true;        // stride on the 3x3 conv instead of the first 1x1
    bool tweak_d = true;        // avg-pool + stride-1 conv in the downsampling shortcut
    int in_channels = 1;
    int input_size = 256;
    bool zero_init_residual = true;
};

// Residual bottleneck: 1x1 reduce -> 3x3 -> 1x1 expand (x4), with the
// downsampling stride on the 3x3 conv when tweak_b is set and on the first
// 1x1 otherwise. The projection shortcut downsamples through a 3x3 stride-2
// average pool followed by a stride-1 1x1 conv when tweak_d is set, and a
// stride-2 1x1 conv otherwise.
struct BottleneckImpl : torch::nn::Module {
    BottleneckImpl(int in_ch, int mid_ch, int out_ch, int stride, bool tweak_b, bool tweak_d);
    torch::Tensor forward(torch::Tensor x);
    // The residual branch alone, exposed for connectivity probes.
    torch::Tensor forward_residual(torch::Tensor x);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    torch::nn::Sequential shortcut{nullptr};  // empty for identity
};
TORCH_MODULE(Bottleneck);

// Standalone builders mirroring the two downsampling paths, used by the
// gradient-coverage probes.
torch::nn::Sequential make_shortcut_down(int in_ch, int out_ch, bool tweak_d);
torch::nn::Sequential make_residual_down_convs(int in_ch, int mid_ch, int out_ch, bool tweak_b);

struct ClassifierImpl : torch::nn::Module {
    explicit ClassifierImpl(const ClassifierConfig& cfg);

    // (N, in_channels, S, S) -> (N, 1) closure probability.
    torch::Tensor forward(torch::Tensor x);
    // Outputs of the stem pool and the four stages, for shape checks.
    std::vector<torch::Tensor> forward_stages(torch::Tensor x);

    int count_bottleneck_blocks() const;
    // Convolution and linear layers on the main path (projection shortcuts
    // excluded, the usual depth-counting convention).
    int count_weighted_layers() const;

    ClassifierConfig config;
    torch::nn::Conv2d stem_conv{nullptr};
    torch::nn::BatchNorm2d stem_bn{nullptr};
    torch::nn::MaxPool2d stem_pool{nullptr};
    std::vector<torch::nn::Sequential> stage_list;
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Classifier);

Classifier build_classifier(const ClassifierConfig& cfg);

// Applies rectifier-aware fan-in init to convolutions, resets norms to
// identity, and optionally zeroes the last norm scale of each bottleneck.
void init_weights(torch::nn::Module& m, bool zero_init_residual);

// Eval-mode batch inference; input (N,1,S,S) in [0,1].
torch::Tensor classify(Classifier& model, const torch::Tensor& batch);

}  // namespace anglekit::models
