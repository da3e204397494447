#include "anglekit/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "anglekit/common.hpp"

namespace anglekit::models {

namespace {

int scaled_width(int base, double scale) {
    return std::max(4, static_cast<int>(std::lround(base * scale)));
}

torch::nn::Conv2d conv1x1(int in_ch, int out_ch, int stride = 1) {
    return torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, 1).stride(stride).bias(false));
}

torch::nn::Conv2d conv3x3(int in_ch, int out_ch, int stride = 1) {
    return torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_ch, out_ch, 3).stride(stride).padding(1).bias(false));
}

}  // namespace

torch::nn::Sequential make_shortcut_down(int in_ch, int out_ch, bool tweak_d) {
    torch::nn::Sequential s;
    if (tweak_d) {
        // count_include_pad(false) keeps a constant input constant at borders.
        s->push_back(torch::nn::AvgPool2d(
            torch::nn::AvgPool2dOptions(3).stride(2).padding(1).count_include_pad(false)));
        s->push_back(conv1x1(in_ch, out_ch, 1));
    } else {
        s->push_back(conv1x1(in_ch, out_ch, 2));
    }
    s->push_back(torch::nn::BatchNorm2d(out_ch));
    return s;
}

torch::nn::Sequential make_residual_down_convs(int in_ch, int mid_ch, int out_ch, bool tweak_b) {
    const int s1 = tweak_b ? 1 : 2;
    const int s2 = tweak_b ? 2 : 1;
    torch::nn::Sequential s;
    s->push_back(conv1x1(in_ch, mid_ch, s1));
    s->push_back(torch::nn::BatchNorm2d(mid_ch));
    s->push_back(torch::nn::ReLU());
    s->push_back(conv3x3(mid_ch, mid_ch, s2));
    s->push_back(torch::nn::BatchNorm2d(mid_ch));
    s->push_back(torch::nn::ReLU());
    s->push_back(conv1x1(mid_ch, out_ch, 1));
    s->push_back(torch::nn::BatchNorm2d(out_ch));
    return s;
}

BottleneckImpl::BottleneckImpl(int in_ch, int mid_ch, int out_ch, int stride, bool tweak_b,
                               bool tweak_d) {
    const int s1 = tweak_b ? 1 : stride;
    const int s2 = tweak_b ? stride : 1;
    conv1 = register_module("conv1", conv1x1(in_ch, mid_ch, s1));
    bn1 = register_module("bn1", torch::nn::BatchNorm2d(mid_ch));
    conv2 = register_module("conv2", conv3x3(mid_ch, mid_ch, s2));
    bn2 = register_module("bn2", torch::nn::BatchNorm2d(mid_ch));
    conv3 = register_module("conv3", conv1x1(mid_ch, out_ch, 1));
    bn3 = register_module("bn3", torch::nn::BatchNorm2d(out_ch));
    if (stride != 1 || in_ch != out_ch) {
        auto proj = (stride != 1) ? make_shortcut_down(in_ch, out_ch, tweak_d)
                                  : torch::nn::Sequential(conv1x1(in_ch, out_ch, 1),
                                                          torch::nn::BatchNorm2d(out_ch));
        shortcut = register_module("shortcut", proj);
    }
}

torch::Tensor BottleneckImpl::forward_residual(torch::Tensor x) {
    x = torch::relu(bn1->forward(conv1->forward(x)));
    x = torch::relu(bn2->forward(conv2->forward(x)));
    return bn3->forward(conv3->forward(x));
}

torch::Tensor BottleneckImpl::forward(torch::Tensor x) {
    auto identity = shortcut ? shortcut->forward(x) : x;
    return torch::relu(forward_residual(x) + identity);
}

ClassifierImpl::ClassifierImpl(const ClassifierConfig& cfg) : config(cfg) {
    if (cfg.stage_depths.size() != 4) throw ValidationError("stage_depths must have 4 entries");
    for (int d : cfg.stage_depths)
        if (d < 1) throw ValidationError("stage depths must be positive");
    if (cfg.base_width < 1 || cfg.scale_factor <= 0.0)
        throw ValidationError("widths must be positive");
    if (cfg.input_size % 32 != 0) throw ValidationError("input_size must be divisible by 32");

    const int stem_ch = scaled_width(cfg.base_width, cfg.scale_factor);
    stem_conv = register_module(
        "stem_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.in_channels, stem_ch, 7)
                                           .stride(2)
                                           .padding(3)
                                           .bias(false)));
    stem_bn = register_module("stem_bn", torch::nn::BatchNorm2d(stem_ch));
    stem_pool = register_module(
        "stem_pool", torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));

    int in_ch = stem_ch;
    for (int s = 0; s < 4; ++s) {
        const int mid = scaled_width(cfg.base_width << s, cfg.scale_factor);
        const int out = mid * 4;
        torch::nn::Sequential stage;
        for (int b = 0; b < cfg.stage_depths[s]; ++b) {
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            stage->push_back(Bottleneck(in_ch, mid, out, stride, cfg.tweak_b, cfg.tweak_d));
            in_ch = out;
        }
        stage_list.push_back(register_module("stage" + std::to_string(s + 1), stage));
    }
    head = register_module("head", torch::nn::Linear(in_ch, 1));
    init_weights(*this, cfg.zero_init_residual);
}

std::vector<torch::Tensor> ClassifierImpl::forward_stages(torch::Tensor x) {
    x = stem_pool->forward(torch::relu(stem_bn->forward(stem_conv->forward(x))));
    std::vector<torch::Tensor> outs;
    outs.push_back(x);
    for (auto& stage : stage_list) {
        x = stage->forward(x);
        outs.push_back(x);
    }
    return outs;
}

torch::Tensor ClassifierImpl::forward(torch::Tensor x) {
    if (x.dim() != 4 || x.size(1) != config.in_channels)
        throw ValidationError("classifier expects (N, C, H, W) input");
    x = forward_stages(std::move(x)).back();
    x = torch::adaptive_avg_pool2d(x, {1, 1}).flatten(1);
    return torch::sigmoid(head->forward(x));
}

int ClassifierImpl::count_bottleneck_blocks() const {
    int n = 0;
    for (const auto& m : modules(/*include_self=*/false))
        if (std::dynamic_pointer_cast<BottleneckImpl>(m)) ++n;
    return n;
}

int ClassifierImpl::count_weighted_layers() const {
    int n = 0;
    for (const auto& item : named_modules("", /*include_self=*/false)) {
        if (item.key().find("shortcut") != std::string::npos) continue;
        if (std::dynamic_pointer_cast<torch::nn::Conv2dImpl>(item.value()) ||
            std::dynamic_pointer_cast<torch::nn::LinearImpl>(item.value()))
            ++n;
    }
    return n;
}

Classifier build_classifier(const ClassifierConfig& cfg) { return Classifier(cfg); }

void init_weights(torch::nn::Module& root, bool zero_init_residual) {
    // include_self=false: the root is a composite, never a leaf we initialize,
    // and this keeps the walk legal when called from a module's constructor
    // (the root is not yet owned by a shared_ptr at that point).
    for (const auto& m : root.modules(/*include_self=*/false)) {
        if (auto* conv = m->as<torch::nn::Conv2d>()) {
            torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
            if (conv->options.bias()) torch::nn::init::zeros_(conv->bias);
        } else if (auto* tconv = m->as<torch::nn::ConvTranspose2d>()) {
            torch::nn::init::kaiming_normal_(tconv->weight, 0.0, torch::kFanIn, torch::kReLU);
            if (tconv->options.bias()) torch::nn::init::zeros_(tconv->bias);
        } else if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
            torch::nn::init::ones_(bn->weight);
            torch::nn::init::zeros_(bn->bias);
        } else if (auto* linear = m->as<torch::nn::Linear>()) {
            torch::nn::init::kaiming_normal_(linear->weight, 0.0, torch::kFanIn, torch::kReLU);
            torch::nn::init::zeros_(linear->bias);
        }
    }
    if (zero_init_residual) {
        for (const auto& m : root.modules(/*include_self=*/false))
            if (auto block = std::dynamic_pointer_cast<BottleneckImpl>(m))
                torch::nn::init::zeros_(block->bn3->weight);
    }
}

torch::Tensor classify(Classifier& model, const torch::Tensor& batch) {
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    auto scores = model->forward(batch);
    if (was_training) model->train();
    return scores;
}

}  // namespace anglekit::models
