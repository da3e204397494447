
#include <torch/torch.h>

#include "anglekit/classifier.hpp"
#include "anglekit/common.hpp"

#include "doctest_main.hpp"

using namespace anglekit;
using models::Classifier;
using models::ClassifierConfig;

namespace {

ClassifierConfig tiny_config() {
    ClassifierConfig cfg;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.base_width = 8;
    cfg.input_size = 32;
    return cfg;
}

// Number of input positions that influence the output, measured by running
// an all-ones input through the path with all-ones weights (batch norms in
// eval mode are an affine map, so every active path contributes a positive
// gradient) and counting nonzero input gradients.
int covered_positions(torch::nn::Sequential path, int n) {
    path->eval();
    {
        torch::NoGradGuard guard;
        for (auto& p : path->parameters()) p.fill_(1.0);
    }
    auto x = torch::ones({1, 1, n, n}).set_requires_grad(true);
    path->forward(x).sum().backward();
    return (x.grad().abs() > 0).sum().item<int>();
}

}  // namespace

TEST_CASE("the full configuration counts 50 bottlenecks and 152 layers") {
    const auto model = models::build_classifier(ClassifierConfig{});
    CHECK(model->count_bottleneck_blocks() == 50);   // 3 + 8 + 36 + 3
    CHECK(model->count_weighted_layers() == 152);    // 1 stem + 3*50 convs + 1 head
}

TEST_CASE("reduced configurations forward with the expected shapes") {
    torch::manual_seed(0);
    auto model = models::build_classifier(tiny_config());
    auto x = torch::rand({2, 1, 32, 32});

    const auto out = model->forward(x);
    CHECK(out.sizes() == torch::IntArrayRef({2, 1}));
    CHECK(out.min().item<double>() > 0.0);
    CHECK(out.max().item<double>() < 1.0);

    const auto stages = model->forward_stages(x);
    REQUIRE(stages.size() == 5);  // stem pool + four stages
    CHECK(stages[0].size(2) == 8);   // stem conv /2 then pool /2
    CHECK(stages[1].size(2) == 8);   // stage 1 keeps the stem resolution
    CHECK(stages[2].size(2) == 4);
    CHECK(stages[3].size(2) == 2);
    CHECK(stages[4].size(2) == 1);
    // Bottleneck expansion is x4 off the per-stage width.
    CHECK(stages[1].size(1) == 32);
    CHECK(stages[2].size(1) == 64);
    CHECK(stages[3].size(1) == 128);
    CHECK(stages[4].size(1) == 256);
    CHECK(model->head->weight.size(1) == 256);

    SUBCASE("width scaling multiplies every stage") {
        auto scaled_cfg = tiny_config();
        scaled_cfg.base_width = 64;
        scaled_cfg.scale_factor = 0.25;
        auto scaled = models::build_classifier(scaled_cfg);
        // Batch of 2: batch norm in training mode needs more than one value
        // per channel once the deepest stage collapses to 1x1 spatial.
        const auto s = scaled->forward_stages(torch::rand({2, 1, 32, 32}));
        CHECK(s[1].size(1) == 64);  // 64 * 0.25 * 4
        CHECK(s[4].size(1) == 512);
    }
}

TEST_CASE("downsampling tweaks place strides where configured") {
    SUBCASE("stride moves to the 3x3 conv when tweak B is on") {
        models::Bottleneck on(16, 4, 16, 2, true, true);
        CHECK((*on->conv1->options.stride())[0] == 1);
        CHECK((*on->conv2->options.stride())[0] == 2);
        models::Bottleneck off(16, 4, 16, 2, false, true);
        CHECK((*off->conv1->options.stride())[0] == 2);
        CHECK((*off->conv2->options.stride())[0] == 1);
    }
    SUBCASE("both settings halve the resolution") {
        for (bool b : {true, false}) {
            models::Bottleneck blk(16, 4, 32, 2, b, b);
            auto y = blk->forward(torch::rand({1, 16, 8, 8}));
            CHECK(y.size(2) == 4);
            CHECK(y.size(1) == 32);
        }
    }
    SUBCASE("stride-1 blocks with matching channels use an identity shortcut") {
        models::Bottleneck blk(32, 8, 32, 1, true, true);
        CHECK(blk->shortcut.is_empty());
    }
}

TEST_CASE("pooled shortcuts see every input pixel; strided 1x1 shortcuts do not") {
    // On an 8x8 input, a stride-2 1x1 projection samples a 4x4 lattice: 16 of
    // 64 positions. The avg-pool + stride-1 form covers all 64.
    CHECK(covered_positions(models::make_shortcut_down(1, 4, true), 8) == 64);
    CHECK(covered_positions(models::make_shortcut_down(1, 4, false), 8) == 16);
}

TEST_CASE("the strided 3x3 residual path covers all positions; a strided 1x1 does not") {
    CHECK(covered_positions(models::make_residual_down_convs(1, 4, 8, true), 8) == 64);
    CHECK(covered_positions(models::make_residual_down_convs(1, 4, 8, false), 8) == 16);
}

TEST_CASE("zero-init leaves each block as its shortcut at initialization") {
    auto cfg = tiny_config();
    cfg.zero_init_residual = true;
    auto zeroed = models::build_classifier(cfg);
    int bn3_count = 0;
    for (const auto& p : zeroed->named_parameters()) {
        if (p.key().find("bn3.weight") != std::string::npos) {
            ++bn3_count;
            CHECK(p.value().abs().max().item<double>() == doctest::Approx(0.0));
        }
    }
    CHECK(bn3_count == 4);

    cfg.zero_init_residual = false;
    auto plain = models::build_classifier(cfg);
    for (const auto& p : plain->named_parameters()) {
        if (p.key().find("bn3.weight") != std::string::npos)
            CHECK(p.value().abs().max().item<double>() > 0.5);
    }
}

TEST_CASE("batch inference runs in eval mode and restores training mode") {
    torch::manual_seed(1);
    auto model = models::build_classifier(tiny_config());
    model->train();
    auto x = torch::rand({3, 1, 32, 32});

    const auto scores = models::classify(model, x);
    CHECK(scores.sizes() == torch::IntArrayRef({3, 1}));
    CHECK(model->is_training());

    // classify() must match a plain eval-mode forward.
    model->eval();
    torch::NoGradGuard guard;
    const auto direct = model->forward(x);
    CHECK((scores - direct).abs().max().item<double>() <= 1e-7);
}
