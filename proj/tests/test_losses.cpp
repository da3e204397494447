
#include <cmath>
#include <random>

#include <torch/torch.h>

#include "anglekit/common.hpp"
#include "anglekit/losses.hpp"

#include "doctest_main.hpp"

using namespace anglekit;
using losses::FBetaParams;
using losses::FocalParams;
using losses::HybridParams;
using losses::KRParams;

namespace {

torch::Tensor dten(std::initializer_list<double> v) {
    return torch::tensor(std::vector<double>(v), torch::kDouble);
}

// Random probability/binary pair away from the clamp boundaries.
std::pair<torch::Tensor, torch::Tensor> random_pair(std::uint64_t seed, int n = 8) {
    torch::manual_seed(seed);
    auto pred = torch::rand({n}, torch::kDouble) * 0.8 + 0.1;
    auto target = (torch::rand({n}, torch::kDouble) > 0.5).to(torch::kDouble);
    return {pred, target};
}

}  // namespace

TEST_CASE("focal loss matches the hand-computed scalar example") {
    // Single positive scored at 0.5 with alpha = gamma = 2:
    // 2 * (1 - 0.5)^2 * (-log 0.5) = 0.346574.
    const auto loss = losses::focal_loss(dten({0.5}), dten({1.0}), FocalParams{2.0, 2.0, false});
    CHECK(std::abs(loss.item<double>() - 0.346574) <= 1e-6);

    // Symmetric: a negative scored at 0.5 gives the same value.
    const auto neg = losses::focal_loss(dten({0.5}), dten({0.0}), FocalParams{2.0, 2.0, false});
    CHECK(std::abs(neg.item<double>() - 0.346574) <= 1e-6);

    // Mean reduction: a perfectly scored element halves the batch loss. The
    // reference constant is rounded at the sixth decimal, so its halved form
    // carries up to ~2.1e-7 of rounding slack of its own.
    const auto pair = losses::focal_loss(dten({0.5, 1.0}), dten({1.0, 1.0}));
    CHECK(std::abs(pair.item<double>() - 0.346574 / 2.0) <= 5e-7);

    // Confident correct predictions cost almost nothing; the focusing term
    // suppresses them relative to hard examples.
    const auto easy = losses::focal_loss(dten({0.99}), dten({1.0}));
    const auto hard = losses::focal_loss(dten({0.1}), dten({1.0}));
    CHECK(easy.item<double>() < 1e-3);
    CHECK(hard.item<double>() > 100.0 * easy.item<double>());
}

TEST_CASE("focal loss with gamma=0, alpha=1 reduces to cross-entropy") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto [pred, target] = random_pair(seed, 16);
        const auto focal =
            losses::focal_loss(pred, target, FocalParams{1.0, 0.0, false}).item<double>();
        const auto bce =
            torch::binary_cross_entropy(pred, target).item<double>();
        CHECK(std::abs(focal - bce) <= 1e-9);
    }
}

TEST_CASE("class-balanced alpha reweights the two classes") {
    const FocalParams p{0.75, 0.0, true};
    const auto pos = losses::focal_loss(dten({0.5}), dten({1.0}), p).item<double>();
    const auto neg = losses::focal_loss(dten({0.5}), dten({0.0}), p).item<double>();
    CHECK(std::abs(pos - 0.75 * (-std::log(0.5))) <= 1e-9);
    CHECK(std::abs(neg - 0.25 * (-std::log(0.5))) <= 1e-9);
}

TEST_CASE("F-beta loss matches the soft-count example") {
    // y = [1,1,0,0], y' = [1,0,0,1], beta = 2: TP=1, FN=1, FP=1, c=3:
    // 1 - 3/(3 + 4 + 1) = 0.625.
    const auto pred = dten({1.0, 0.0, 0.0, 1.0});
    const auto target = dten({1.0, 1.0, 0.0, 0.0});
    const auto loss = losses::fbeta_loss(pred, target, FBetaParams{2.0, 1e-6, false});
    CHECK(std::abs(loss.item<double>() - 0.625) <= 1e-6);

    SUBCASE("the conventional coefficient uses 1 + beta^2") {
        const auto conv = losses::fbeta_loss(pred, target, FBetaParams{2.0, 1e-6, true});
        // c = 5: 1 - 5/(5 + 4 + 1) = 0.5.
        CHECK(std::abs(conv.item<double>() - 0.5) <= 1e-6);
    }
    SUBCASE("perfect prediction scores zero, total miss scores near one") {
        const auto zero = losses::fbeta_loss(target, target);
        CHECK(zero.item<double>() <= 1e-9);
        const auto miss = losses::fbeta_loss(1.0 - target, target);
        CHECK(miss.item<double>() >= 0.99);
    }
}

TEST_CASE("F-beta loss is monotone in per-element prediction quality") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        auto [pred, target] = random_pair(1000 + trial, 12);
        const double base = losses::fbeta_loss(pred, target).item<double>();

        // Nudging any positive's score upward cannot increase the loss;
        // nudging any negative's score upward cannot decrease it.
        std::uniform_int_distribution<int> pick(0, 11);
        const int i = pick(rng);
        auto up = pred.clone();
        up[i] = torch::clamp(up[i] + 0.05, 0.0, 1.0);
        const double moved = losses::fbeta_loss(up, target).item<double>();
        if (target[i].item<double>() > 0.5)
            CHECK(moved <= base + 1e-12);
        else
            CHECK(moved >= base - 1e-12);
    }
}

TEST_CASE("hybrid loss is the weighted sum of its terms") {
    auto [pred, target] = random_pair(7, 10);
    const FocalParams fp;
    const FBetaParams bp;

    const double f = losses::focal_loss(pred, target, fp).item<double>();
    const double b = losses::fbeta_loss(pred, target, bp).item<double>();

    const double h = losses::hybrid_loss(pred, target, HybridParams{0.5, 0.5}, fp, bp)
                         .item<double>();
    CHECK(std::abs(h - (0.5 * f + 0.5 * b)) <= 1e-12);

    const double only_focal =
        losses::hybrid_loss(pred, target, HybridParams{1.0, 0.0}, fp, bp).item<double>();
    CHECK(std::abs(only_focal - f) <= 1e-12);

    const double weighted =
        losses::hybrid_loss(pred, target, HybridParams{0.3, 1.7}, fp, bp).item<double>();
    CHECK(std::abs(weighted - (0.3 * f + 1.7 * b)) <= 1e-12);
}

TEST_CASE("keypoint loss matches a double-precision closed form") {
    // Build a Gaussian target on a 64 x 64 grid and evaluate the loss
    // against sums computed independently in plain double loops.
    const int n = 64;
    const double cx = 31.7, cy = 30.2, sigma = 4.0;
    std::vector<double> target(n * n);
    double S = 0.0, Q = 0.0;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const double v = std::exp(-d2 / (2.0 * sigma * sigma));
            target[y * n + x] = v;
            S += v;
            Q += v * v;
        }
    }
    auto t = torch::tensor(target, torch::kDouble).reshape({1, 1, n, n});
    const KRParams p;  // rho3 = 100, rho4 = 0.2, eps = 1e-6

    SUBCASE("zero prediction: full squared mass plus a saturated overlap term") {
        const double expect = p.rho3 * (Q / (n * n)) + p.rho4 * 1.0;
        const double got = losses::kr_loss(torch::zeros_like(t), t, p).item<double>();
        CHECK(std::abs(got - expect) <= 1e-9);
    }
    SUBCASE("half-scaled prediction matches the algebra") {
        const auto pred = t * 0.5;
        const double mse = 0.25 * Q / (n * n);
        const double overlap = 1.0 - (2.0 * 0.5 * Q) / (S + 0.5 * S + p.eps);
        const double expect = p.rho3 * mse + p.rho4 * overlap;
        const double got = losses::kr_loss(pred, t, p).item<double>();
        CHECK(std::abs(got - expect) <= 1e-9);
    }
    SUBCASE("identical maps pay only the overlap floor") {
        // With pred == target the squared-error term vanishes but the overlap
        // term does not: it bottoms out at 1 - 2Q/(2S + eps), which for a
        // Gaussian map sits near 1/2 because Q/S tends to 1/2. The loss at a
        // perfect match is therefore rho4 times that floor, not zero.
        const double floor = 1.0 - 2.0 * Q / (2.0 * S + p.eps);
        const double expect = p.rho4 * floor;
        const double got = losses::kr_loss(t, t, p).item<double>();
        CHECK(std::abs(got - expect) <= 1e-9);
        // Still strictly cheaper than predicting nothing at all.
        const double zero_pred = losses::kr_loss(torch::zeros_like(t), t, p).item<double>();
        CHECK(got < zero_pred);
    }
    SUBCASE("the overlap term stays within [0, 1]") {
        torch::manual_seed(5);
        for (int i = 0; i < 20; ++i) {
            auto a = torch::rand({1, 1, 16, 16}, torch::kDouble);
            auto b = torch::rand({1, 1, 16, 16}, torch::kDouble);
            const double loss = losses::kr_loss(a, b, p).item<double>();
            const double mse = (a - b).pow(2).mean().item<double>();
            const double overlap = (loss - p.rho3 * mse) / p.rho4;
            CHECK(overlap >= -1e-9);
            CHECK(overlap <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("autograd gradients agree with finite differences across seeds") {
    int focal_pass = 0, fbeta_pass = 0, hybrid_pass = 0, kr_pass = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto [pred, target] = random_pair(seed, 8);
        const auto t = target;

        auto r1 = losses::grad_check(
            [&](const std::vector<torch::Tensor>& in) { return losses::focal_loss(in[0], t); },
            {pred});
        auto r2 = losses::grad_check(
            [&](const std::vector<torch::Tensor>& in) { return losses::fbeta_loss(in[0], t); },
            {pred});
        auto r3 = losses::grad_check(
            [&](const std::vector<torch::Tensor>& in) { return losses::hybrid_loss(in[0], t); },
            {pred});

        torch::manual_seed(seed * 31 + 7);
        auto hm_pred = torch::rand({4, 4}, torch::kDouble) * 0.8 + 0.1;
        auto hm_target = torch::rand({4, 4}, torch::kDouble);
        auto r4 = losses::grad_check(
            [&](const std::vector<torch::Tensor>& in) {
                return losses::kr_loss(in[0], hm_target);
            },
            {hm_pred});

        focal_pass += r1.pass;
        fbeta_pass += r2.pass;
        hybrid_pass += r3.pass;
        kr_pass += r4.pass;
        worst = std::max({worst, r1.max_rel_error, r2.max_rel_error, r3.max_rel_error,
                          r4.max_rel_error});
    }
    CHECK(focal_pass == 50);
    CHECK(fbeta_pass == 50);
    CHECK(hybrid_pass == 50);
    CHECK(kr_pass == 50);
    CHECK(worst <= 1e-4);
}

TEST_CASE("the gradient checker itself is trustworthy") {
    SUBCASE("large tensors are refused to keep runs cheap") {
        auto big = torch::rand({65}, torch::kDouble);
        CHECK_THROWS_AS(losses::grad_check(
                            [](const std::vector<torch::Tensor>& in) { return in[0].sum(); },
                            {big}),
                        ValidationError);
    }
    SUBCASE("a sabotaged gradient is caught") {
        auto x = torch::full({4}, 0.5, torch::kDouble);
        // Detaching one factor halves the analytic gradient of sum(x^2)
        // while finite differences still see the true slope.
        auto r = losses::grad_check(
            [](const std::vector<torch::Tensor>& in) {
                return (in[0].detach() * in[0]).sum();
            },
            {x});
        CHECK_FALSE(r.pass);
        CHECK(r.max_rel_error > 0.1);
    }
    SUBCASE("non-finite losses are reported, not silently diffed") {
        auto x = torch::full({2}, 0.5, torch::kDouble);
        CHECK_THROWS_AS(losses::grad_check(
                            [](const std::vector<torch::Tensor>& in) {
                                return in[0].log().sum() / 0.0;
                            },
                            {x}),
                        ValidationError);
    }
}
