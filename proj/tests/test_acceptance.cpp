// Acceptance gate: eight timed pass/fail checks covering loss math, the
// heatmap codec, architecture structure, metric oracles, and end-to-end
// training on the bundled synthetic dataset. Prints one line per criterion
// and exits with the number of failures.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "anglekit/classifier.hpp"
#include "anglekit/config.hpp"
#include "anglekit/data.hpp"
#include "anglekit/evaluation.hpp"
#include "anglekit/geometry.hpp"
#include "anglekit/localizer.hpp"
#include "anglekit/losses.hpp"
#include "anglekit/pipeline.hpp"
#include "anglekit/training.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace anglekit;
using data::Side;

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
    if (!cond) throw CheckFailure(msg);
}

std::string num(double v, int digits = 4) {
    std::ostringstream ss;
    ss << std::setprecision(digits) << v;
    return ss.str();
}

torch::Tensor dten(std::initializer_list<double> v) {
    return torch::tensor(std::vector<double>(v), torch::kDouble);
}

// Shared 500-image synthetic dataset with an 80/20 split, built once and
// reused by the end-to-end criteria.
struct SynthFixture {
    testutil::TempDir tmp{"acceptance"};
    fs::path ds, prep;
    bool ready = false;

    void ensure() {
        if (ready) return;
        config::RunConfig cfg;  // synthesis defaults: 500 images at 128x128
        ds = tmp / "data";
        pipeline::cmd_synth(cfg, 42, ds);
        prep = tmp / "prep";
        pipeline::cmd_prepare(cfg, ds / "manifest.csv", ds, 7, prep);
        for (const char* name : {"train.csv", "test.csv"}) {
            auto fold = data::load_manifest(prep / name, ds);
            bool pos = false, neg = false;
            for (const auto& r : fold.records) (r.label ? pos : neg) = true;
            require(pos && neg, std::string(name) + " fold is single-class");
        }
        ready = true;
    }
};

// --- criterion 1: loss values and gradients --------------------------------

std::string check_losses() {
    const double focal =
        losses::focal_loss(dten({0.5}), dten({1.0}), losses::FocalParams{2.0, 2.0, false})
            .item<double>();
    require(std::abs(focal - 0.346574) <= 1e-6,
            "focal example " + num(focal, 9) + " != 0.346574");

    const double fbeta =
        losses::fbeta_loss(dten({1.0, 1.0, 0.0, 0.0}), dten({1.0, 0.0, 1.0, 0.0}))
            .item<double>();
    require(std::abs(fbeta - 0.625) <= 1e-6, "F-beta example " + num(fbeta, 9) + " != 0.625");

    // Keypoint loss against a zero prediction has the closed form
    // rho3 * sum(H^2)/N + rho4, with sum(H^2) accumulated independently here.
    const int hs = 64;
    const double cx = 31.7, cy = 30.2, sigma = 4.0;
    auto target = torch::zeros({hs, hs}, torch::kDouble);
    auto acc = target.accessor<double, 2>();
    double q = 0.0;
    for (int y = 0; y < hs; ++y)
        for (int x = 0; x < hs; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            acc[y][x] = std::exp(-d2 / (2.0 * sigma * sigma));
            q += acc[y][x] * acc[y][x];
        }
    losses::KRParams kp;
    const double expected = kp.rho3 * q / (hs * hs) + kp.rho4;
    const double kr = losses::kr_loss(torch::zeros_like(target), target, kp).item<double>();
    require(std::abs(kr - expected) <= 1e-6,
            "keypoint-loss closed form " + num(kr, 9) + " != " + num(expected, 9));

    int passed = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        torch::manual_seed(seed * 97 + 11);
        auto pred = (torch::rand({8}, torch::kDouble) * 0.8 + 0.1);
        auto target01 = (torch::rand({8}, torch::kDouble) > 0.5).to(torch::kDouble);
        auto hm_pred = torch::rand({4, 4}, torch::kDouble) * 0.8 + 0.1;
        auto hm_target = torch::rand({4, 4}, torch::kDouble);

        const std::vector<losses::GradCheckReport> reports = {
            losses::grad_check(
                [&](const std::vector<torch::Tensor>& in) {
                    return losses::focal_loss(in[0], target01);
                },
                {pred}),
            losses::grad_check(
                [&](const std::vector<torch::Tensor>& in) {
                    return losses::fbeta_loss(in[0], target01);
                },
                {pred}),
            losses::grad_check(
                [&](const std::vector<torch::Tensor>& in) {
                    return losses::hybrid_loss(in[0], target01);
                },
                {pred}),
            losses::grad_check(
                [&](const std::vector<torch::Tensor>& in) {
                    return losses::kr_loss(in[0], hm_target);
                },
                {hm_pred}),
        };
        for (const auto& r : reports) {
            passed += r.pass;
            worst = std::max(worst, r.max_rel_error);
        }
    }
    require(passed == 200, "gradient checks passed " + std::to_string(passed) + "/200");
    require(worst <= 1e-4, "worst gradient relative error " + num(worst) + " > 1e-4");
    return "scalar examples exact; gradient checks 200/200, worst rel err " + num(worst, 3);
}

// --- criterion 2: heatmap codec round trip ----------------------------------

std::string check_codec() {
    std::mt19937_64 rng(20240816);
    std::uniform_real_distribution<double> pos(3.0, 61.0);
    std::uniform_real_distribution<double> sig(2.0, 8.0);
    double max_arg = 0.0, max_cen = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const geometry::Point2D c{pos(rng), pos(rng)};
        const auto hm = geometry::encode_heatmap(c, 64, 64, {sig(rng)}, 1);

        float best = -1.f;
        int bx = -1, by = -1;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const float v = hm.values.at<float>(y, x);
                if (v > best) {
                    best = v;
                    bx = x;
                    by = y;
                }
            }
        max_arg = std::max({max_arg, std::abs(bx - c.x), std::abs(by - c.y)});

        const auto dec = geometry::decode_heatmap(hm);
        require(dec.has_value(), "decode returned no response");
        max_cen = std::max({max_cen, std::abs(dec->point.x - c.x), std::abs(dec->point.y - c.y)});
    }
    require(max_arg <= 0.5 + 1e-6, "argmax error " + num(max_arg, 9) + " px > 0.5");
    require(max_cen <= 0.25 + 1e-6, "centroid error " + num(max_cen, 9) + " px > 0.25");
    return "1000 round trips: argmax <= " + num(max_arg, 3) + " px, centroid <= " +
           num(max_cen, 3) + " px per axis";
}

// --- criterion 3: downsampling shortcut gradient coverage -------------------

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

std::string check_shortcut_coverage() {
    const int pooled = covered_positions(models::make_shortcut_down(1, 4, true), 8);
    const int strided = covered_positions(models::make_shortcut_down(1, 4, false), 8);
    require(pooled == 64, "pooled shortcut covers " + std::to_string(pooled) + "/64 positions");
    require(strided == 16,
            "strided shortcut covers " + std::to_string(strided) + "/64 positions");
    return "pooled shortcut 64/64 input positions, strided 1x1 shortcut 16/64";
}

// --- criterion 4: architecture structure ------------------------------------

std::string check_architecture() {
    auto full = models::build_classifier(models::ClassifierConfig{});
    const int blocks = full->count_bottleneck_blocks();
    const int layers = full->count_weighted_layers();
    require(blocks == 50, "bottleneck count " + std::to_string(blocks) + " != 50");
    require(layers == 152, "weighted layer count " + std::to_string(layers) + " != 152");

    models::EncoderConfig ec;
    ec.stage_widths = {4, 8, 16, 32, 64};
    models::Default4EncoderImpl enc(ec);
    const auto levels = enc.forward_pyramid(torch::rand({1, 1, 64, 64}));
    require(levels.size() == 5, "pyramid has " + std::to_string(levels.size()) + " levels");
    const std::vector<int> strides{2, 4, 8, 16, 32};
    for (size_t i = 0; i < levels.size(); ++i)
        require(levels[i].size(2) == 64 / strides[i] && levels[i].size(3) == 64 / strides[i],
                "pyramid level " + std::to_string(i) + " is not at stride " +
                    std::to_string(strides[i]));

    models::PPM ppm(32, std::vector<int>{1, 2, 3, 6});
    // Eval mode: the bin-1 branch pools to 1x1, where train-mode batch norm
    // cannot form statistics from a single-sample batch.
    ppm->eval();
    const auto pooled = ppm->forward_pooled(torch::rand({1, 32, 8, 8}));
    require(pooled.size() == 4, "pooling pyramid has " + std::to_string(pooled.size()) +
                                    " branches");
    const std::vector<int> bins{1, 2, 3, 6};
    for (size_t i = 0; i < pooled.size(); ++i)
        require(pooled[i].size(2) == bins[i] && pooled[i].size(3) == bins[i],
                "pooling branch " + std::to_string(i) + " is not " + std::to_string(bins[i]) +
                    "-binned");

    // The ablation grid must be constructible from flags alone: both encoders
    // with and without the pooling module, and the loss selectable by key.
    for (const char* variant : {"default4", "scaled_mbconv"})
        for (bool with_ppm : {true, false}) {
            models::LocalizerConfig lc;
            lc.encoder.variant = variant;
            lc.encoder.stage_widths = {4, 8, 8, 16, 16};
            lc.ppm_enabled = with_ppm;
            lc.ppm_bins = {1, 2};
            lc.decoder_width = 8;
            auto model = models::build_localizer(lc);
            model->eval();
            const auto out = model->forward(torch::rand({1, 1, 64, 64}));
            require(out.size(2) == 32 && out.size(3) == 32,
                    std::string(variant) + " ablation variant produced a wrong-shaped map");
        }
    config::RunConfig mse_cfg;
    mse_cfg.set("loc.loss", "mse");
    require(pipeline::loc_train_params(mse_cfg, 1).use_mse, "loc.loss=mse not honoured");
    require(!pipeline::loc_train_params(config::RunConfig{}, 1).use_mse,
            "default localization loss is not the keypoint loss");
    return "50 bottlenecks, 152 layers; pyramid strides {2,4,8,16,32}; pooling bins "
           "{1,2,3,6}; 2x2 ablation grid + loss flag build";
}

// --- criterion 5: metric oracles ---------------------------------------------

double brute_force_auc(const std::vector<eval::ScoredSample>& s) {
    double wins = 0.0;
    std::int64_t pairs = 0;
    for (const auto& p : s) {
        if (p.label != 1) continue;
        for (const auto& n : s) {
            if (n.label != 0) continue;
            ++pairs;
            if (p.score > n.score)
                wins += 1.0;
            else if (p.score == n.score)
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

std::string check_metric_oracles() {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> n_dist(2, 400);
    std::uniform_int_distribution<int> grid(0, 9);
    std::uniform_real_distribution<double> cont(0.0, 1.0);
    std::uniform_int_distribution<int> label(0, 1);
    double max_diff = 0.0;
    for (int instance = 0; instance < 200; ++instance) {
        const int n = n_dist(rng);
        std::vector<eval::ScoredSample> samples(n);
        const bool tied = instance % 2 == 0;
        int pos = 0;
        for (int i = 0; i < n; ++i) {
            samples[i].image_id = "im" + std::to_string(i);
            samples[i].score = tied ? grid(rng) / 9.0 : cont(rng);
            samples[i].label = label(rng);
            pos += samples[i].label;
        }
        if (pos == 0) samples[0].label = 1;
        if (pos == n) samples[0].label = 0;
        max_diff = std::max(max_diff,
                            std::abs(eval::roc_auc(samples) - brute_force_auc(samples)));
    }
    require(max_diff <= 1e-12, "rank vs pairwise AUC differ by " + num(max_diff));

    std::vector<eval::LocalizationResult> rs;
    rs.push_back({"a", Side::left, {10.28, 0.0}, {0.0, 0.0}});
    rs.push_back({"a", Side::right, {13.73, 0.0}, {0.0, 0.0}});
    const auto ed = eval::ed_error(rs);
    require(std::abs(ed.avg_ed - 12.005) <= 1e-12,
            "avg ED " + num(ed.avg_ed, 9) + " != mean(10.28, 13.73)");
    require(eval::format_metric(ed.avg_ed) == "12.00",
            "avg ED formats as '" + eval::format_metric(ed.avg_ed) + "', expected '12.00'");
    return "200 AUC instances match pairwise oracle to " + num(max_diff, 3) +
           "; avg ED of (10.28, 13.73) reports as 12.00";
}

// --- criterion 6: end-to-end classification ----------------------------------

std::string check_classification(SynthFixture& fx) {
    fx.ensure();
    config::RunConfig cfg;
    cfg.set("cls.scale", "0.25");
    cfg.set("cls.depths", "2,2,2,2");
    cfg.set("cls.input_size", "64");
    cfg.set("train.epochs", "15");

    const fs::path run = fx.tmp / "cls-run";
    const auto outcome = pipeline::cmd_train_cls(cfg, fx.prep / "train.csv",
                                                 fx.prep / "test.csv", fx.ds, 42, run);

    const fs::path pred = fx.tmp / "cls-pred";
    pipeline::cmd_predict_cls(outcome.best, fx.prep / "test.csv", fx.ds, pred);
    const auto rows = eval::load_predictions(pred / "predictions.csv");
    const auto te = data::load_manifest(fx.prep / "test.csv", fx.ds);
    const double auc = eval::roc_auc(eval::join_classification(rows, te));
    require(auc >= 0.98, "held-out AUC " + num(auc) + " < 0.98");
    return "held-out AUC " + num(auc) + " over " + std::to_string(te.records.size() * 2) +
           " halves";
}

// --- criterion 7: end-to-end two-stage localization ---------------------------

std::string check_localization(SynthFixture& fx) {
    fx.ensure();
    config::RunConfig cfg;
    cfg.set("loc.resize", "128");
    cfg.set("loc.pad", "128");
    cfg.set("loc.widths", "8,16,32,64,128");
    cfg.set("loc.decoder_width", "16");
    // The largest bin must fit the deepest feature map of the smaller stage-2
    // frame: crop_pad 64 -> 2x2 after the 32x encoder reduction.
    cfg.set("loc.ppm_bins", "1,2");
    cfg.set("loc.sigma", "3");
    cfg.set("loc.sigma_stage2", "2");
    cfg.set("loc.crop_w", "64");
    cfg.set("loc.crop_h", "48");
    cfg.set("loc.crop_pad_w", "64");
    cfg.set("loc.crop_pad_h", "64");
    cfg.set("train.crop_jitter", "6");
    cfg.set("train.epochs", "10");

    const auto s1 = pipeline::cmd_train_loc(cfg, 1, fx.prep / "train.csv",
                                            fx.prep / "test.csv", fx.ds, 42,
                                            fx.tmp / "loc-s1");
    auto cfg2 = cfg;
    cfg2.set("train.epochs", "8");
    const auto s2 = pipeline::cmd_train_loc(cfg2, 2, fx.prep / "train.csv",
                                            fx.prep / "test.csv", fx.ds, 43,
                                            fx.tmp / "loc-s2", {}, s1.best);

    const auto te = data::load_manifest(fx.prep / "test.csv", fx.ds);
    auto score = [&](const fs::path& dir) {
        const auto rows = eval::load_predictions(dir / "predictions.csv");
        return eval::ed_error(eval::join_localization(rows, te));
    };
    pipeline::cmd_predict_loc(s1.best, {}, fx.prep / "test.csv", fx.ds, fx.tmp / "loc-p1");
    const auto ed1 = score(fx.tmp / "loc-p1");
    pipeline::cmd_predict_loc(s1.best, s2.best, fx.prep / "test.csv", fx.ds,
                              fx.tmp / "loc-p2");
    const auto ed2 = score(fx.tmp / "loc-p2");

    require(ed2.avg_ed <= 3.0, "two-stage mean ED " + num(ed2.avg_ed) + " px > 3 px");
    require(ed2.avg_ed <= ed1.avg_ed, "refinement worsened mean ED: stage 1 " +
                                          num(ed1.avg_ed) + " px, two-stage " +
                                          num(ed2.avg_ed) + " px");
    return "held-out mean ED: stage 1 " + num(ed1.avg_ed) + " px, two-stage " +
           num(ed2.avg_ed) + " px";
}

// --- criterion 8: determinism and resume --------------------------------------

std::string check_determinism() {
    testutil::TempDir tmp("acceptance-det");
    config::RunConfig synth_cfg;
    synth_cfg.set("synth.count", "24");
    synth_cfg.set("synth.height", "64");
    synth_cfg.set("synth.width", "64");
    const fs::path ds = tmp / "data";
    auto manifest = pipeline::cmd_synth(synth_cfg, 5, ds);

    std::uint64_t split_seed = 0;
    for (std::uint64_t seed = 1; seed <= 64 && split_seed == 0; ++seed) {
        auto [tr, te] = data::make_split(manifest, 0.75, seed);
        auto mixed = [](const data::DatasetManifest& f) {
            bool pos = false, neg = false;
            for (const auto& r : f.records) (r.label ? pos : neg) = true;
            return pos && neg;
        };
        if (mixed(tr) && mixed(te)) split_seed = seed;
    }
    require(split_seed != 0, "no balanced split seed found");
    config::RunConfig prep_cfg = synth_cfg;
    prep_cfg.set("split.ratio", "0.75");
    const fs::path prep = tmp / "prep";
    pipeline::cmd_prepare(prep_cfg, ds / "manifest.csv", ds, split_seed, prep);

    config::RunConfig cfg;
    cfg.set("cls.depths", "1,1,1,1");
    cfg.set("cls.base_width", "8");
    cfg.set("cls.input_size", "32");
    cfg.set("train.epochs", "3");
    cfg.set("train.batch_size", "8");
    cfg.set("train.augment_shift", "2");

    auto train_once = [&](const config::RunConfig& c, const fs::path& out,
                          const std::optional<fs::path>& resume = {}) {
        return pipeline::cmd_train_cls(c, prep / "train.csv", prep / "test.csv", ds, 11, out,
                                       resume);
    };
    const auto a = train_once(cfg, tmp / "run-a");
    const auto b = train_once(cfg, tmp / "run-b");
    require(a.history.rows.size() == 3 && b.history.rows.size() == 3,
            "unexpected history length");
    double max_replay = 0.0;
    for (size_t i = 0; i < a.history.rows.size(); ++i) {
        max_replay = std::max({max_replay,
                               std::abs(a.history.rows[i].train_loss -
                                        b.history.rows[i].train_loss),
                               std::abs(a.history.rows[i].val_metric -
                                        b.history.rows[i].val_metric)});
        require(a.history.rows[i].lr == b.history.rows[i].lr, "learning rates diverged");
    }
    require(max_replay <= 1e-6, "rerun loss curves differ by " + num(max_replay));

    auto part_cfg = cfg;
    part_cfg.set("train.stop_after", "2");
    const auto part = train_once(part_cfg, tmp / "run-c");
    require(part.history.rows.size() == 2, "interrupted run did not stop after 2 epochs");
    const auto rest = train_once(cfg, tmp / "run-c", fs::path(tmp / "run-c" / "last.ckpt"));
    require(rest.history.rows.size() == 1 && rest.history.rows[0].epoch == 2,
            "resumed run did not continue at epoch 2");
    const double resume_diff =
        std::max(std::abs(rest.history.rows[0].train_loss - a.history.rows[2].train_loss),
                 std::abs(rest.history.rows[0].val_metric - a.history.rows[2].val_metric));
    require(resume_diff <= 1e-6,
            "resumed epoch differs from uninterrupted run by " + num(resume_diff));
    return "rerun curves match to " + num(max_replay, 3) + "; resumed epoch matches to " +
           num(resume_diff, 3);
}

}  // namespace

int main() {
    struct Criterion {
        int index;
        std::string name;
        double budget_s;  // 0 = no runtime bound
        std::function<std::string()> fn;
    };

    SynthFixture fx;
    const std::vector<Criterion> criteria = {
        {1, "loss values and gradient checks", 60.0, check_losses},
        {2, "heatmap codec round trip", 60.0, check_codec},
        {3, "downsampling shortcut coverage", 0.0, check_shortcut_coverage},
        {4, "architecture structure", 0.0, check_architecture},
        {5, "metric oracles", 0.0, check_metric_oracles},
        {6, "synthetic classification", 900.0, [&] { return check_classification(fx); }},
        {7, "synthetic two-stage localization", 1800.0, [&] { return check_localization(fx); }},
        {8, "determinism and resume", 0.0, check_determinism},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = false;
        std::string note;
        try {
            note = c.fn();
            ok = true;
        } catch (const std::exception& e) {
            note = e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (ok && c.budget_s > 0.0 && secs > c.budget_s) {
            ok = false;
            note = "exceeded the " + num(c.budget_s, 3) + " s runtime bound (" + note + ")";
        }
        failures += !ok;
        std::printf("[%s] criterion %d: %s (%.1fs) — %s\n", ok ? "PASS" : "FAIL", c.index,
                    c.name.c_str(), secs, note.c_str());
        std::fflush(stdout);
    }
    std::printf("acceptance: %zu/%zu criteria passed\n", criteria.size() - failures,
                criteria.size());
    return failures;
}
