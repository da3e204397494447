
#include <cmath>
#include <fstream>
#include <random>

#include <torch/torch.h>

#include "anglekit/common.hpp"
#include "anglekit/training.hpp"
#include "test_util.hpp"

#include "doctest_main.hpp"

using namespace anglekit;
using train::OptimConfig;
using train::TrainConfig;

namespace {

// Separable toy set: class 0 lights the top-left quadrant, class 1 the
// bottom-right, on a dim noisy background.
train::ClsData make_cls_data(int n, int s, std::uint64_t seed) {
    torch::manual_seed(seed);
    auto x = torch::rand({n, 1, s, s}) * 0.2;
    auto y = torch::zeros({n, 1});
    for (int i = 0; i < n; ++i) {
        if (i % 2 == 0) {
            x.index({i, 0}).slice(0, 0, s / 2).slice(1, 0, s / 2) += 0.7;
        } else {
            x.index({i, 0}).slice(0, s / 2, s).slice(1, s / 2, s) += 0.7;
            y.index_put_({i, 0}, 1.0);
        }
    }
    x.clamp_(0.0, 1.0);
    return {x, y};
}

models::Classifier tiny_classifier(std::uint64_t seed) {
    torch::manual_seed(seed);
    models::ClassifierConfig cfg;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.base_width = 8;
    cfg.input_size = 32;
    return models::build_classifier(cfg);
}

// Bright blob at the landmark on a dim background: the landmark is readable
// straight from the pixels, so a few steps of training must localize it.
train::LocData make_bump_data(int n, int size, std::uint64_t seed) {
    train::LocData d;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(12.0, size - 12.0);
    for (int i = 0; i < n; ++i) {
        const geometry::Point2D gt{pos(rng), pos(rng)};
        cv::Mat img(size, size, CV_32F);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double d2 = (x - gt.x) * (x - gt.x) + (y - gt.y) * (y - gt.y);
                img.at<float>(y, x) = static_cast<float>(0.1 + 0.85 * std::exp(-d2 / 18.0));
            }
        }
        d.resized.push_back(img);
        d.gt_resized.push_back(gt);
        d.gt_raw.push_back(gt);
        d.resized_to_raw.push_back(geometry::SimilarityTransform2D::identity());
    }
    return d;
}

models::Localizer tiny_localizer(std::uint64_t seed) {
    torch::manual_seed(seed);
    models::LocalizerConfig cfg;
    cfg.encoder.stage_widths = {4, 8, 8, 16, 16};
    cfg.decoder_width = 8;
    cfg.ppm_bins = {1, 2};
    cfg.input_size = 64;
    cfg.head_bias = -3.0;  // start near the mostly-zero target
    return models::build_localizer(cfg);
}

train::LocTrainParams bump_params() {
    train::LocTrainParams lp;
    lp.pad_size = 64;
    lp.crop_w = 32;
    lp.crop_h = 24;
    // The encoder reduces by 32x, so the padded crop must keep the deepest
    // feature map at least as large as the biggest pyramid bin (here 2).
    lp.crop_pad_w = 64;
    lp.crop_pad_h = 64;
    lp.sigma = 2.5;
    return lp;
}

}  // namespace

TEST_CASE("the cosine schedule spans lr0 to zero") {
    CHECK(train::cosine_lr(0, 100, 0.3) == doctest::Approx(0.3));
    CHECK(train::cosine_lr(50, 100, 0.3) == doctest::Approx(0.15));
    CHECK(std::abs(train::cosine_lr(100, 100, 0.3)) <= 1e-15);
    for (std::int64_t t : {1, 7, 31, 99}) {
        const double expect = 0.5 * 0.3 * (1.0 + std::cos(M_PI * t / 100.0));
        CHECK(train::cosine_lr(t, 100, 0.3) == doctest::Approx(expect).epsilon(1e-15));
    }
    // Monotone non-increasing across the whole horizon.
    double prev = train::cosine_lr(0, 100, 0.3);
    for (std::int64_t t = 1; t <= 100; ++t) {
        const double lr = train::cosine_lr(t, 100, 0.3);
        CHECK(lr <= prev + 1e-18);
        prev = lr;
    }
    CHECK_THROWS_AS(train::cosine_lr(-1, 100, 0.3), ValidationError);
    CHECK_THROWS_AS(train::cosine_lr(101, 100, 0.3), ValidationError);
    CHECK_THROWS_AS(train::cosine_lr(0, 0, 0.3), ValidationError);
}

TEST_CASE("the optimizer only moves parameters that have gradients") {
    auto p = torch::zeros({3}, torch::requires_grad());
    OptimConfig opt;
    opt.lr0 = 0.1;
    auto adam = train::make_adam({p}, opt);

    p.mutable_grad() = torch::zeros({3});
    adam.step();
    CHECK(p.abs().max().item<double>() == doctest::Approx(0.0));

    // A constant positive gradient walks the parameter steadily downward.
    double last = 0.0;
    for (int i = 0; i < 20; ++i) {
        adam.zero_grad();
        p.mutable_grad() = torch::ones({3});
        adam.step();
        const double now = p[0].item<double>();
        CHECK(now < last);
        last = now;
    }
}

TEST_CASE("history files carry one row per epoch") {
    testutil::TempDir tmp("hist");
    train::History h;
    h.rows = {{0, 0.1, 1.0, 0.5}, {1, 0.05, 0.8, 0.6}};
    const auto path = tmp / "history.csv";
    train::write_history_csv(h, path);

    std::ifstream f(path);
    std::string line;
    REQUIRE(std::getline(f, line));
    CHECK(line == "epoch,lr,train_loss,val_metric");
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("checkpoints restore training mid-stream exactly") {
    testutil::TempDir tmp("ckpt");
    torch::manual_seed(100);
    auto x1 = torch::rand({4, 3});
    auto y1 = torch::rand({4, 1});
    auto x2 = torch::rand({4, 3});
    auto y2 = torch::rand({4, 1});

    torch::manual_seed(7);
    torch::nn::Linear model(3, 1);
    OptimConfig opt;
    opt.lr0 = 0.01;
    auto adam = train::make_adam(model->parameters(), opt);

    auto step_once = [](torch::nn::Linear& m, torch::optim::Adam& a, const torch::Tensor& x,
                        const torch::Tensor& y) {
        a.zero_grad();
        torch::mse_loss(m->forward(x), y).backward();
        a.step();
    };

    step_once(model, adam, x1, y1);

    train::CheckpointMeta meta;
    meta.task = "classifier";
    meta.config_echo = "train.lr0=0.01\n";
    meta.epoch = 1;
    meta.step = 1;
    meta.total_steps = 2;
    meta.best_epoch = 0;
    meta.best_metric = 0.75;
    const auto path = tmp / "mid.ckpt";
    train::save_checkpoint(path, meta, *model, &adam);

    step_once(model, adam, x2, y2);
    const auto expected = model->weight.clone();

    SUBCASE("reloaded state reproduces the next step bit-for-bit") {
        torch::manual_seed(99);  // deliberately different init
        torch::nn::Linear fresh(3, 1);
        auto adam2 = train::make_adam(fresh->parameters(), opt);
        const auto back = train::load_checkpoint(path, *fresh, &adam2);
        CHECK(back.task == "classifier");
        CHECK(back.epoch == 1);
        CHECK(back.step == 1);
        CHECK(back.total_steps == 2);
        CHECK(back.best_epoch == 0);
        CHECK(back.best_metric == doctest::Approx(0.75));
        CHECK(back.config_echo == "train.lr0=0.01\n");

        step_once(fresh, adam2, x2, y2);
        CHECK((fresh->weight - expected).abs().max().item<double>() <= 1e-9);
    }
    SUBCASE("metadata reads without touching any model") {
        const auto peek = train::read_checkpoint_meta(path);
        CHECK(peek.task == "classifier");
        CHECK(peek.step == 1);
        CHECK(peek.config_echo == "train.lr0=0.01\n");
    }
    SUBCASE("missing and malformed files are rejected") {
        CHECK_THROWS_AS(train::read_checkpoint_meta(tmp / "absent.ckpt"), ValidationError);
        const auto junk = tmp / "junk.ckpt";
        testutil::write_file(junk, "not a checkpoint");
        CHECK_THROWS_AS(train::read_checkpoint_meta(junk), ValidationError);
        torch::nn::Linear m2(3, 1);
        CHECK_THROWS_AS(train::load_checkpoint(junk, *m2, nullptr), ValidationError);
    }
}

TEST_CASE("classifier training is reproducible and checkpointable") {
    const auto train_data = make_cls_data(32, 32, 500);
    const auto val_data = make_cls_data(16, 32, 501);
    OptimConfig opt;
    opt.lr0 = 0.002;
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 4;
    tc.seed = 9;
    tc.augment_shift = 2;
    train::ClsLossParams lp;

    SUBCASE("two runs from one seed produce one loss curve") {
        auto m1 = tiny_classifier(42);
        const auto h1 = train::train_classifier(m1, train_data, val_data, opt, tc, lp);
        auto m2 = tiny_classifier(42);
        const auto h2 = train::train_classifier(m2, train_data, val_data, opt, tc, lp);

        REQUIRE(h1.rows.size() == 4);
        REQUIRE(h2.rows.size() == 4);
        for (size_t i = 0; i < 4; ++i) {
            CHECK(std::abs(h1.rows[i].train_loss - h2.rows[i].train_loss) <= 1e-12);
            CHECK(std::abs(h1.rows[i].val_metric - h2.rows[i].val_metric) <= 1e-12);
            CHECK(h1.rows[i].lr == doctest::Approx(h2.rows[i].lr).epsilon(1e-15));
        }
        CHECK(h1.step_lrs.size() == 16);  // 4 batches x 4 epochs
        CHECK(h1.step_lrs.front() == doctest::Approx(opt.lr0));
        CHECK(h1.best_epoch >= 0);
    }
    SUBCASE("a prefetch worker leaves the numbers unchanged") {
        auto m1 = tiny_classifier(43);
        const auto h1 = train::train_classifier(m1, train_data, val_data, opt, tc, lp);
        TrainConfig with_worker = tc;
        with_worker.workers = 2;
        auto m2 = tiny_classifier(43);
        const auto h2 = train::train_classifier(m2, train_data, val_data, opt, with_worker, lp);
        REQUIRE(h1.rows.size() == h2.rows.size());
        for (size_t i = 0; i < h1.rows.size(); ++i)
            CHECK(std::abs(h1.rows[i].train_loss - h2.rows[i].train_loss) <= 1e-10);
    }
    SUBCASE("pausing and resuming matches the uninterrupted run") {
        testutil::TempDir tmp("resume");
        auto full = tiny_classifier(44);
        const auto hist_full = train::train_classifier(full, train_data, val_data, opt, tc, lp,
                                                       tmp / "full");

        TrainConfig paused = tc;
        paused.stop_after_epochs = 2;
        auto part = tiny_classifier(44);
        const auto hist_part = train::train_classifier(part, train_data, val_data, opt, paused, lp,
                                                       tmp / "part");
        REQUIRE(hist_part.rows.size() == 2);
        CHECK(std::filesystem::exists(tmp / "part" / "last.ckpt"));

        auto resumed = tiny_classifier(4444);  // init is irrelevant; weights come from the file
        const auto hist_rest = train::train_classifier(resumed, train_data, val_data, opt, tc, lp,
                                                       tmp / "part", {},
                                                       tmp / "part" / "last.ckpt");
        REQUIRE(hist_rest.rows.size() == 2);
        for (size_t i = 0; i < 2; ++i) {
            CHECK(hist_rest.rows[i].epoch == hist_full.rows[i + 2].epoch);
            CHECK(std::abs(hist_rest.rows[i].train_loss - hist_full.rows[i + 2].train_loss) <=
                  1e-6);
            CHECK(std::abs(hist_rest.rows[i].val_metric - hist_full.rows[i + 2].val_metric) <=
                  1e-6);
        }

        torch::NoGradGuard guard;
        const auto pf = full->parameters();
        const auto pr = resumed->parameters();
        REQUIRE(pf.size() == pr.size());
        for (size_t i = 0; i < pf.size(); ++i)
            CHECK((pf[i] - pr[i]).abs().max().item<double>() <= 1e-6);
    }
    SUBCASE("resuming against a different schedule horizon is refused") {
        testutil::TempDir tmp("horizon");
        TrainConfig paused = tc;
        paused.stop_after_epochs = 1;
        auto part = tiny_classifier(45);
        train::train_classifier(part, train_data, val_data, opt, paused, lp, tmp / "run");

        TrainConfig longer = tc;
        longer.epochs = 9;  // different total step count
        auto resumed = tiny_classifier(45);
        CHECK_THROWS_AS(train::train_classifier(resumed, train_data, val_data, opt, longer, lp,
                                                tmp / "run", {}, tmp / "run" / "last.ckpt"),
                        ValidationError);
    }
    SUBCASE("degenerate configurations are rejected") {
        auto m = tiny_classifier(46);
        TrainConfig bad = tc;
        bad.batch_size = 0;
        CHECK_THROWS_AS(train::train_classifier(m, train_data, val_data, opt, bad, lp),
                        ValidationError);
        bad = tc;
        bad.epochs = 0;
        CHECK_THROWS_AS(train::train_classifier(m, train_data, val_data, opt, bad, lp),
                        ValidationError);
        train::ClsData empty;
        CHECK_THROWS_AS(train::train_classifier(m, empty, val_data, opt, tc, lp),
                        ValidationError);
    }
}

TEST_CASE("stage-1 localizer training drives the held-out distance down") {
    const auto train_data = make_bump_data(32, 60, 600);
    const auto val_data = make_bump_data(12, 60, 601);
    OptimConfig opt;
    opt.lr0 = 0.005;
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 8;
    tc.seed = 11;
    auto lp = bump_params();

    auto model = tiny_localizer(50);
    const auto hist = train::train_localizer(model, train_data, val_data, 1, opt, tc, lp);
    REQUIRE(hist.rows.size() == 8);
    for (const auto& row : hist.rows) {
        CHECK(std::isfinite(row.val_metric));
        CHECK(row.val_metric >= 0.0);
    }
    // The best epoch must improve on the first epoch's validation distance.
    CHECK(hist.best_metric < hist.rows.front().val_metric);
    CHECK(hist.best_epoch == [&] {
        int arg = 0;
        for (size_t i = 1; i < hist.rows.size(); ++i)
            if (hist.rows[i].val_metric < hist.rows[arg].val_metric) arg = static_cast<int>(i);
        return hist.rows[arg].epoch;
    }());

    SUBCASE("reruns reproduce the loss curve") {
        auto m2 = tiny_localizer(50);
        const auto h2 = train::train_localizer(m2, train_data, val_data, 1, opt, tc, lp);
        REQUIRE(h2.rows.size() == hist.rows.size());
        for (size_t i = 0; i < h2.rows.size(); ++i)
            CHECK(std::abs(h2.rows[i].train_loss - hist.rows[i].train_loss) <= 1e-12);
    }
}

TEST_CASE("stage-2 localizer training refines around jittered centers") {
    const auto train_data = make_bump_data(24, 60, 700);
    const auto val_data = make_bump_data(8, 60, 701);
    OptimConfig opt;
    opt.lr0 = 0.005;
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 3;
    tc.seed = 12;
    tc.crop_jitter = 4.0;
    auto lp = bump_params();
    lp.sigma = 2.0;

    SUBCASE("jittered ground-truth crops train and evaluate") {
        auto model = tiny_localizer(60);
        const auto hist = train::train_localizer(model, train_data, val_data, 2, opt, tc, lp);
        REQUIRE(hist.rows.size() == 3);
        for (const auto& row : hist.rows) CHECK(std::isfinite(row.val_metric));
    }
    SUBCASE("supplied coarse centers drive the crops") {
        auto with_coarse_train = train_data;
        auto with_coarse_val = val_data;
        for (const auto& gt : train_data.gt_resized)
            with_coarse_train.coarse_resized.push_back({gt.x + 2.0, gt.y - 3.0});
        for (const auto& gt : val_data.gt_resized)
            with_coarse_val.coarse_resized.push_back({gt.x - 2.0, gt.y + 3.0});

        TrainConfig coarse_tc = tc;
        coarse_tc.crops_from_coarse = true;
        auto model = tiny_localizer(61);
        const auto hist = train::train_localizer(model, with_coarse_train, with_coarse_val, 2, opt,
                                                 coarse_tc, lp);
        CHECK(hist.rows.size() == 3);
    }
    SUBCASE("stage-2 preconditions are enforced") {
        auto model = tiny_localizer(62);
        TrainConfig bad = tc;
        bad.crops_from_coarse = true;  // but no coarse points in the data
        CHECK_THROWS_AS(train::train_localizer(model, train_data, val_data, 2, opt, bad, lp),
                        ValidationError);
        bad = tc;
        bad.crop_jitter = 0.0;
        CHECK_THROWS_AS(train::train_localizer(model, train_data, val_data, 2, opt, bad, lp),
                        ValidationError);
        CHECK_THROWS_AS(train::train_localizer(model, train_data, val_data, 3, opt, tc, lp),
                        ValidationError);
        auto lp_bad = lp;
        lp_bad.crop_pad_w = 48;  // not a multiple of 32
        CHECK_THROWS_AS(train::train_localizer(model, train_data, val_data, 2, opt, tc, lp_bad),
                        ValidationError);
    }
    SUBCASE("stage-1 inputs must fit the padded frame") {
        auto model = tiny_localizer(63);
        auto lp_small = lp;
        lp_small.pad_size = 32;  // resized inputs are 60 wide
        CHECK_THROWS_AS(train::train_localizer(model, train_data, val_data, 1, opt, tc, lp_small),
                        ValidationError);
    }
}
