#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "anglekit/classifier.hpp"
#include "anglekit/data.hpp"
#include "anglekit/localizer.hpp"
#include "anglekit/losses.hpp"

namespace anglekit::train {

struct OptimConfig {
    double lr0 = 0.001;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
};

struct TrainConfig {
    int batch_size = 72;
    int epochs = 15;             // schedule horizon; the cosine decay always spans this
    int stop_after_epochs = 0;   // >0 pauses after that many epochs (resume continues)
    std::uint64_t seed = 0;
    double crop_jitter = 32.0;   // stage 2: crop-center jitter in stage-1 frame px
    bool crops_from_coarse = false;  // stage 2: center crops at supplied coarse points
    double grad_clip = 0.0;      // 0 disables
    int workers = 0;             // >0 prefetches the next batch on a thread
    int augment_shift = 0;       // random translation in px; 0 disables
};

// lr(t) = 0.5 * lr0 * (1 + cos(pi * t / T)).
double cosine_lr(std::int64_t t, std::int64_t total, double lr0);

struct EpochRow {
    int epoch = 0;
    double lr = 0.0;  // learning rate at the epoch's first step
    double train_loss = 0.0;
    double val_metric = 0.0;  // AUC for classification, mean ED for localization
};

struct History {
    std::vector<EpochRow> rows;
    std::vector<double> step_lrs;  // full per-step trace
    int best_epoch = -1;
    double best_metric = 0.0;
};

void write_history_csv(const History& h, const std::filesystem::path& path);

// Self-describing single-file checkpoint: magic + version, config echo,
// training position, model and optimizer state, RNG state.
struct CheckpointMeta {
    std::string task;
    std::string config_echo;
    std::int64_t epoch = 0;  // epochs completed
    std::int64_t step = 0;         // optimizer steps taken
    std::int64_t total_steps = 0;  // schedule horizon; resume must agree
    std::int64_t best_epoch = -1;
    double best_metric = 0.0;  // higher-is-better for AUC, lower for ED
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     torch::nn::Module& model, torch::optim::Optimizer* optimizer);
CheckpointMeta load_checkpoint(const std::filesystem::path& path, torch::nn::Module& model,
                               torch::optim::Optimizer* optimizer);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

// In-memory tensor datasets assembled by the pipeline layer.
struct ClsData {
    torch::Tensor x;  // (N,1,S,S)
    torch::Tensor y;  // (N,1)
};

struct LocData {
    // Stage-1 resized halves (not yet padded) with ground truth in the
    // resized frame; raw-frame truth and transforms evaluate ED.
    std::vector<cv::Mat> resized;
    std::vector<geometry::Point2D> gt_resized;
    std::vector<geometry::Point2D> gt_raw;
    std::vector<geometry::SimilarityTransform2D> resized_to_raw;
    // Stage-1 predictions in the resized frame; required only when stage-2
    // crops are centered on them instead of jittered ground truth.
    std::vector<geometry::Point2D> coarse_resized;
};

struct ClsLossParams {
    losses::HybridParams hybrid;
    losses::FocalParams focal;
    losses::FBetaParams fbeta;
};

struct LocTrainParams {
    int pad_size = 512;        // stage-1 padded input
    int crop_w = 384, crop_h = 288;
    int crop_pad_w = 384, crop_pad_h = 320;
    int stride = 2;
    double sigma = 4.0;
    losses::KRParams kr;
    bool use_mse = false;  // plain MSE ablation instead of the keypoint loss
};

// Shuffled seeded batches, Adam + per-step cosine decay, per-epoch history,
// last/best checkpoints under out_dir (when given). Resume continues at the
// checkpointed epoch boundary and reproduces the uninterrupted run.
History train_classifier(models::Classifier& model, const ClsData& train_data,
                         const ClsData& val_data, const OptimConfig& opt, const TrainConfig& tc,
                         const ClsLossParams& lp, const std::filesystem::path& out_dir = {},
                         const std::string& config_echo = {},
                         const std::optional<std::filesystem::path>& resume = {});

// stage 1 trains on padded resized halves against encoded ground truth;
// stage 2 trains on crops centered at ground truth plus uniform jitter
// (simulating coarse error). Validation decodes and reports mean raw-frame
// ED; best checkpoint is the lowest.
History train_localizer(models::Localizer& model, const LocData& train_data,
                        const LocData& val_data, int stage, const OptimConfig& opt,
                        const TrainConfig& tc, const LocTrainParams& lp,
                        const std::filesystem::path& out_dir = {},
                        const std::string& config_echo = {},
                        const std::optional<std::filesystem::path>& resume = {});

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const OptimConfig& opt);

}  // namespace anglekit::train
