#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anglekit/classifier.hpp"
#include "anglekit/config.hpp"
#include "anglekit/data.hpp"
#include "anglekit/evaluation.hpp"
#include "anglekit/localizer.hpp"
#include "anglekit/synthetic.hpp"
#include "anglekit/training.hpp"

namespace anglekit::pipeline {

// Typed views over the flat config -----------------------------------------
synth::SynthConfig synth_config(const config::RunConfig& cfg, std::uint64_t seed);
models::ClassifierConfig classifier_config(const config::RunConfig& cfg);
models::LocalizerConfig localizer_config(const config::RunConfig& cfg);
train::OptimConfig optim_config(const config::RunConfig& cfg);
// Batch size 0 resolves to the task default (72 classification, 27 localization).
train::TrainConfig train_config(const config::RunConfig& cfg, bool classification,
                                std::uint64_t seed);
train::ClsLossParams cls_loss_params(const config::RunConfig& cfg);
train::LocTrainParams loc_train_params(const config::RunConfig& cfg, int stage);
models::TwoStageParams two_stage_params(const config::RunConfig& cfg);

// Dataset assembly ----------------------------------------------------------
std::vector<data::HalfSample> split_all(const data::DatasetManifest& m, bool mirror_right);
train::ClsData build_cls_data(const data::DatasetManifest& m, const config::RunConfig& cfg);
train::LocData build_loc_data(const data::DatasetManifest& m, const config::RunConfig& cfg);

// Rebuilds a model from the architecture echoed into its checkpoint and
// loads the weights; the returned config is the echoed one.
std::pair<models::Classifier, config::RunConfig> load_classifier(
    const std::filesystem::path& ckpt);
std::pair<models::Localizer, config::RunConfig> load_localizer(const std::filesystem::path& ckpt,
                                                               int expected_stage);

// Commands shared by the CLI and the acceptance gate ------------------------
struct TrainOutcome {
    train::History history;
    std::filesystem::path best;
    std::filesystem::path last;
};

data::DatasetManifest cmd_synth(const config::RunConfig& cfg, std::uint64_t seed,
                                const std::filesystem::path& out);
void cmd_prepare(const config::RunConfig& cfg, const std::filesystem::path& manifest,
                 const std::filesystem::path& images_root, std::uint64_t seed,
                 const std::filesystem::path& out);
TrainOutcome cmd_train_cls(const config::RunConfig& cfg,
                           const std::filesystem::path& train_manifest,
                           const std::filesystem::path& val_manifest,
                           const std::filesystem::path& images_root, std::uint64_t seed,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& resume = {});
TrainOutcome cmd_train_loc(const config::RunConfig& cfg, int stage,
                           const std::filesystem::path& train_manifest,
                           const std::filesystem::path& val_manifest,
                           const std::filesystem::path& images_root, std::uint64_t seed,
                           const std::filesystem::path& out,
                           const std::optional<std::filesystem::path>& resume = {},
                           const std::optional<std::filesystem::path>& coarse_ckpt = {});
void cmd_predict_cls(const std::filesystem::path& ckpt, const std::filesystem::path& manifest,
                     const std::filesystem::path& images_root,
                     const std::filesystem::path& out);
// `fine` may be empty: prediction then stops at the coarse stage (used by
// single-stage ablation runs).
void cmd_predict_loc(const std::filesystem::path& coarse_ckpt,
                     const std::optional<std::filesystem::path>& fine_ckpt,
                     const std::filesystem::path& manifest,
                     const std::filesystem::path& images_root, const std::filesystem::path& out,
                     bool overlays = false);
void cmd_eval(const std::string& task, const std::filesystem::path& pred,
              const std::filesystem::path& gt, const std::filesystem::path& images_root,
              double threshold, const std::filesystem::path& out);

struct AblationSpec {
    std::string encoder;
    bool ppm = false;
    bool kr = false;
    std::filesystem::path pred;
};

void cmd_report(const std::optional<std::filesystem::path>& cls_pred,
                const std::optional<std::filesystem::path>& loc_pred,
                const std::vector<AblationSpec>& ablation, const std::filesystem::path& gt,
                const std::filesystem::path& images_root, double threshold,
                const std::filesystem::path& out);

// Writes `config.txt` into the run directory: a comment block recording the
// invocation followed by the fully resolved config echo.
void write_run_echo(const std::filesystem::path& out, const config::RunConfig& cfg,
                    const std::vector<std::string>& invocation_lines);

}  // namespace anglekit::pipeline
