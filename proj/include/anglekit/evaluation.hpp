#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "anglekit/data.hpp"

namespace anglekit::eval {

using data::Side;
using geometry::Point2D;

struct ScoredSample {
    std::string image_id;
    Side side = Side::left;
    double score = 0.0;  // probability in [0,1]
    int label = 0;
};

struct LocalizationResult {
    std::string image_id;
    Side side = Side::left;
    Point2D pred;  // raw-frame px
    Point2D gt;    // raw-frame px
};

// Rank-based AUC: the probability a random positive outscores a random
// negative, ties credited 0.5 (average ranks). Requires both classes.
double roc_auc(const std::vector<ScoredSample>& samples);

struct ThresholdMetrics {
    double sen = 0.0;
    double spe = 0.0;
    double acc = 0.0;
};

// score >= threshold counts as positive.
ThresholdMetrics threshold_metrics(const std::vector<ScoredSample>& samples,
                                   double threshold = 0.5);

struct EdStats {
    double left_ed = 0.0;
    double right_ed = 0.0;
    double avg_ed = 0.0;  // mean of the two side means
    std::size_t n_left = 0;
    std::size_t n_right = 0;
};

EdStats ed_error(const std::vector<LocalizationResult>& results);

// Two-decimal string under round-half-to-even (the bankers' rounding used in
// all report tables).
std::string format_metric(double value);

struct ClsTable {
    double auc = 0.0;
    ThresholdMetrics at_threshold;
};

struct AblationRow {
    std::string encoder;
    bool ppm = false;
    bool kr = false;
    EdStats metrics;
};

struct ReportInputs {
    std::optional<std::vector<ScoredSample>> classification;      // per-half samples
    std::optional<std::vector<LocalizationResult>> localization;  // per-half results
    std::vector<AblationRow> ablation;
    double threshold = 0.5;
};

// Emits report.md + report.csv tables, an ROC curve plot, and an ED
// histogram under out_dir.
void write_report(const ReportInputs& in, const std::filesystem::path& out_dir);

// predictions.csv: header `image_id,side,score,pred_x,pred_y`; coordinates
// are raw-frame and may be empty for classification-only rows.
struct PredictionRow {
    std::string image_id;
    Side side = Side::left;
    double score = 0.0;
    std::optional<Point2D> pred;
};

void save_predictions(const std::vector<PredictionRow>& rows, const std::filesystem::path& path);
std::vector<PredictionRow> load_predictions(const std::filesystem::path& path);

// Joins prediction rows against a manifest's labels / landmarks.
std::vector<ScoredSample> join_classification(const std::vector<PredictionRow>& rows,
                                              const data::DatasetManifest& gt);
std::vector<LocalizationResult> join_localization(const std::vector<PredictionRow>& rows,
                                                  const data::DatasetManifest& gt);

void plot_roc(const std::vector<ScoredSample>& samples, const std::filesystem::path& path);
void plot_ed_hist(const std::vector<LocalizationResult>& results,
                  const std::filesystem::path& path);

}  // namespace anglekit::eval
