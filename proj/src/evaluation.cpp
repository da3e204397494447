#include "anglekit/evaluation.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "anglekit/common.hpp"

namespace anglekit::eval {

double roc_auc(const std::vector<ScoredSample>& samples) {
    if (samples.empty()) throw ValidationError("roc_auc on empty input");
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return samples[a].score < samples[b].score; });

    // Average ranks over tie groups, then the Mann-Whitney U statistic.
    std::vector<double> rank(samples.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() &&
               samples[order[j + 1]].score == samples[order[i]].score)
            ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }

    double pos_rank_sum = 0.0;
    size_t n_pos = 0, n_neg = 0;
    for (size_t k = 0; k < samples.size(); ++k) {
        if (samples[k].label == 1) {
            pos_rank_sum += rank[k];
            ++n_pos;
        } else {
            ++n_neg;
        }
    }
    if (n_pos == 0 || n_neg == 0)
        throw ValidationError("roc_auc requires both classes");
    const double u = pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

ThresholdMetrics threshold_metrics(const std::vector<ScoredSample>& samples, double threshold) {
    if (samples.empty()) throw ValidationError("threshold_metrics on empty input");
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (const auto& s : samples) {
        const bool pred_pos = s.score >= threshold;
        if (s.label == 1)
            pred_pos ? ++tp : ++fn;
        else
            pred_pos ? ++fp : ++tn;
    }
    ThresholdMetrics m;
    m.sen = (tp + fn) ? static_cast<double>(tp) / (tp + fn)
                      : throw ValidationError("sensitivity needs positive samples");
    m.spe = (tn + fp) ? static_cast<double>(tn) / (tn + fp)
                      : throw ValidationError("specificity needs negative samples");
    m.acc = static_cast<double>(tp + tn) / samples.size();
    return m;
}

EdStats ed_error(const std::vector<LocalizationResult>& results) {
    EdStats stats;
    double left_sum = 0.0, right_sum = 0.0;
    for (const auto& r : results) {
        if (!std::isfinite(r.pred.x) || !std::isfinite(r.pred.y) || !std::isfinite(r.gt.x) ||
            !std::isfinite(r.gt.y))
            throw ValidationError("non-finite localization point");
        const double d = std::hypot(r.pred.x - r.gt.x, r.pred.y - r.gt.y);
        if (r.side == Side::left) {
            left_sum += d;
            ++stats.n_left;
        } else {
            right_sum += d;
            ++stats.n_right;
        }
    }
    if (stats.n_left == 0 || stats.n_right == 0)
        throw ValidationError("ed_error needs results for both sides");
    stats.left_ed = left_sum / stats.n_left;
    stats.right_ed = right_sum / stats.n_right;
    stats.avg_ed = (stats.left_ed + stats.right_ed) / 2.0;
    return stats;
}

std::string format_metric(double value) {
    // nearbyint under FE_TONEAREST implements round-half-to-even, which is
    // what reproduces the reference tables (e.g. 12.005 -> "12.00").
    const int prev = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double rounded = std::nearbyint(value * 100.0) / 100.0;
    std::fesetround(prev);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", rounded);
    return buf;
}

namespace {

constexpr const char* kPredHeader = "image_id,side,score,pred_x,pred_y";

std::string check_mark(bool b) { return b ? "yes" : "-"; }

}  // namespace

void save_predictions(const std::vector<PredictionRow>& rows, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << kPredHeader << "\n";
    char buf[256];
    for (const auto& r : rows) {
        if (r.pred) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f", r.image_id.c_str(),
                          data::side_name(r.side).c_str(), r.score, r.pred->x, r.pred->y);
        } else {
            std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,,", r.image_id.c_str(),
                          data::side_name(r.side).c_str(), r.score);
        }
        f << buf << "\n";
    }
}

std::vector<PredictionRow> load_predictions(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open predictions " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw ValidationError("empty predictions file " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kPredHeader)
        throw ValidationError("predictions header must be '" + std::string(kPredHeader) + "'");

    std::vector<PredictionRow> rows;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string ctx = path.string() + ":" + std::to_string(lineno);
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        while (fields.size() < 5) fields.emplace_back();
        if (fields.size() != 5) throw ValidationError("expected 5 columns in " + ctx);

        PredictionRow r;
        r.image_id = fields[0];
        r.side = data::parse_side(fields[1]);
        try {
            r.score = std::stod(fields[2]);
            if (!fields[3].empty() || !fields[4].empty())
                r.pred = Point2D{std::stod(fields[3]), std::stod(fields[4])};
        } catch (const std::exception&) {
            throw ValidationError("non-numeric field in " + ctx);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<ScoredSample> join_classification(const std::vector<PredictionRow>& rows,
                                              const data::DatasetManifest& gt) {
    std::map<std::string, const data::AnnotationRecord*> by_id;
    for (const auto& r : gt.records) by_id[r.image_id] = &r;
    std::vector<ScoredSample> out;
    for (const auto& r : rows) {
        auto it = by_id.find(r.image_id);
        if (it == by_id.end())
            throw ValidationError("prediction for unknown image_id '" + r.image_id + "'");
        out.push_back({r.image_id, r.side, r.score, it->second->label});
    }
    return out;
}

std::vector<LocalizationResult> join_localization(const std::vector<PredictionRow>& rows,
                                                  const data::DatasetManifest& gt) {
    std::map<std::string, const data::AnnotationRecord*> by_id;
    for (const auto& r : gt.records) by_id[r.image_id] = &r;
    std::vector<LocalizationResult> out;
    for (const auto& r : rows) {
        auto it = by_id.find(r.image_id);
        if (it == by_id.end())
            throw ValidationError("prediction for unknown image_id '" + r.image_id + "'");
        if (!r.pred)
            throw ValidationError("localization row without coordinates for '" + r.image_id + "'");
        const auto& rec = *it->second;
        out.push_back(
            {r.image_id, r.side, *r.pred, r.side == Side::left ? rec.ss_left : rec.ss_right});
    }
    return out;
}

void plot_roc(const std::vector<ScoredSample>& samples, const std::filesystem::path& path) {
    const int size = 512, margin = 48;
    cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
    auto px = [&](double fpr, double tpr) {
        return cv::Point(margin + static_cast<int>(fpr * (size - 2 * margin)),
                         size - margin - static_cast<int>(tpr * (size - 2 * margin)));
    };
    cv::rectangle(canvas, px(0, 1), px(1, 0), cv::Scalar(0, 0, 0), 1);
    cv::line(canvas, px(0, 0), px(1, 1), cv::Scalar(200, 200, 200), 1);

    // Sweep thresholds from high to low; each distinct score is an operating point.
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return samples[a].score > samples[b].score; });
    double n_pos = 0, n_neg = 0;
    for (const auto& s : samples) (s.label == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0) throw ValidationError("roc plot requires both classes");

    std::vector<cv::Point> pts{px(0, 0)};
    double tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() &&
               samples[order[j + 1]].score == samples[order[i]].score)
            ++j;
        for (size_t k = i; k <= j; ++k)
            (samples[order[k]].label == 1 ? tp : fp) += 1;
        pts.push_back(px(fp / n_neg, tp / n_pos));
        i = j + 1;
    }
    for (size_t k = 1; k < pts.size(); ++k)
        cv::line(canvas, pts[k - 1], pts[k], cv::Scalar(180, 60, 20), 2);
    cv::putText(canvas, "ROC", cv::Point(margin, margin - 16), cv::FONT_HERSHEY_SIMPLEX, 0.6,
                cv::Scalar(0, 0, 0), 1);
    if (!cv::imwrite(path.string(), canvas))
        throw std::runtime_error("cannot write " + path.string());
}

void plot_ed_hist(const std::vector<LocalizationResult>& results,
                  const std::filesystem::path& path) {
    if (results.empty()) throw ValidationError("ed histogram on empty input");
    std::vector<double> eds;
    eds.reserve(results.size());
    for (const auto& r : results) eds.push_back(std::hypot(r.pred.x - r.gt.x, r.pred.y - r.gt.y));
    const double max_ed = std::max(1e-9, *std::max_element(eds.begin(), eds.end()));

    const int bins = 20, size = 512, margin = 48;
    std::vector<int> counts(bins, 0);
    for (double d : eds) {
        int b = static_cast<int>(d / max_ed * bins);
        counts[std::min(b, bins - 1)]++;
    }
    const int peak = *std::max_element(counts.begin(), counts.end());

    cv::Mat canvas(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
    const int w = (size - 2 * margin) / bins;
    for (int b = 0; b < bins; ++b) {
        const int h = static_cast<int>(
            static_cast<double>(counts[b]) / peak * (size - 2 * margin));
        cv::rectangle(canvas, cv::Point(margin + b * w, size - margin - h),
                      cv::Point(margin + (b + 1) * w - 2, size - margin),
                      cv::Scalar(90, 140, 40), cv::FILLED);
    }
    cv::rectangle(canvas, cv::Point(margin, margin), cv::Point(size - margin, size - margin),
                  cv::Scalar(0, 0, 0), 1);
    char label[64];
    std::snprintf(label, sizeof(label), "ED histogram (max %.2f px)", max_ed);
    cv::putText(canvas, label, cv::Point(margin, margin - 16), cv::FONT_HERSHEY_SIMPLEX, 0.6,
                cv::Scalar(0, 0, 0), 1);
    if (!cv::imwrite(path.string(), canvas))
        throw std::runtime_error("cannot write " + path.string());
}

void write_report(const ReportInputs& in, const std::filesystem::path& out_dir) {
    if (!in.classification && !in.localization && in.ablation.empty())
        throw ValidationError("report needs at least one completed evaluation");
    std::filesystem::create_directories(out_dir);

    std::ofstream md(out_dir / "report.md");
    std::ofstream csv(out_dir / "report.csv");
    if (!md || !csv) throw std::runtime_error("cannot write report files");
    md << "# Evaluation report\n\nValues are rounded half-to-even at two decimals.\n";

    if (in.classification) {
        const auto& s = *in.classification;
        // The image-level score is the max over its two half scores; labels
        // are shared, so any half's label stands in for the image's.
        std::map<std::string, ScoredSample> by_image;
        for (const auto& h : s) {
            auto [it, fresh] = by_image.try_emplace(h.image_id, h);
            if (!fresh) it->second.score = std::max(it->second.score, h.score);
        }
        std::vector<ScoredSample> image_samples;
        for (const auto& [id, smp] : by_image) image_samples.push_back(smp);

        md << "\n## Classification\n\n| Scope | AUC | SEN | SPE | ACC |\n|---|---|---|---|---|\n";
        csv << "classification,scope,AUC,SEN,SPE,ACC\n";
        const std::pair<const char*, const std::vector<ScoredSample>*> scopes[] = {
            {"half", &s}, {"image", &image_samples}};
        for (const auto& [name, samples] : scopes) {
            ClsTable t{roc_auc(*samples), threshold_metrics(*samples, in.threshold)};
            md << "| " << name << " | " << format_metric(t.auc) << " | "
               << format_metric(t.at_threshold.sen) << " | " << format_metric(t.at_threshold.spe)
               << " | " << format_metric(t.at_threshold.acc) << " |\n";
            csv << "," << name << "," << format_metric(t.auc) << ","
                << format_metric(t.at_threshold.sen) << "," << format_metric(t.at_threshold.spe)
                << "," << format_metric(t.at_threshold.acc) << "\n";
        }
        plot_roc(s, out_dir / "roc.png");
    }

    if (in.localization) {
        const auto e = ed_error(*in.localization);
        md << "\n## Localization\n\n| Left ED (px) | Right ED (px) | Avg ED (px) |\n"
           << "|---|---|---|\n| " << format_metric(e.left_ed) << " | "
           << format_metric(e.right_ed) << " | " << format_metric(e.avg_ed) << " |\n";
        csv << "localization,left_ed,right_ed,avg_ed\n,";
        csv << format_metric(e.left_ed) << "," << format_metric(e.right_ed) << ","
            << format_metric(e.avg_ed) << "\n";
        plot_ed_hist(*in.localization, out_dir / "ed_hist.png");
    }

    if (!in.ablation.empty()) {
        md << "\n## Ablation\n\n| Encoder | PPM | KR loss | Left ED | Right ED | Avg ED |\n"
           << "|---|---|---|---|---|---|\n";
        csv << "ablation,encoder,ppm,kr,left_ed,right_ed,avg_ed\n";
        for (const auto& row : in.ablation) {
            md << "| " << row.encoder << " | " << check_mark(row.ppm) << " | "
               << check_mark(row.kr) << " | " << format_metric(row.metrics.left_ed) << " | "
               << format_metric(row.metrics.right_ed) << " | "
               << format_metric(row.metrics.avg_ed) << " |\n";
            csv << "," << row.encoder << "," << (row.ppm ? 1 : 0) << "," << (row.kr ? 1 : 0)
                << "," << format_metric(row.metrics.left_ed) << ","
                << format_metric(row.metrics.right_ed) << ","
                << format_metric(row.metrics.avg_ed) << "\n";
        }
    }
}

}  // namespace anglekit::eval
