#include "anglekit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "anglekit/common.hpp"

namespace anglekit::geometry {

Point2D apply_transform(const SimilarityTransform2D& t, const Point2D& p) {
    return {t.sx * p.x + t.tx, t.sy * p.y + t.ty};
}

SimilarityTransform2D invert(const SimilarityTransform2D& t) {
    if (t.sx == 0.0 || t.sy == 0.0) throw ValidationError("transform has zero scale");
    return {1.0 / t.sx, 1.0 / t.sy, -t.tx / t.sx, -t.ty / t.sy};
}

SimilarityTransform2D compose(const SimilarityTransform2D& outer, const SimilarityTransform2D& inner) {
    return {outer.sx * inner.sx, outer.sy * inner.sy,
            outer.sx * inner.tx + outer.tx, outer.sy * inner.ty + outer.ty};
}

Heatmap encode_heatmap(const Point2D& center, int height, int width, const GaussianSpec& spec,
                       int stride) {
    if (height < 1 || width < 1) throw ValidationError("heatmap shape must be positive");
    if (spec.sigma <= 0.0) throw ValidationError("sigma must be positive");
    if (center.x < 0.0 || center.x >= width || center.y < 0.0 || center.y >= height)
        throw ValidationError("heatmap center outside bounds");

    Heatmap hm;
    hm.stride = stride;
    hm.values.create(height, width, CV_32F);
    const double inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for (int y = 0; y < height; ++y) {
        float* row = hm.values.ptr<float>(y);
        const double dy2 = (y - center.y) * (y - center.y);
        for (int x = 0; x < width; ++x) {
            const double dx = x - center.x;
            row[x] = static_cast<float>(std::exp(-(dx * dx + dy2) * inv));
        }
    }
    return hm;
}

std::optional<DecodeResult> decode_heatmap(const Heatmap& hm) {
    const cv::Mat& v = hm.values;
    if (v.empty()) throw ValidationError("empty heatmap");

    int by = 0, bx = 0;
    float best = -1.f;
    for (int y = 0; y < v.rows; ++y) {
        const float* row = v.ptr<float>(y);
        for (int x = 0; x < v.cols; ++x) {
            if (row[x] > best) {  // strict: first occurrence wins, smallest (y,x)
                best = row[x];
                by = y;
                bx = x;
            }
        }
    }
    if (best <= 0.f) return std::nullopt;  // no response

    const int y0 = std::max(0, by - 1), y1 = std::min(v.rows - 1, by + 1);
    const int x0 = std::max(0, bx - 1), x1 = std::min(v.cols - 1, bx + 1);
    float wmin = best;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) wmin = std::min(wmin, v.at<float>(y, x));

    double wsum = 0.0, xs = 0.0, ys = 0.0;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double w = static_cast<double>(v.at<float>(y, x)) - wmin;
            wsum += w;
            xs += w * x;
            ys += w * y;
        }
    }

    DecodeResult r;
    r.peak_cell = {static_cast<double>(bx), static_cast<double>(by)};
    r.peak = best;
    r.point = (wsum > 1e-12) ? Point2D{xs / wsum, ys / wsum} : r.peak_cell;
    return r;
}

Point2D heatmap_to_input(const Point2D& p, int stride) {
    return {p.x * stride, p.y * stride};
}

Point2D input_to_heatmap(const Point2D& p, int stride) {
    return {p.x / stride, p.y / stride};
}

std::pair<cv::Mat, SimilarityTransform2D> crop_window(const cv::Mat& image, const Point2D& center,
                                                      int width, int height) {
    if (width > image.cols || height > image.rows)
        throw ValidationError("crop window larger than image");
    auto clampi = [](long v, long lo, long hi) { return std::max(lo, std::min(hi, v)); };
    const int ox = static_cast<int>(clampi(std::llround(center.x - width / 2.0), 0, image.cols - width));
    const int oy = static_cast<int>(clampi(std::llround(center.y - height / 2.0), 0, image.rows - height));
    cv::Mat crop = image(cv::Rect(ox, oy, width, height)).clone();
    return {crop, SimilarityTransform2D::translate(ox, oy)};
}

void save_heatmap(const Heatmap& hm, const std::filesystem::path& path) {
    cv::Mat u16;
    hm.values.convertTo(u16, CV_16U, 65535.0);
    if (!cv::imwrite(path.string(), u16)) throw std::runtime_error("failed to write " + path.string());
    std::ofstream meta(path.string() + ".meta");
    if (!meta) throw std::runtime_error("failed to write " + path.string() + ".meta");
    meta << "stride=" << hm.stride << "\n";
}

Heatmap load_heatmap(const std::filesystem::path& path) {
    cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw std::runtime_error("failed to read " + path.string());
    if (raw.type() != CV_16U) throw ValidationError("heatmap PNG must be 16-bit grayscale");
    Heatmap hm;
    raw.convertTo(hm.values, CV_32F, 1.0 / 65535.0);
    std::ifstream meta(path.string() + ".meta");
    std::string line;
    if (!meta || !std::getline(meta, line) || line.rfind("stride=", 0) != 0)
        throw ValidationError("missing or malformed heatmap sidecar for " + path.string());
    hm.stride = std::stoi(line.substr(7));
    return hm;
}

}  // namespace anglekit::geometry
