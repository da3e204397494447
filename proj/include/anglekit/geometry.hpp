#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include <opencv2/core.hpp>

namespace anglekit::geometry {

struct Point2D {
    double x = 0.0;
    double y = 0.0;
};

// Axis-aligned similarity transform p' = (sx*x + tx, sy*y + ty).
// A horizontal mirror is encoded as a negative sx (mirror about width W
// is x' = (W-1) - x, i.e. sx = -1, tx = W-1), so composition and inversion
// stay exact scalar arithmetic in double precision.
struct SimilarityTransform2D {
    double sx = 1.0, sy = 1.0;
    double tx = 0.0, ty = 0.0;

    bool mirror_x() const { return sx < 0.0; }

    static SimilarityTransform2D identity() { return {}; }
    static SimilarityTransform2D scale(double sx, double sy) { return {sx, sy, 0.0, 0.0}; }
    static SimilarityTransform2D translate(double tx, double ty) { return {1.0, 1.0, tx, ty}; }
    // Mirror inside a frame of the given pixel width: x' = (width-1) - x.
    static SimilarityTransform2D mirror_about_width(int width) {
        return {-1.0, 1.0, static_cast<double>(width - 1), 0.0};
    }
};

Point2D apply_transform(const SimilarityTransform2D& t, const Point2D& p);
SimilarityTransform2D invert(const SimilarityTransform2D& t);
// compose(outer, inner): apply inner first, then outer.
SimilarityTransform2D compose(const SimilarityTransform2D& outer, const SimilarityTransform2D& inner);

// Single-channel response map; stride is the ratio of the network-input
// resolution to the heatmap resolution (input px = heatmap px * stride).
struct Heatmap {
    cv::Mat values;  // CV_32F, values in [0,1]
    int stride = 1;
};

struct GaussianSpec {
    double sigma = 4.0;  // in heatmap-frame pixels
};

// values(p) = exp(-(|p - center|^2) / (2 sigma^2)) on an Hh x Wh grid.
Heatmap encode_heatmap(const Point2D& center, int height, int width, const GaussianSpec& spec,
                       int stride = 1);

struct DecodeResult {
    Point2D point;      // sub-pixel location: 3x3 weighted centroid around the argmax
    Point2D peak_cell;  // raw argmax cell as (x, y)
    float peak = 0.f;   // maximum value
};

// Global argmax (ties broken by smallest (y,x) in row-major order) refined by
// an intensity-weighted centroid over the border-clamped 3x3 neighborhood.
// The 3x3 window minimum is subtracted from the weights first, which removes
// the flat background a wide Gaussian puts under the window; with raw values
// the centroid barely moves off the argmax cell and sub-pixel accuracy is
// lost at large sigma. Falls back to the argmax cell when the weights vanish.
// An all-zero heatmap has no response and returns nullopt.
std::optional<DecodeResult> decode_heatmap(const Heatmap& hm);

// Coordinate mapping between a heatmap and its network-input frame.
Point2D heatmap_to_input(const Point2D& p, int stride);
Point2D input_to_heatmap(const Point2D& p, int stride);

// Extract a w x h window nominally centered at `center`, translated just
// enough to lie fully inside the image. Returns the crop and the transform
// mapping crop-frame points to source-frame points.
std::pair<cv::Mat, SimilarityTransform2D> crop_window(const cv::Mat& image, const Point2D& center,
                                                      int width, int height);

// 16-bit PNG serialization with the stride in a `<path>.meta` sidecar.
void save_heatmap(const Heatmap& hm, const std::filesystem::path& path);
Heatmap load_heatmap(const std::filesystem::path& path);

}  // namespace anglekit::geometry
