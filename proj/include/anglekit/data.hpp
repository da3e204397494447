#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "anglekit/geometry.hpp"

namespace anglekit::data {

using geometry::Point2D;
using geometry::SimilarityTransform2D;

enum class Side { left, right };

std::string side_name(Side s);
Side parse_side(const std::string& s);

struct RawImage {
    std::string id;
    cv::Mat pixels;  // CV_32F in [0,1]
};

struct AnnotationRecord {
    std::string image_id;
    int label = 0;  // 0 = open, 1 = closure
    Point2D ss_left;
    Point2D ss_right;
};

struct DatasetManifest {
    std::vector<AnnotationRecord> records;
    std::filesystem::path image_root;

    std::filesystem::path image_path(const std::string& image_id) const;
};

struct HalfSample {
    std::string image_id;
    Side side = Side::left;
    cv::Mat pixels;
    int label = 0;
    Point2D ss;                    // in half-frame pixels
    SimilarityTransform2D to_raw;  // half-frame -> raw-frame
};

// Annotation CSV: header `image_id,label,left_x,left_y,right_x,right_y`,
// label in {0,1}, coordinates in raw-frame pixels (origin top-left,
// sub-pixel floats permitted). Images resolve to <image_root>/<id>.png
// (falling back to <image_root>/images/<id>.png). Rejects duplicate ids,
// malformed rows, unresolvable images, and out-of-bounds coordinates
// (bounds come from the PNG header, so nothing is decoded here).
DatasetManifest load_manifest(const std::filesystem::path& csv_path,
                              std::filesystem::path image_root = {});
void save_manifest(const DatasetManifest& m, const std::filesystem::path& csv_path);

RawImage load_raw_image(const DatasetManifest& m, const AnnotationRecord& rec);

// Splits into the left half (columns [0, W/2)) and the right half
// (columns [W/2, W), horizontally mirrored when mirror_right is set so both
// halves share one orientation). Odd widths are trimmed by one rightmost
// column first. Each half carries its transformed landmark and the exact
// inverse transform back to raw coordinates.
std::pair<HalfSample, HalfSample> split_half(const RawImage& img, const AnnotationRecord& rec,
                                             bool mirror_right = true);

enum class ResizeTask { classification, localization_stage1 };

// Bilinear resize to the task's square input size. Returns the resized image
// and the transform mapping resized-frame points back to half-frame points.
std::pair<cv::Mat, SimilarityTransform2D> resize_for_task(const HalfSample& h, ResizeTask task,
                                                          int size);

// Deterministic train/test split by image_id: both halves of an image always
// land in the same fold; folds are disjoint and exhaustive.
std::pair<DatasetManifest, DatasetManifest> make_split(const DatasetManifest& m, double ratio,
                                                       std::uint64_t seed);

}  // namespace anglekit::data
