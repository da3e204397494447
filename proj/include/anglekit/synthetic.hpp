#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "anglekit/data.hpp"

namespace anglekit::synth {

using data::DatasetManifest;
using data::Side;
using geometry::Point2D;

// Synthetic stand-in for annotated wide-angle scans: per side, two bright
// curved bands meet at a wedge apex on a noisy dark background. The apex is
// the landmark; the label is closed iff the aperture angle between the bands
// is drawn from the closed range.
struct SynthConfig {
    int count = 500;
    int height = 128;
    int width = 128;
    double aperture_open_lo = 35.0;  // degrees
    double aperture_open_hi = 60.0;
    double aperture_closed_lo = 8.0;
    double aperture_closed_hi = 20.0;
    double noise_sigma = 0.03;
    double closed_prior = 0.5;
    int margin = 14;  // apex distance from the image border and the half boundary
    std::uint64_t seed = 0;
};

struct SynthSideSpec {
    Point2D apex;
    double aperture_deg = 0.0;
    double tilt_deg = 0.0;  // rotation of the wedge axis
    double curve = 0.0;     // quadratic band curvature (px per px^2)
    double band_len = 0.0;
};

struct SynthPlanItem {
    int index = 0;
    std::string image_id;
    int label = 0;
    SynthSideSpec left;
    SynthSideSpec right;
};

void validate(const SynthConfig& cfg);

// Sampling is factored out of rendering so label/apex statistics can be
// checked over large counts without touching pixels. Each item draws from an
// independent stream derived from (seed, index).
std::vector<SynthPlanItem> synth_plan(const SynthConfig& cfg);

cv::Mat synth_render(const SynthPlanItem& item, const SynthConfig& cfg);

// Renders every planned image into <out_dir>/images/, writes
// <out_dir>/manifest.csv and a <out_dir>/synth_config.txt echo of the
// generating configuration. Byte-identical for a fixed config.
DatasetManifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Ground-truth-aware intensity probe: mean intensity inside a small disk a
// fixed distance from the apex toward the image center. Narrow (closed)
// wedges keep both bands inside the disk, wide (open) ones do not, so the
// score separates the classes; used to verify the learning task is solvable.
double wedge_oracle_score(const cv::Mat& image, const Point2D& apex, Side side);

}  // namespace anglekit::synth
