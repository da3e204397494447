#include "anglekit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "anglekit/common.hpp"
#include "anglekit/image_io.hpp"

namespace anglekit::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBandSigma = 1.1;       // Gaussian blob radius of a band
constexpr double kBandIntensity = 0.9;
constexpr double kBackground = 0.04;
constexpr double kMaxTiltDeg = 4.0;

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

SynthSideSpec plan_side(std::mt19937_64& rng, const SynthConfig& cfg, Side side, int label) {
    SynthSideSpec s;
    const double lo = label ? cfg.aperture_closed_lo : cfg.aperture_open_lo;
    const double hi = label ? cfg.aperture_closed_hi : cfg.aperture_open_hi;
    s.aperture_deg = uniform(rng, lo, hi);
    s.tilt_deg = uniform(rng, -kMaxTiltDeg, kMaxTiltDeg);
    s.curve = uniform(rng, -0.003, 0.003);

    const double half_w = cfg.width / 2.0;
    const double apex_lo = (side == Side::left) ? cfg.margin : half_w + cfg.margin;
    const double apex_hi = (side == Side::left) ? half_w - cfg.margin : cfg.width - cfg.margin;
    s.apex = {uniform(rng, apex_lo, apex_hi), uniform(rng, cfg.margin, cfg.height - cfg.margin)};

    // Keep the bands inside their own half so the halves stay independent.
    const double run = (side == Side::left) ? half_w - s.apex.x : s.apex.x - half_w;
    s.band_len = run * uniform(rng, 0.75, 0.95);
    return s;
}

void splat(cv::Mat& img, double cx, double cy, double amplitude) {
    const int r = static_cast<int>(std::ceil(3 * kBandSigma));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - r);
    const int x1 = std::min(img.cols - 1, static_cast<int>(std::ceil(cx)) + r);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - r);
    const int y1 = std::min(img.rows - 1, static_cast<int>(std::ceil(cy)) + r);
    const double inv = 1.0 / (2.0 * kBandSigma * kBandSigma);
    for (int y = y0; y <= y1; ++y) {
        float* row = img.ptr<float>(y);
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const auto v = static_cast<float>(amplitude * std::exp(-d2 * inv));
            row[x] = std::max(row[x], v);
        }
    }
}

void draw_band(cv::Mat& img, const SynthSideSpec& s, double ray_angle_deg) {
    const double theta = ray_angle_deg * kPi / 180.0;
    const double dx = std::cos(theta), dy = std::sin(theta);
    // Curvature bends the band perpendicular to its direction.
    const double nx = -dy, ny = dx;
    for (double t = 0.0; t <= s.band_len; t += 0.4) {
        const double off = s.curve * t * t;
        splat(img, s.apex.x + dx * t + nx * off, s.apex.y + dy * t + ny * off, kBandIntensity);
    }
}

void draw_side(cv::Mat& img, const SynthSideSpec& s, Side side) {
    // The wedge opens toward the image center: axis +x on the left side,
    // -x (180 degrees) on the right.
    const double axis = (side == Side::left ? 0.0 : 180.0) + s.tilt_deg;
    const double sign = (side == Side::left) ? 1.0 : -1.0;
    draw_band(img, s, axis - sign * s.aperture_deg / 2.0);
    draw_band(img, s, axis + sign * s.aperture_deg / 2.0);
}

}  // namespace

void validate(const SynthConfig& cfg) {
    if (cfg.count < 1) throw ValidationError("synth count must be >= 1");
    if (cfg.height < 2 || cfg.width < 2) throw ValidationError("synth size must be at least 2x2");
    if (cfg.width % 2 != 0) throw ValidationError("synth width must be even");
    if (!(cfg.aperture_open_lo < cfg.aperture_open_hi) ||
        !(cfg.aperture_closed_lo < cfg.aperture_closed_hi))
        throw ValidationError("aperture ranges must be nonempty");
    const bool disjoint = cfg.aperture_closed_hi < cfg.aperture_open_lo ||
                          cfg.aperture_open_hi < cfg.aperture_closed_lo;
    if (!disjoint) throw ValidationError("open and closed aperture ranges must be disjoint");
    if (!(cfg.closed_prior >= 0.0 && cfg.closed_prior <= 1.0))
        throw ValidationError("closed_prior must be in [0,1]");
    if (cfg.noise_sigma < 0.0) throw ValidationError("noise_sigma must be nonnegative");
    if (cfg.margin < 1 || cfg.margin >= cfg.width / 2 - cfg.margin ||
        2 * cfg.margin >= cfg.height)
        throw ValidationError("impossible geometry: margin too large for the image size");
}

std::vector<SynthPlanItem> synth_plan(const SynthConfig& cfg) {
    validate(cfg);
    std::vector<SynthPlanItem> plan;
    plan.reserve(cfg.count);
    char idbuf[32];
    for (int i = 0; i < cfg.count; ++i) {
        std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i), 1));
        SynthPlanItem item;
        item.index = i;
        std::snprintf(idbuf, sizeof(idbuf), "synth_%06d", i);
        item.image_id = idbuf;
        item.label = uniform(rng, 0.0, 1.0) < cfg.closed_prior ? 1 : 0;
        item.left = plan_side(rng, cfg, Side::left, item.label);
        item.right = plan_side(rng, cfg, Side::right, item.label);
        plan.push_back(std::move(item));
    }
    return plan;
}

cv::Mat synth_render(const SynthPlanItem& item, const SynthConfig& cfg) {
    cv::Mat img(cfg.height, cfg.width, CV_32F, cv::Scalar(kBackground));
    if (cfg.noise_sigma > 0.0) {
        std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(item.index), 2));
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (int y = 0; y < img.rows; ++y) {
            float* row = img.ptr<float>(y);
            for (int x = 0; x < img.cols; ++x) row[x] += static_cast<float>(noise(rng));
        }
    }
    draw_side(img, item.left, Side::left);
    draw_side(img, item.right, Side::right);
    cv::min(cv::max(img, 0.0), 1.0, img);
    return img;
}

DatasetManifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    auto plan = synth_plan(cfg);
    std::filesystem::create_directories(out_dir / "images");

    DatasetManifest m;
    m.image_root = out_dir / "images";
    for (const auto& item : plan) {
        cv::Mat img = synth_render(item, cfg);
        io::save_image_gray8(img, m.image_root / (item.image_id + ".png"));
        m.records.push_back({item.image_id, item.label, item.left.apex, item.right.apex});
    }
    save_manifest(m, out_dir / "manifest.csv");

    std::ofstream prov(out_dir / "synth_config.txt");
    prov << "synth.count=" << cfg.count << "\n"
         << "synth.height=" << cfg.height << "\n"
         << "synth.width=" << cfg.width << "\n"
         << "synth.open_lo=" << cfg.aperture_open_lo << "\n"
         << "synth.open_hi=" << cfg.aperture_open_hi << "\n"
         << "synth.closed_lo=" << cfg.aperture_closed_lo << "\n"
         << "synth.closed_hi=" << cfg.aperture_closed_hi << "\n"
         << "synth.noise_sigma=" << cfg.noise_sigma << "\n"
         << "synth.closed_prior=" << cfg.closed_prior << "\n"
         << "synth.margin=" << cfg.margin << "\n"
         << "seed=" << cfg.seed << "\n";
    return m;
}

double wedge_oracle_score(const cv::Mat& image, const Point2D& apex, Side side) {
    const double d = 20.0, radius = 5.0;
    const double cx = apex.x + (side == Side::left ? d : -d), cy = apex.y;
    double sum = 0.0;
    int n = 0;
    const int x0 = std::max(0, static_cast<int>(cx - radius)),
              x1 = std::min(image.cols - 1, static_cast<int>(cx + radius));
    const int y0 = std::max(0, static_cast<int>(cy - radius)),
              y1 = std::min(image.rows - 1, static_cast<int>(cy + radius));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) {
                sum += image.at<float>(y, x);
                ++n;
            }
        }
    }
    return n > 0 ? sum / n : 0.0;
}

}  // namespace anglekit::synth
