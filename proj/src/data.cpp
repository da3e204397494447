#include "anglekit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

#include <opencv2/imgproc.hpp>

#include "anglekit/common.hpp"
#include "anglekit/image_io.hpp"

namespace anglekit::data {

std::string side_name(Side s) { return s == Side::left ? "left" : "right"; }

Side parse_side(const std::string& s) {
    if (s == "left") return Side::left;
    if (s == "right") return Side::right;
    throw ValidationError("unknown side '" + s + "'");
}

std::filesystem::path DatasetManifest::image_path(const std::string& image_id) const {
    auto direct = image_root / (image_id + ".png");
    if (std::filesystem::exists(direct)) return direct;
    return image_root / "images" / (image_id + ".png");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_coord(const std::string& s, const std::string& context) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("non-numeric field '" + s + "' in " + context);
    }
}

constexpr const char* kManifestHeader = "image_id,label,left_x,left_y,right_x,right_y";

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& csv_path,
                              std::filesystem::path image_root) {
    std::ifstream f(csv_path);
    if (!f) throw std::runtime_error("cannot open manifest " + csv_path.string());

    DatasetManifest m;
    m.image_root = image_root.empty() ? csv_path.parent_path() : std::move(image_root);

    std::string line;
    if (!std::getline(f, line)) throw ValidationError("empty manifest " + csv_path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
        throw ValidationError("manifest header must be '" + std::string(kManifestHeader) + "'");

    std::unordered_set<std::string> seen;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string ctx = csv_path.string() + ":" + std::to_string(lineno);
        auto fields = split_csv_line(line);
        if (fields.size() != 6) throw ValidationError("expected 6 columns in " + ctx);

        AnnotationRecord rec;
        rec.image_id = fields[0];
        if (rec.image_id.empty()) throw ValidationError("empty image_id in " + ctx);
        if (!seen.insert(rec.image_id).second)
            throw ValidationError("duplicate image_id '" + rec.image_id + "' in " + ctx);
        if (fields[1] == "0")
            rec.label = 0;
        else if (fields[1] == "1")
            rec.label = 1;
        else
            throw ValidationError("label must be 0 or 1 in " + ctx);
        rec.ss_left = {parse_coord(fields[2], ctx), parse_coord(fields[3], ctx)};
        rec.ss_right = {parse_coord(fields[4], ctx), parse_coord(fields[5], ctx)};

        auto img = m.image_path(rec.image_id);
        if (!std::filesystem::exists(img))
            throw ValidationError("image not found for '" + rec.image_id + "': " + img.string());
        auto [h, w] = io::png_dimensions(img);
        for (const Point2D* p : {&rec.ss_left, &rec.ss_right}) {
            if (p->x < 0 || p->x >= w || p->y < 0 || p->y >= h)
                throw ValidationError("coordinate outside image bounds in " + ctx);
        }
        m.records.push_back(std::move(rec));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& csv_path) {
    std::ofstream f(csv_path);
    if (!f) throw std::runtime_error("cannot write manifest " + csv_path.string());
    f << kManifestHeader << "\n";
    char buf[256];
    for (const auto& r : m.records) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f,%.6f,%.6f", r.image_id.c_str(), r.label,
                      r.ss_left.x, r.ss_left.y, r.ss_right.x, r.ss_right.y);
        f << buf << "\n";
    }
}

RawImage load_raw_image(const DatasetManifest& m, const AnnotationRecord& rec) {
    return {rec.image_id, io::load_image_gray(m.image_path(rec.image_id))};
}

std::pair<HalfSample, HalfSample> split_half(const RawImage& img, const AnnotationRecord& rec,
                                             bool mirror_right) {
    if (img.id != rec.image_id)
        throw ValidationError("annotation " + rec.image_id + " does not match image " + img.id);
    if (img.pixels.rows < 2 || img.pixels.cols < 2) throw ValidationError("degenerate image");

    cv::Mat pixels = img.pixels;
    if (pixels.cols % 2 != 0) pixels = pixels(cv::Rect(0, 0, pixels.cols - 1, pixels.rows));
    const int w = pixels.cols, half_w = w / 2;

    if (!(rec.ss_left.x < half_w && half_w <= rec.ss_right.x))
        throw ValidationError("annotation sides inconsistent for " + rec.image_id +
                              ": need ss_left.x < W/2 <= ss_right.x");

    HalfSample left;
    left.image_id = rec.image_id;
    left.side = Side::left;
    left.pixels = pixels(cv::Rect(0, 0, half_w, pixels.rows)).clone();
    left.label = rec.label;
    left.ss = rec.ss_left;
    left.to_raw = SimilarityTransform2D::identity();

    HalfSample right;
    right.image_id = rec.image_id;
    right.side = Side::right;
    right.label = rec.label;
    cv::Mat rhalf = pixels(cv::Rect(half_w, 0, half_w, pixels.rows));
    const auto shift = SimilarityTransform2D::translate(half_w, 0);
    if (mirror_right) {
        cv::flip(rhalf, right.pixels, 1);
        const auto mirror = SimilarityTransform2D::mirror_about_width(half_w);
        // to_raw un-mirrors inside the half frame, then shifts back to raw.
        right.to_raw = geometry::compose(shift, mirror);
        right.ss = geometry::apply_transform(geometry::invert(right.to_raw), rec.ss_right);
    } else {
        right.pixels = rhalf.clone();
        right.to_raw = shift;
        right.ss = {rec.ss_right.x - half_w, rec.ss_right.y};
    }
    return {std::move(left), std::move(right)};
}

std::pair<cv::Mat, SimilarityTransform2D> resize_for_task(const HalfSample& h, ResizeTask task,
                                                          int size) {
    (void)task;  // both tasks resize to a square; the size differs by config
    if (h.pixels.empty() || h.pixels.cols < 1 || h.pixels.rows < 1)
        throw ValidationError("degenerate half image");
    if (size < 1) throw ValidationError("resize target must be positive");
    cv::Mat resized;
    cv::resize(h.pixels, resized, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
    const auto back = SimilarityTransform2D::scale(static_cast<double>(h.pixels.cols) / size,
                                                   static_cast<double>(h.pixels.rows) / size);
    return {resized, back};
}

std::pair<DatasetManifest, DatasetManifest> make_split(const DatasetManifest& m, double ratio,
                                                       std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("split ratio must be in (0,1)");
    if (m.records.size() < 2) throw ValidationError("need at least 2 records to split");

    std::vector<size_t> order(m.records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const auto n_train = static_cast<size_t>(std::llround(ratio * order.size()));
    if (n_train == 0 || n_train == order.size())
        throw ValidationError("split ratio produces an empty fold");

    std::unordered_set<size_t> train_idx(order.begin(), order.begin() + n_train);
    DatasetManifest train, test;
    train.image_root = test.image_root = m.image_root;
    for (size_t i = 0; i < m.records.size(); ++i)
        (train_idx.count(i) ? train : test).records.push_back(m.records[i]);
    return {std::move(train), std::move(test)};
}

}  // namespace anglekit::data
