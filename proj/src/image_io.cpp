#include "anglekit/image_io.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "anglekit/common.hpp"

namespace anglekit::io {

cv::Mat load_image_gray(const std::filesystem::path& path) {
    cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw std::runtime_error("failed to read image " + path.string());
    if (raw.channels() != 1) {
        cv::Mat gray;
        cv::extractChannel(raw, gray, 0);
        raw = gray;
    }
    cv::Mat out;
    switch (raw.depth()) {
        case CV_8U: raw.convertTo(out, CV_32F, 1.0 / 255.0); break;
        case CV_16U: raw.convertTo(out, CV_32F, 1.0 / 65535.0); break;
        case CV_32F: out = raw.clone(); break;
        default: throw ValidationError("unsupported image depth in " + path.string());
    }
    return out;
}

static void save_with_depth(const cv::Mat& image, const std::filesystem::path& path, int depth,
                            double scale) {
    CV_Assert(image.type() == CV_32F);
    cv::Mat clamped;
    cv::min(cv::max(image, 0.0), 1.0, clamped);
    cv::Mat quantized;
    clamped.convertTo(quantized, depth, scale);
    if (!cv::imwrite(path.string(), quantized))
        throw std::runtime_error("failed to write image " + path.string());
}

void save_image_gray8(const cv::Mat& image, const std::filesystem::path& path) {
    save_with_depth(image, path, CV_8U, 255.0);
}

void save_image_gray16(const cv::Mat& image, const std::filesystem::path& path) {
    save_with_depth(image, path, CV_16U, 65535.0);
}

std::pair<int, int> png_dimensions(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("failed to open " + path.string());
    std::array<unsigned char, 24> head{};
    f.read(reinterpret_cast<char*>(head.data()), head.size());
    if (f.gcount() != static_cast<std::streamsize>(head.size()))
        throw ValidationError("not a PNG file (truncated): " + path.string());
    static const unsigned char sig[8] = {137, 'P', 'N', 'G', '\r', '\n', 26, '\n'};
    if (std::memcmp(head.data(), sig, 8) != 0 || std::memcmp(head.data() + 12, "IHDR", 4) != 0)
        throw ValidationError("not a PNG file: " + path.string());
    auto be32 = [&](int off) {
        return (std::uint32_t(head[off]) << 24) | (std::uint32_t(head[off + 1]) << 16) |
               (std::uint32_t(head[off + 2]) << 8) | std::uint32_t(head[off + 3]);
    };
    const std::uint32_t w = be32(16), h = be32(20);
    if (w == 0 || h == 0) throw ValidationError("degenerate PNG dimensions: " + path.string());
    return {static_cast<int>(h), static_cast<int>(w)};
}

}  // namespace anglekit::io
