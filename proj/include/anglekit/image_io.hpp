#pragma once

#include <filesystem>
#include <utility>

#include <opencv2/core.hpp>

namespace anglekit::io {

// Loads an 8-bit or 16-bit grayscale PNG as CV_32F normalized to [0,1].
cv::Mat load_image_gray(const std::filesystem::path& path);

// Writes [0,1] float pixels as 8-bit (or 16-bit) grayscale PNG.
void save_image_gray8(const cv::Mat& image, const std::filesystem::path& path);
void save_image_gray16(const cv::Mat& image, const std::filesystem::path& path);

// Reads (height, width) from the PNG IHDR chunk without decoding the image.
std::pair<int, int> png_dimensions(const std::filesystem::path& path);

}  // namespace anglekit::io
