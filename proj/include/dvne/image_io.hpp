#pragma once

#include "dvne/autodiff.hpp"

#include <filesystem>

namespace dvne {

// Scanline-ordered pixels: row y * width + x, one column per channel.
struct Image {
    int width = 0;
    int height = 0;
    ad::Tensor pixels;

    Image() = default;
    Image(int w, int h, int channels, double fill = 0.0)
        : width(w), height(h), pixels(ad::Tensor::Constant(static_cast<Eigen::Index>(w) * h, channels, fill)) {}

    int channels() const { return static_cast<int>(pixels.cols()); }
    Eigen::Index index(int x, int y) const { return static_cast<Eigen::Index>(y) * width + x; }
};

// 8-bit PNG (1 or 3 channels); values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// PFM, 32-bit little-endian floats, 1 ("Pf") or 3 ("PF") channels.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

}  // namespace dvne
