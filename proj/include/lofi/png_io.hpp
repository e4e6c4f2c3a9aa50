#pragma once

#include <string>
#include <vector>

namespace lofi {

// 8-bit grayscale raster, row-major, values in [0,1].
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    double& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

// Quantizes to 8 bits on write; read returns values back in [0,1].
void write_gray_png(const std::string& path, const GrayImage& img);
GrayImage read_gray_png(const std::string& path);

}  // namespace lofi
