#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

// Minimal self-contained PNG codec. The writer emits 8-bit gray/RGB files
// with filter 0 scanlines and stored (uncompressed) deflate blocks; the
// reader accepts exactly that subset plus the standard row filters, which
// covers every file this project writes.
void write_png(const std::string& path, int h, int w, int channels, const std::vector<std::uint8_t>& pixels);

struct PngImage {
    int h = 0;
    int w = 0;
    int channels = 0; // 1 or 3
    std::vector<std::uint8_t> pixels;
};
PngImage read_png(const std::string& path);

// image (h,w,3) with values in [0,1] <-> 8-bit RGB
void save_image_png(const Tensor& image, const std::string& path);
Tensor load_image_png(const std::string& path);

// binary mask (h,w) <-> 8-bit gray (0 / 255)
void save_mask_png(const Tensor& mask, const std::string& path);
Tensor load_mask_png(const std::string& path);

// score map (h,w) -> per-image min-max normalized heatmap with a fixed colormap
void save_heatmap_png(const Tensor& scores, const std::string& path);

} // namespace nexvitad
