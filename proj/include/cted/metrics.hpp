#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cted/mask.hpp"
#include "cted/tensor.hpp"

namespace cted {

// Float image, values clamped to [0, 1], 1 or 3 channels.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> values;

    float at(int y, int x, int c = 0) const {
        return values[size_t((y * width + x) * channels + c)];
    }
    float& at(int y, int x, int c = 0) { return values[size_t((y * width + x) * channels + c)]; }
    static Image make(int h, int w, int c);
};

struct PixelMask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> bits;

    uint8_t at(int y, int x) const { return bits[size_t(y * width + x)]; }
    size_t count_set() const;
    PixelMask complement() const;
    static PixelMask full(int h, int w);
};

// Rank-3 (h, w, c) or rank-2 (h, w) tensor; values clamped into [0, 1].
Image image_from_tensor(const Tensor& t);
Tensor tensor_from_image(const Image& img);

// Nearest-neighbor upsampling of the patch-grid mask to pixels.
PixelMask pixel_mask_from_patches(const EditMask& mask, int grid_h, int grid_w, int patch);

// Mean local SSIM, uniform 7x7 window over fully interior positions,
// K1 = 0.01, K2 = 0.03, L = 1; 3-channel input is converted with Rec.601
// weights first. ssim(x, x) is exactly 1.
float ssim(const Image& a, const Image& b);

// Mean of the local SSIM map over windows centered on masked pixels; an
// empty intersection with the interior falls back to the unmasked mean.
float ssim_masked(const Image& a, const Image& b, const PixelMask& mask);

// MSE over masked pixels only; 10*log10(1/MSE), with MSE < 1e-12 reported
// as the 100.0 dB sentinel. Throws on an empty mask.
float psnr_masked(const Image& a, const Image& b, const PixelMask& mask);

// 5x5 Gaussian blur (sigma 1.4), Sobel, 4-direction non-maximum
// suppression, double threshold at 0.1/0.3 of the max magnitude, 8-way
// hysteresis. Returns a 1-channel binary image.
Image canny(const Image& img);

float canny_ssim(const Image& a, const Image& b);

// 8-bit binary PPM (P6); values map linearly to [0, 1].
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

// One report line: name, canny_ssim, bg_psnr, bg_ssim, tab separated.
std::string metric_report_line(const std::string& name, const Image& edited, const Image& source,
                               const PixelMask& background);

}  // namespace cted
