#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace medfor {

// Interleaved H x W x channels image. Values are in [0, 1] after decode and
// model-normalized after preprocess().
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<double> pixels;
    // Size of the decoded file before any resizing.
    int source_height = 0;
    int source_width = 0;

    ImageTensor() = default;
    ImageTensor(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill),
          source_height(h), source_width(w) {}

    bool empty() const noexcept { return height <= 0 || width <= 0; }
    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// Decodes PNG or JPEG (sniffed from the leading bytes). 8/16-bit gray, gray+alpha,
// RGB and RGBA PNGs are accepted; alpha is dropped, gray stays single-channel.
ImageTensor decode_image(const std::filesystem::path& path);
ImageTensor decode_image(std::span<const std::uint8_t> bytes);

// Writes an 8-bit PNG (gray or RGB). Values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const ImageTensor& image);

struct NormalizationConstants {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.5, 0.5, 0.5};
};

// Published constants of the OpenAI CLIP image towers.
inline constexpr NormalizationConstants kClipNormalization{{0.48145466, 0.4578275, 0.40821073},
                                                           {0.26862954, 0.26130258, 0.27577711}};

// Bilinear (half-pixel centers) resize to exactly out_h x out_w.
ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w);

// Short side -> target (bilinear), center crop to target x target, gray/RGBA -> RGB,
// then per-channel (v - mean) / std.
ImageTensor preprocess(const ImageTensor& image, int target_resolution, const NormalizationConstants& norm = {});

// preprocess() without the normalization step.
ImageTensor resize_and_crop(const ImageTensor& image, int target_resolution);

}  // namespace medfor
