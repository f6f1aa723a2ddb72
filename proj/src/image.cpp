#include "medfor/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>

#include <jpeglib.h>
#include <png.h>

#include "medfor/errors.hpp"

namespace medfor {

namespace {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool is_png(std::span<const std::uint8_t> b) {
    static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

bool is_jpeg(std::span<const std::uint8_t> b) { return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF; }

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw FormatError(std::string("PNG decode failed: ") + image.message);
    }
    // Keep colour and bit depth, drop alpha. 16-bit files report the linear flag;
    // requesting it back avoids an sRGB round trip.
    image.format &= (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_LINEAR);
    const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
    const int channels = (image.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    const std::size_t count = static_cast<std::size_t>(image.width) * image.height * channels;

    ImageTensor out(static_cast<int>(image.height), static_cast<int>(image.width), channels);
    if (wide) {
        std::vector<std::uint16_t> buf(count);
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
            throw FormatError(std::string("PNG decode failed: ") + image.message);
        }
        std::transform(buf.begin(), buf.end(), out.pixels.begin(), [](std::uint16_t v) { return v / 65535.0; });
    } else {
        std::vector<std::uint8_t> buf(count);
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
            throw FormatError(std::string("PNG decode failed: ") + image.message);
        }
        std::transform(buf.begin(), buf.end(), out.pixels.begin(), [](std::uint8_t v) { return v / 255.0; });
    }
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

ImageTensor decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager jerr{};
    cinfo.err = jpeg_std_error(&jerr.base);
    jerr.base.error_exit = jpeg_error_exit;
    // Everything touched after setjmp lives in plain storage so longjmp is safe.
    std::vector<std::uint8_t> buf;
    int width = 0;
    int height = 0;
    int channels = 0;
    if (setjmp(jerr.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw FormatError(std::string("JPEG decode failed: ") + jerr.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.jpeg_color_space == JCS_GRAYSCALE ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    width = static_cast<int>(cinfo.output_width);
    height = static_cast<int>(cinfo.output_height);
    channels = cinfo.output_components;
    buf.resize(static_cast<std::size_t>(width) * height * channels);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * channels;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);

    ImageTensor out(height, width, channels);
    std::transform(buf.begin(), buf.end(), out.pixels.begin(), [](std::uint8_t v) { return v / 255.0; });
    return out;
}

ImageTensor to_rgb(const ImageTensor& image) {
    if (image.channels == 3) return image;
    if (image.channels != 1 && image.channels != 4) {
        throw DimensionError("unsupported channel count " + std::to_string(image.channels));
    }
    ImageTensor out(image.height, image.width, 3);
    out.source_height = image.source_height;
    out.source_width = image.source_width;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, image.channels == 1 ? 0 : c);
        }
    }
    return out;
}

}  // namespace

ImageTensor decode_image(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.empty()) throw FormatError("empty image file " + path.string());
    try {
        return decode_image(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
    if (is_png(bytes)) return decode_png(bytes);
    if (is_jpeg(bytes)) return decode_jpeg(bytes);
    throw FormatError("unrecognized image format (PNG and JPEG are supported)");
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
    if (image.empty()) throw DimensionError("cannot write an empty image");
    if (image.channels != 1 && image.channels != 3) {
        throw DimensionError("write_png supports 1 or 3 channels, got " + std::to_string(image.channels));
    }
    std::vector<std::uint8_t> buf(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), buf.begin(), [](double v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    });
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
        throw IoError("cannot write " + path.string() + ": " + png.message);
    }
}

ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w) {
    if (image.empty()) throw DimensionError("cannot resize a zero-size image");
    if (out_h <= 0 || out_w <= 0) throw DimensionError("resize target must be positive");
    ImageTensor out(out_h, out_w, image.channels);
    out.source_height = image.source_height;
    out.source_width = image.source_width;
    const double sy = static_cast<double>(image.height) / out_h;
    const double sx = static_cast<double>(image.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < image.channels; ++c) {
                const double top = (1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c);
                const double bottom = (1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c);
                out.at(y, x, c) = (1 - wy) * top + wy * bottom;
            }
        }
    }
    return out;
}

ImageTensor resize_and_crop(const ImageTensor& image, int target_resolution) {
    if (image.empty()) throw DimensionError("cannot preprocess a zero-size image");
    if (target_resolution <= 0) throw DimensionError("target resolution must be positive");
    const ImageTensor rgb = to_rgb(image);
    int new_h = target_resolution;
    int new_w = target_resolution;
    if (rgb.height < rgb.width) {
        new_w = std::max(target_resolution,
                         static_cast<int>(std::lround(static_cast<double>(rgb.width) * target_resolution / rgb.height)));
    } else if (rgb.width < rgb.height) {
        new_h = std::max(target_resolution,
                         static_cast<int>(std::lround(static_cast<double>(rgb.height) * target_resolution / rgb.width)));
    }
    const ImageTensor resized =
        (new_h == rgb.height && new_w == rgb.width) ? rgb : resize_bilinear(rgb, new_h, new_w);
    const int top = (new_h - target_resolution) / 2;
    const int left = (new_w - target_resolution) / 2;
    ImageTensor out(target_resolution, target_resolution, 3);
    out.source_height = image.source_height;
    out.source_width = image.source_width;
    for (int y = 0; y < target_resolution; ++y) {
        for (int x = 0; x < target_resolution; ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = resized.at(top + y, left + x, c);
        }
    }
    return out;
}

ImageTensor preprocess(const ImageTensor& image, int target_resolution, const NormalizationConstants& norm) {
    ImageTensor out = resize_and_crop(image, target_resolution);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const std::size_t c = i % 3;
        out.pixels[i] = (out.pixels[i] - norm.mean[c]) / norm.std[c];
    }
    return out;
}

}  // namespace medfor
