#include "medfor/toy_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "medfor/errors.hpp"
#include "medfor/manifest.hpp"
#include "medfor/rng.hpp"

namespace medfor {

std::string_view to_string(ArtifactFamily family) {
    return family == ArtifactFamily::stripe ? "stripe" : "checker";
}

ArtifactFamily parse_artifact_family(std::string_view text) {
    if (text == "checker") return ArtifactFamily::checker;
    if (text == "stripe") return ArtifactFamily::stripe;
    throw ValidationError("unknown artifact family \"" + std::string(text) + "\"");
}

ImageTensor toy_texture(int size, std::uint64_t seed) {
    Rng rng(seed);
    constexpr int kWaves = 4;
    struct Wave {
        double fy, fx, phase, amp;
    };
    Wave waves[kWaves];
    for (auto& w : waves) {
        // At most 3 cycles per image: far below the pixel Nyquist rate.
        w.fy = rng.uniform(-3.0, 3.0);
        w.fx = rng.uniform(-3.0, 3.0);
        w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        w.amp = rng.uniform(0.04, 0.10);
    }
    const double base = rng.uniform(0.35, 0.65);
    const double tint[3] = {1.0, rng.uniform(0.92, 1.0), rng.uniform(0.85, 1.0)};

    ImageTensor img(size, size, 3);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double v = base;
            for (const auto& w : waves) {
                v += w.amp * std::cos(2.0 * std::numbers::pi * (w.fy * y + w.fx * x) / size + w.phase);
            }
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(v * tint[c], 0.0, 1.0);
        }
    }
    return img;
}

ImageTensor add_toy_artifact(const ImageTensor& texture, ArtifactFamily family, std::uint64_t seed,
                             double amplitude_min, double amplitude_max) {
    if (!(amplitude_min >= 0.0 && amplitude_min <= amplitude_max)) throw ValidationError("invalid artifact amplitude range");
    Rng rng(seed);
    const double amp = rng.uniform(amplitude_min, amplitude_max);
    const double noise = 0.008;
    ImageTensor out = texture;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const double pattern = family == ArtifactFamily::checker ? (((x + y) & 1) ? 1.0 : -1.0)
                                                                     : (((y >> 1) & 1) ? 1.0 : -1.0);
            const double delta = amp * pattern + noise * rng.normal();
            for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = std::clamp(out.at(y, x, c) + delta, 0.0, 1.0);
        }
    }
    return out;
}

double laplacian_energy(const ImageTensor& image) {
    if (image.height < 3 || image.width < 3) return 0.0;
    auto mean_at = [&](int y, int x) {
        double s = 0.0;
        for (int c = 0; c < image.channels; ++c) s += image.at(y, x, c);
        return s / image.channels;
    };
    double total = 0.0;
    for (int y = 1; y + 1 < image.height; ++y) {
        for (int x = 1; x + 1 < image.width; ++x) {
            const double lap =
                4.0 * mean_at(y, x) - mean_at(y - 1, x) - mean_at(y + 1, x) - mean_at(y, x - 1) - mean_at(y, x + 1);
            total += lap * lap;
        }
    }
    return total / ((image.height - 2) * (image.width - 2));
}

std::filesystem::path generate_toy_corpus(int n_per_class, std::uint64_t seed, const std::filesystem::path& out_dir,
                                          const ToyCorpusOptions& options) {
    if (n_per_class < 2) throw ValidationError("toy corpus needs n_per_class >= 2");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    const std::string generator = "toy-" + std::string(to_string(options.family));
    std::vector<DatasetRecord> records;
    records.reserve(2 * static_cast<std::size_t>(n_per_class));
    for (int i = 0; i < n_per_class; ++i) {
        const ImageTensor real = toy_texture(options.image_size, derive_seed(seed, "toy-texture", i));
        // Fakes get their own texture: a shared one would let content alone pair a
        // fake with its real twin across the split.
        const ImageTensor fake = add_toy_artifact(toy_texture(options.image_size, derive_seed(seed, "toy-fake-texture", i)),
                                                  options.family, derive_seed(seed, "toy-artifact", i), options.amplitude_min,
                                                  options.amplitude_max);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_real_%04d.png", options.prefix.c_str(), i);
        const std::string real_rel = std::string("images/") + name;
        std::snprintf(name, sizeof(name), "%s_fake_%04d.png", options.prefix.c_str(), i);
        const std::string fake_rel = std::string("images/") + name;
        write_png(out_dir / real_rel, real);
        write_png(out_dir / fake_rel, fake);
        records.push_back({real_rel, Label::real, Modality::other, generator, std::nullopt});
        records.push_back({fake_rel, Label::fake, Modality::other, generator, std::nullopt});
    }
    const auto manifest = out_dir / (options.prefix + ".jsonl");
    write_manifest(manifest, records);
    return manifest;
}

}  // namespace medfor
