#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "medfor/image.hpp"

namespace medfor {

// Forgery-trace analogs injected into the "fake" half of the toy corpus.
enum class ArtifactFamily {
    checker,  // pixel checkerboard plus faint white noise
    stripe,   // two-row horizontal banding plus faint white noise
};

std::string_view to_string(ArtifactFamily family);
ArtifactFamily parse_artifact_family(std::string_view text);

struct ToyCorpusOptions {
    int image_size = 32;
    ArtifactFamily family = ArtifactFamily::checker;
    // File-name prefix, lets several corpora share one directory.
    std::string prefix = "toy";
    // Artifact amplitude is drawn uniformly from this range (intensity units, 0..1).
    double amplitude_min = 0.10;
    double amplitude_max = 0.15;
};

// Real images are smooth band-limited textures; fake images are independent
// textures of the same kind plus a low-amplitude high-frequency artifact. Writes 2 * n_per_class PNGs under
// out_dir/images and out_dir/<prefix>.jsonl (no split assigned). Deterministic for
// a fixed seed. Returns the manifest path.
std::filesystem::path generate_toy_corpus(int n_per_class, std::uint64_t seed, const std::filesystem::path& out_dir,
                                          const ToyCorpusOptions& options = {});

// In-memory versions of the two image kinds, used by the generator.
ImageTensor toy_texture(int size, std::uint64_t seed);
ImageTensor add_toy_artifact(const ImageTensor& texture, ArtifactFamily family, std::uint64_t seed,
                             double amplitude_min = 0.10, double amplitude_max = 0.15);

// Mean squared 4-neighbour Laplacian over interior pixels of the channel mean.
double laplacian_energy(const ImageTensor& image);

}  // namespace medfor
