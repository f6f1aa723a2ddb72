#pragma once

// Small in-memory inputs shared by the test binaries.

#include <string>
#include <vector>

#include "medfor/backbone.hpp"
#include "medfor/image.hpp"
#include "medfor/rng.hpp"
#include "medfor/toy_corpus.hpp"
#include "medfor/trainer.hpp"

namespace fixture {

// Alternating real / fake toy images, preprocessed for `config`.
inline std::vector<medfor::Sample> toy_batch(const medfor::BackboneConfig& config, int n, std::uint64_t seed) {
    std::vector<medfor::Sample> out;
    for (int i = 0; i < n; ++i) {
        const bool fake = i % 2 == 1;
        medfor::ImageTensor img = medfor::toy_texture(config.input_resolution, medfor::derive_seed(seed, "tex", i));
        if (fake) img = medfor::add_toy_artifact(img, medfor::ArtifactFamily::checker, medfor::derive_seed(seed, "art", i));
        out.push_back({medfor::preprocess(img, config.input_resolution, config.normalization),
                       fake ? medfor::Label::fake : medfor::Label::real, "sample" + std::to_string(i)});
    }
    return out;
}

}  // namespace fixture
