#pragma once

// Frozen vision-language encoder pair. The visual tower is a pre-LN ViT whose
// blocks accept a CDFA side-channel parallel to the MLP; the text tower is a
// hashed bag-of-words encoder that turns the two class prompts into classifier
// rows. Weights are read-only after construction.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "medfor/cdfa_adapter.hpp"
#include "medfor/checkpoint.hpp"
#include "medfor/image.hpp"
#include "medfor/nn.hpp"
#include "medfor/tokens.hpp"

namespace medfor {

struct BackboneConfig {
    std::string variant = "tiny";
    int n_blocks = 6;
    int channel_dim = 32;
    int n_heads = 4;
    int mlp_ratio = 4;
    GridShape patch_grid{4, 4};
    int input_resolution = 32;
    // 0-based block indices that carry a visual adapter.
    std::vector<int> adapter_block_indices{1, 3, 5};
    // Temperature applied to training logits.
    double logit_scale = 100.0;
    int text_vocab_size = 512;
    NormalizationConstants normalization{};

    int patch_size() const { return patch_grid.height > 0 ? input_resolution / patch_grid.height : 0; }
    int sequence_length() const { return 1 + patch_grid.cells(); }
    // Throws ConfigError on any inconsistency.
    void validate() const;

    // 6 blocks, C = 32, 4x4 grid of 8x8 patches, 32x32 input, adapters at {1, 3, 5}.
    static BackboneConfig tiny();
    // ViT-L/14 at 224: 24 blocks, C = 1024, 16x16 grid, adapters at {7, 15, 23}.
    static BackboneConfig vit_l14();
    static BackboneConfig for_variant(std::string_view variant);
};

inline const std::array<std::string, 2> kDefaultPrompts{"A real medical image", "A fake medical image"};

// Row 0 scores "real", row 1 scores "fake"; rows are unit norm.
struct TextClassifier {
    Matrix weights;
    std::array<std::string, 2> prompts;
};

struct TextClassifierCache {
    std::array<Vector, 2> embedded;
    std::array<TextAdapterCache, 2> adapter;
    std::array<Vector, 2> adapted;
    bool adapted_path = false;
};

struct BlockCache {
    nn::LayerNormCache ln1;
    nn::AttentionCache attn;
    nn::LayerNormCache ln2;
    Matrix mlp_input;
    Matrix fc_pre;
    std::optional<CdfaCache> adapter;
};

// Everything backward() needs from one forward pass of one image.
struct EncodeCache {
    std::vector<BlockCache> blocks;
    nn::LayerNormCache ln_post;
    Vector projected;  // class-token projection before L2 normalization
    int first_adapter_block = -1;
};

std::map<std::string, Shape> expected_backbone_shapes(const BackboneConfig& config);

class Backbone {
public:
    // Validates every expected tensor; extra tensors are ignored.
    Backbone(BackboneConfig config, TensorMap weights);

    // Deterministic seeded weights for any config (values rounded to f32).
    static Backbone random_init(const BackboneConfig& config, std::uint64_t seed);
    static Backbone reference_tiny(std::uint64_t seed = 0) { return random_init(BackboneConfig::tiny(), seed); }

    const BackboneConfig& config() const noexcept { return config_; }
    const TensorMap& tensors() const noexcept { return *weights_; }
    std::uint64_t weights_fingerprint() const { return fingerprint(*weights_); }
    void save(const std::filesystem::path& path) const;

    // Throws ConfigError for adapters at blocks outside the configured set or with
    // the wrong channel count.
    void validate_adapters(const AdapterSet& adapters) const;

    // Unit-norm class-token feature. `block_trace`, when given, receives the
    // output tokens of every block.
    Vector encode_image(const ImageTensor& image, const AdapterSet* adapters = nullptr,
                        std::vector<TokenSequence>* block_trace = nullptr) const;
    Vector encode_image(const ImageTensor& image, const AdapterSet* adapters, EncodeCache& cache) const;
    // Accumulates d loss / d adapter params given d loss / d feature.
    void backward(const EncodeCache& cache, const AdapterSet& adapters, const Vector& d_feature,
                  AdapterSet& grads) const;

    // Frozen text embedding of one prompt (before the text adapter).
    Vector embed_prompt(std::string_view prompt) const;
    TextClassifier build_text_classifier(const std::array<std::string, 2>& prompts,
                                         const TextAdapterParams* text_adapter = nullptr,
                                         TextClassifierCache* cache = nullptr) const;

private:
    struct BlockWeights {
        const Tensor* ln1_w;
        const Tensor* ln1_b;
        const Tensor* in_proj_w;
        const Tensor* in_proj_b;
        const Tensor* out_proj_w;
        const Tensor* out_proj_b;
        const Tensor* ln2_w;
        const Tensor* ln2_b;
        const Tensor* fc_w;
        const Tensor* fc_b;
        const Tensor* proj_w;
        const Tensor* proj_b;
    };

    const Tensor& weight(const std::string& name) const;
    Matrix embed_patches(const ImageTensor& image) const;
    Vector forward(const ImageTensor& image, const AdapterSet* adapters, EncodeCache* cache,
                   std::vector<TokenSequence>* block_trace) const;

    BackboneConfig config_;
    std::shared_ptr<const TensorMap> weights_;
    std::vector<BlockWeights> blocks_;
};

// Backprop of d loss / d classifier rows through normalization and the text adapter.
void text_classifier_backward(const TextClassifierCache& cache, const TextAdapterParams& text_adapter,
                              const Matrix& d_weights, TextAdapterParams& grads);

// logit_scale * (W feature); throws on non-finite input.
Eigen::Vector2d logits(const Vector& feature, const TextClassifier& classifier, double logit_scale);

struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> ignored;
};

// Loads a backbone from the tensor container. Missing tensors raise FormatError
// naming the tensor; shape mismatches raise DimensionError naming both shapes.
Backbone load_pretrained(const std::filesystem::path& path, const BackboneConfig& config,
                         LoadReport* report = nullptr);

}  // namespace medfor
