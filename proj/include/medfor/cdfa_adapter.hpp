#pragma once

// Cross-domain fine-trace adapter: a constrained-convolution noise stream and an
// inception spatial stream over the patch-token grid, fused by a learnable
// scale, plus the residual two-layer text adapter.

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "medfor/checkpoint.hpp"
#include "medfor/rng.hpp"
#include "medfor/tensor.hpp"
#include "medfor/tokens.hpp"

namespace medfor {

inline constexpr int kConstrainedKernelSize = 5;
inline constexpr double kBayarDegenerateSum = 1e-8;

// Which streams contribute (ablation switch).
enum class StreamMode { both, spatial_only, noise_only };
// Which stream the learnable scale multiplies. By default it gates the noise
// stream; `spatial` scales the multi-scale branch instead.
enum class LambdaTarget { noise, spatial };

std::string_view to_string(StreamMode mode);
StreamMode parse_stream_mode(std::string_view text);
std::string_view to_string(LambdaTarget target);
LambdaTarget parse_lambda_target(std::string_view text);

struct CdfaOptions {
    StreamMode streams = StreamMode::both;
    LambdaTarget lambda_target = LambdaTarget::noise;
    bool operator==(const CdfaOptions&) const = default;
};

// Weights of one visual adapter. Conv weights use the [out, in, kh, kw] layout.
struct CdfaParams {
    Tensor constrained_kernel;  // [C, 5, 5], depthwise, Bayar-constrained
    Tensor noise_pointwise;     // [C, C]
    Tensor branch1x1;           // [C, C, 1, 1]
    Tensor branch3x3;           // [C, C, 3, 3]
    Tensor branch5x5;           // [C, C, 5, 5]
    Tensor inception_fuse;      // [C, 3C]
    Tensor lambda;              // [1]

    int channels() const { return constrained_kernel.shape.empty() ? 0 : static_cast<int>(constrained_kernel.shape[0]); }
    double scale() const { return lambda.data.at(0); }

    static CdfaParams zeros(int channels);
    // Kaiming-uniform convs, zero output projections (inert adapter), lambda = 1,
    // constraint projected, values rounded to f32.
    static CdfaParams initialize(int channels, Rng& rng);

    // Visits (name, tensor, weight_decay_applies) in a fixed order.
    void for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const;
};

// Two linear layers with a ReLU between them and a residual connection:
// y = x + W2 relu(W1 x + b1) + b2.
struct TextAdapterParams {
    Tensor layer1_weight;  // [C, C]
    Tensor layer1_bias;    // [C]
    Tensor layer2_weight;  // [C, C]
    Tensor layer2_bias;    // [C]

    int channels() const { return layer1_weight.shape.empty() ? 0 : static_cast<int>(layer1_weight.shape[0]); }

    static TextAdapterParams zeros(int channels);
    // Kaiming-uniform first layer, zero second layer: identity at init.
    static TextAdapterParams initialize(int channels, Rng& rng);

    void for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const;
};

// Per channel: off-center weights divided by their sum, center set to -1. A
// channel whose off-center sum is below 1e-8 in magnitude is reset to 1/24 and
// counted in the return value.
int project_bayar_constraint_inplace(Tensor& kernel);
Tensor project_bayar_constraint(const Tensor& kernel);

// depthwise 5x5 constrained conv -> ReLU -> 1x1 conv; class token output is zero.
TokenSequence noise_stream(const TokenSequence& f, const CdfaParams& params);
// ReLU -> {1x1, 3x3, 5x5} convs -> concat -> 1x1 fuse; class token output is zero.
TokenSequence spatial_stream(const TokenSequence& f, const CdfaParams& params);

struct CdfaCache {
    GridShape grid;
    Matrix patches;           // HW x C adapter input (class token removed)
    Matrix constrained_out;   // pre-ReLU noise activations
    Matrix relu_input;        // ReLU(patches)
    Matrix concat;            // HW x 3C inception branch outputs
    Matrix noise_out;         // HW x C, before scaling
    Matrix spatial_out;       // HW x C, before scaling
};

TokenSequence cdfa_forward(const TokenSequence& f, const CdfaParams& params, const CdfaOptions& options = {},
                           CdfaCache* cache = nullptr);
// Accumulates parameter gradients into `grads` and returns the gradient with
// respect to the adapter input (token layout, class-token row zero).
Matrix cdfa_backward(const CdfaCache& cache, const CdfaParams& params, const CdfaOptions& options,
                     const Matrix& d_out, CdfaParams& grads);

struct TextAdapterCache {
    Vector input;
    Vector hidden_pre;
};

Vector text_adapter_forward(const Vector& embedding, const TextAdapterParams& params,
                            TextAdapterCache* cache = nullptr);
Vector text_adapter_backward(const TextAdapterCache& cache, const TextAdapterParams& params, const Vector& d_out,
                             TextAdapterParams& grads);

// All trainable adapter state: one CDFA per configured block plus the text adapter.
struct AdapterSet {
    std::map<int, CdfaParams> visual;
    TextAdapterParams text;
    CdfaOptions options;

    static AdapterSet initialize(const std::vector<int>& block_indices, int channels, std::uint64_t seed,
                                 const CdfaOptions& options = {});
    // Same structure, all values zero (gradient accumulator).
    AdapterSet zeros_like() const;

    void for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const;

    // Tensors under the reserved "adapter." prefix.
    TensorMap to_tensors() const;
    static AdapterSet from_tensors(const TensorMap& tensors, const CdfaOptions& options);
    // Every constrained kernel, projected. Returns channels that had to be reset.
    int project_constraints();
};

inline constexpr std::string_view kAdapterPrefix = "adapter.";

}  // namespace medfor
