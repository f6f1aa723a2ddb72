#pragma once

// Forward/backward kernels for the frozen transformer. Only input gradients are
// produced: backbone weights never receive updates.

#include <vector>

#include "medfor/tensor.hpp"

namespace medfor::nn {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Matrix normalized;
    Vector inv_std;
};

// Row-wise layer norm with affine gamma/beta (length = cols).
Matrix layer_norm(const Matrix& x, VectorRef gamma, VectorRef beta, LayerNormCache* cache = nullptr);
Matrix layer_norm_backward(const LayerNormCache& cache, VectorRef gamma, const Matrix& d_out);

// x * sigmoid(1.702 x), the CLIP activation.
Matrix quick_gelu(const Matrix& x);
Matrix quick_gelu_backward(const Matrix& x, const Matrix& d_out);

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& x, const Matrix& d_out);

void softmax_rows_inplace(Matrix& x);

struct AttentionCache {
    Matrix input;
    Matrix qkv;
    std::vector<Matrix> probs;  // one T x T matrix per head
    Matrix merged;              // heads concatenated, before out projection
};

// Multi-head self attention. in_proj: [3C, C], in_bias: [3C], out_proj: [C, C], out_bias: [C].
Matrix self_attention(const Matrix& x, int n_heads, MatrixRef in_proj, VectorRef in_bias,
                      MatrixRef out_proj, VectorRef out_bias, AttentionCache* cache = nullptr);
Matrix self_attention_backward(const AttentionCache& cache, int n_heads, MatrixRef in_proj,
                               MatrixRef out_proj, const Matrix& d_out);

// L2 normalization of a vector and its backward pass.
Vector l2_normalize(const Vector& v);
Vector l2_normalize_backward(const Vector& v, const Vector& d_out);

}  // namespace medfor::nn
