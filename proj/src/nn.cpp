#include "medfor/nn.hpp"

#include <cmath>

#include "medfor/errors.hpp"

namespace medfor::nn {

Matrix layer_norm(const Matrix& x, VectorRef gamma, VectorRef beta, LayerNormCache* cache) {
    const Eigen::Index cols = x.cols();
    if (gamma.size() != cols || beta.size() != cols) throw DimensionError("layer_norm: affine size mismatch");
    Matrix normalized(x.rows(), cols);
    Vector inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).matrix();
        const double var = centered.squaredNorm() / static_cast<double>(cols);
        inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        normalized.row(r) = centered * inv_std(r);
    }
    Matrix out = (normalized.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

Matrix layer_norm_backward(const LayerNormCache& cache, VectorRef gamma, const Matrix& d_out) {
    const double n = static_cast<double>(d_out.cols());
    const Matrix g = d_out.array().rowwise() * gamma.transpose().array();
    Matrix dx(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        const double sum_g = g.row(r).sum();
        const double sum_gx = g.row(r).dot(cache.normalized.row(r));
        dx.row(r) = (cache.inv_std(r) / n) *
                    (n * g.row(r).array() - sum_g - cache.normalized.row(r).array() * sum_gx).matrix();
    }
    return dx;
}

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Matrix quick_gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return v * sigmoid(1.702 * v); });
}

Matrix quick_gelu_backward(const Matrix& x, const Matrix& d_out) {
    return d_out.binaryExpr(x, [](double g, double v) {
        const double s = sigmoid(1.702 * v);
        return g * (s + 1.702 * v * s * (1.0 - s));
    });
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& x, const Matrix& d_out) {
    return d_out.binaryExpr(x, [](double g, double v) { return v > 0.0 ? g : 0.0; });
}

void softmax_rows_inplace(Matrix& x) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        x.row(r) = (x.row(r).array() - m).exp();
        x.row(r) /= x.row(r).sum();
    }
}

Matrix self_attention(const Matrix& x, int n_heads, MatrixRef in_proj, VectorRef in_bias, MatrixRef out_proj,
                      VectorRef out_bias, AttentionCache* cache) {
    const Eigen::Index c = x.cols();
    if (c % n_heads != 0) throw DimensionError("channel dim not divisible by head count");
    const Eigen::Index d = c / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Matrix qkv = x * in_proj.transpose();
    qkv.rowwise() += in_bias.transpose();
    Matrix merged(x.rows(), c);
    std::vector<Matrix> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const auto q = qkv.middleCols(h * d, d);
        const auto k = qkv.middleCols(c + h * d, d);
        const auto v = qkv.middleCols(2 * c + h * d, d);
        Matrix p = (q * k.transpose()) * scale;
        softmax_rows_inplace(p);
        merged.middleCols(h * d, d) = p * v;
        if (cache) probs.push_back(std::move(p));
    }
    Matrix out = merged * out_proj.transpose();
    out.rowwise() += out_bias.transpose();
    if (cache) {
        cache->input = x;
        cache->qkv = std::move(qkv);
        cache->probs = std::move(probs);
        cache->merged = std::move(merged);
    }
    return out;
}

Matrix self_attention_backward(const AttentionCache& cache, int n_heads, MatrixRef in_proj, MatrixRef out_proj,
                               const Matrix& d_out) {
    const Eigen::Index c = cache.input.cols();
    const Eigen::Index d = c / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    const Matrix d_merged = d_out * out_proj;
    Matrix d_qkv(cache.qkv.rows(), cache.qkv.cols());
    for (int h = 0; h < n_heads; ++h) {
        const auto q = cache.qkv.middleCols(h * d, d);
        const auto k = cache.qkv.middleCols(c + h * d, d);
        const auto v = cache.qkv.middleCols(2 * c + h * d, d);
        const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
        const auto d_head = d_merged.middleCols(h * d, d);

        const Matrix d_p = d_head * v.transpose();
        d_qkv.middleCols(2 * c + h * d, d) = p.transpose() * d_head;
        const Vector row_dot = (d_p.array() * p.array()).rowwise().sum();
        const Matrix d_s = p.array() * (d_p.colwise() - row_dot).array();
        d_qkv.middleCols(h * d, d) = (d_s * k) * scale;
        d_qkv.middleCols(c + h * d, d) = (d_s.transpose() * q) * scale;
    }
    return d_qkv * in_proj;
}

Vector l2_normalize(const Vector& v) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw DimensionError("cannot L2-normalize a zero or non-finite vector");
    return v / n;
}

Vector l2_normalize_backward(const Vector& v, const Vector& d_out) {
    const double n = v.norm();
    const Vector u = v / n;
    return (d_out - u * u.dot(d_out)) / n;
}

}  // namespace medfor::nn
