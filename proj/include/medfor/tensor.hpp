#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace medfor {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using ConstVectorMap = Eigen::Map<const Vector>;
using MatrixRef = Eigen::Ref<const Matrix>;
using VectorRef = Eigen::Ref<const Vector>;

using Shape = std::vector<std::int64_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor of doubles. Parameters and backbone weights live here;
// their values are always representable in single precision (see quantize_f32),
// which keeps the f32 checkpoint container lossless.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}

    std::size_t numel() const noexcept { return data.size(); }

    // View as a rows x cols matrix; rows * cols must equal numel().
    MatrixMap matrix(std::int64_t rows, std::int64_t cols);
    ConstMatrixMap matrix(std::int64_t rows, std::int64_t cols) const;
    // 2-D view using shape[0] x prod(shape[1:]).
    MatrixMap matrix();
    ConstMatrixMap matrix() const;

    ConstVectorMap vector() const { return ConstVectorMap(data.data(), static_cast<Eigen::Index>(data.size())); }
    Eigen::Map<Vector> vector() { return Eigen::Map<Vector>(data.data(), static_cast<Eigen::Index>(data.size())); }

    void fill(double v);
    bool operator==(const Tensor& other) const = default;
};

// Round every entry to the nearest float.
void quantize_f32(std::span<double> values);
inline void quantize_f32(Tensor& t) { quantize_f32(std::span<double>(t.data)); }

bool all_finite(std::span<const double> values);

}  // namespace medfor
