#include "medfor/tensor.hpp"

#include <cmath>
#include <sstream>

#include "medfor/errors.hpp"

namespace medfor {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_to_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

MatrixMap Tensor::matrix(std::int64_t rows, std::int64_t cols) {
    if (static_cast<std::size_t>(rows * cols) != numel()) {
        throw DimensionError("cannot view tensor " + shape_to_string(shape) + " as " + std::to_string(rows) +
                             "x" + std::to_string(cols));
    }
    return MatrixMap(data.data(), rows, cols);
}

ConstMatrixMap Tensor::matrix(std::int64_t rows, std::int64_t cols) const {
    if (static_cast<std::size_t>(rows * cols) != numel()) {
        throw DimensionError("cannot view tensor " + shape_to_string(shape) + " as " + std::to_string(rows) +
                             "x" + std::to_string(cols));
    }
    return ConstMatrixMap(data.data(), rows, cols);
}

MatrixMap Tensor::matrix() {
    const std::int64_t rows = shape.empty() ? 1 : shape[0];
    return matrix(rows, rows == 0 ? 0 : static_cast<std::int64_t>(numel()) / rows);
}

ConstMatrixMap Tensor::matrix() const {
    const std::int64_t rows = shape.empty() ? 1 : shape[0];
    return matrix(rows, rows == 0 ? 0 : static_cast<std::int64_t>(numel()) / rows);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

void quantize_f32(std::span<double> values) {
    for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

bool all_finite(std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace medfor
