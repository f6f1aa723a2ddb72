#pragma once

#include "medfor/tensor.hpp"

namespace medfor {

struct GridShape {
    int height = 0;
    int width = 0;
    int cells() const noexcept { return height * width; }
    bool operator==(const GridShape&) const = default;
};

// Activations of one sample at one transformer block: row 0 is the class token,
// rows 1..H*W are patch tokens in row-major grid order, columns are channels.
struct TokenSequence {
    Matrix values;
    GridShape grid;

    int channels() const noexcept { return static_cast<int>(values.cols()); }
    // Throws DimensionError unless rows == 1 + grid cells.
    void check_layout() const;
};

}  // namespace medfor
