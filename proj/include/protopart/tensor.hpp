#pragma once

#include "protopart/common.hpp"

#include <cmath>
#include <vector>

namespace protopart {

/// Dense channels x rows x cols tensor, row-major within each channel.
struct Tensor {
    int channels = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int c, int r, int w, double fill = 0.0)
        : channels(c), rows(r), cols(w), data(static_cast<std::size_t>(c) * r * w, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    int plane() const noexcept { return rows * cols; }

    double& at(int c, int y, int x) noexcept {
        return data[(static_cast<std::size_t>(c) * rows + y) * cols + x];
    }
    double at(int c, int y, int x) const noexcept {
        return data[(static_cast<std::size_t>(c) * rows + y) * cols + x];
    }

    // (channels, rows*cols) view.
    Eigen::Map<RowMatrix> as_matrix() { return {data.data(), channels, plane()}; }
    Eigen::Map<const RowMatrix> as_matrix() const { return {data.data(), channels, plane()}; }

    bool same_shape(const Tensor& o) const noexcept {
        return channels == o.channels && rows == o.rows && cols == o.cols;
    }
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline bool Tensor::all_finite() const noexcept {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace protopart
