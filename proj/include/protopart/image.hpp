#pragma once

#include "protopart/tensor.hpp"

#include <filesystem>

namespace protopart {

// RGB images are 3-channel Tensors with values in [0,1].
using Image = Tensor;

Image make_image(int rows, int cols, double fill = 0.0);

Image load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Image& rgb);
/// Writes an 8-bit grayscale PNG; values are mapped linearly from [lo,hi] to [0,255] and clamped.
void save_png_gray(const std::filesystem::path& path, const RowMatrix& values, double lo, double hi);

/// Bilinear resize. With align_corners the corner samples of source and target coincide;
/// otherwise pixel centres are aligned (the usual choice for image resampling).
Tensor resize_bilinear(const Tensor& src, int rows, int cols, bool align_corners = false);

/// Samples channel c at a continuous position with symmetric (mirror) boundary handling.
double sample_reflect(const Tensor& src, int c, double y, double x);

Image crop(const Image& src, int y0, int x0, int rows, int cols);
Image clamp01(Image img);

struct Hsi {
    double h = 0.0;  // degrees in [0,360)
    double s = 0.0;  // [0,1]
    double i = 0.0;  // [0,1]
};

// Gonzalez-Woods HSI model:
//   I = (R+G+B)/3, S = 1 - min(R,G,B)/I,
//   H = theta if B <= G else 360 - theta,
//   theta = acos( ((R-G)+(R-B))/2 / sqrt((R-G)^2 + (R-B)(G-B)) ).
// The inverse uses the three 120-degree sectors; results are clamped to [0,1].
Hsi rgb_to_hsi(double r, double g, double b) noexcept;
void hsi_to_rgb(const Hsi& hsi, double& r, double& g, double& b) noexcept;

/// Separable Gaussian blur with mirror boundaries; kernel radius ceil(3*sigma). sigma <= 0 is identity.
Tensor gaussian_blur(const Tensor& src, double sigma);

}  // namespace protopart
