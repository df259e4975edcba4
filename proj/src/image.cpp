#include "protopart/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <numbers>

namespace protopart {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

void write_png_rows(const std::filesystem::path& path, int rows, int cols, int color_type,
                    const std::vector<png_byte>& pixels) {
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // No timestamps or text chunks: identical input yields identical bytes.
    png_write_info(png, info);
    const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
    for (int y = 0; y < rows; ++y) {
        auto* row = const_cast<png_byte*>(pixels.data() + static_cast<std::size_t>(y) * cols * channels);
        png_write_row(png, row);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

png_byte quantize(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<png_byte>(std::lround(v * 255.0));
}

int mirror(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

}  // namespace

Image make_image(int rows, int cols, double fill) { return Image(3, rows, cols, fill); }

Image load_png(const std::filesystem::path& path) {
    auto f = open_file(path, "rb");
    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw IoError("not a PNG file: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed reading " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int cols = static_cast<int>(png_get_image_width(png, info));
    const int rows = static_cast<int>(png_get_image_height(png, info));
    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const std::size_t stride = png_get_rowbytes(png, info);
    std::vector<png_byte> buffer(stride * rows);
    std::vector<png_bytep> row_ptrs(rows);
    for (int y = 0; y < rows; ++y) row_ptrs[y] = buffer.data() + y * stride;
    png_read_image(png, row_ptrs.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Image img = make_image(rows, cols);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = buffer[y * stride + x * 3 + c] / 255.0;
    return img;
}

void save_png(const std::filesystem::path& path, const Image& rgb) {
    if (rgb.channels != 3) throw DimensionError("save_png expects a 3-channel image");
    std::vector<png_byte> px(static_cast<std::size_t>(rgb.rows) * rgb.cols * 3);
    for (int y = 0; y < rgb.rows; ++y)
        for (int x = 0; x < rgb.cols; ++x)
            for (int c = 0; c < 3; ++c)
                px[(static_cast<std::size_t>(y) * rgb.cols + x) * 3 + c] = quantize(rgb.at(c, y, x));
    write_png_rows(path, rgb.rows, rgb.cols, PNG_COLOR_TYPE_RGB, px);
}

void save_png_gray(const std::filesystem::path& path, const RowMatrix& values, double lo, double hi) {
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<png_byte> px(static_cast<std::size_t>(values.size()));
    for (Eigen::Index y = 0; y < values.rows(); ++y)
        for (Eigen::Index x = 0; x < values.cols(); ++x)
            px[y * values.cols() + x] = quantize((values(y, x) - lo) / span);
    write_png_rows(path, static_cast<int>(values.rows()), static_cast<int>(values.cols()),
                   PNG_COLOR_TYPE_GRAY, px);
}

Tensor resize_bilinear(const Tensor& src, int rows, int cols, bool align_corners) {
    if (rows == src.rows && cols == src.cols) return src;
    Tensor out(src.channels, rows, cols);
    auto coord = [&](int dst, int n_dst, int n_src) {
        if (align_corners) return n_dst > 1 ? dst * double(n_src - 1) / double(n_dst - 1) : 0.0;
        const double v = (dst + 0.5) * double(n_src) / double(n_dst) - 0.5;
        return std::clamp(v, 0.0, double(n_src - 1));
    };
    for (int y = 0; y < rows; ++y) {
        const double sy = coord(y, rows, src.rows);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, src.rows - 1);
        const double fy = sy - y0;
        for (int x = 0; x < cols; ++x) {
            const double sx = coord(x, cols, src.cols);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, src.cols - 1);
            const double fx = sx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = src.at(c, y0, x0) * (1 - fx) + src.at(c, y0, x1) * fx;
                const double bot = src.at(c, y1, x0) * (1 - fx) + src.at(c, y1, x1) * fx;
                out.at(c, y, x) = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

double sample_reflect(const Tensor& src, int c, double y, double x) {
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0;
    const double fx = x - x0;
    const int ya = mirror(y0, src.rows), yb = mirror(y0 + 1, src.rows);
    const int xa = mirror(x0, src.cols), xb = mirror(x0 + 1, src.cols);
    const double top = src.at(c, ya, xa) * (1 - fx) + src.at(c, ya, xb) * fx;
    const double bot = src.at(c, yb, xa) * (1 - fx) + src.at(c, yb, xb) * fx;
    return top * (1 - fy) + bot * fy;
}

Image crop(const Image& src, int y0, int x0, int rows, int cols) {
    if (y0 < 0 || x0 < 0 || y0 + rows > src.rows || x0 + cols > src.cols)
        throw DomainError("crop rectangle outside image");
    Image out(src.channels, rows, cols);
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < cols; ++x) out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return out;
}

Image clamp01(Image img) {
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

Hsi rgb_to_hsi(double r, double g, double b) noexcept {
    constexpr double rad2deg = 180.0 / std::numbers::pi;
    Hsi out;
    out.i = (r + g + b) / 3.0;
    const double mn = std::min({r, g, b});
    out.s = out.i > 0.0 ? 1.0 - mn / out.i : 0.0;
    const double num = 0.5 * ((r - g) + (r - b));
    const double den = std::sqrt((r - g) * (r - g) + (r - b) * (g - b));
    if (den <= 1e-12) {
        out.h = 0.0;
        out.s = out.s < 1e-12 ? 0.0 : out.s;
        return out;
    }
    const double theta = std::acos(std::clamp(num / den, -1.0, 1.0)) * rad2deg;
    out.h = b <= g ? theta : 360.0 - theta;
    if (out.h >= 360.0) out.h -= 360.0;
    return out;
}

void hsi_to_rgb(const Hsi& hsi, double& r, double& g, double& b) noexcept {
    constexpr double deg2rad = std::numbers::pi / 180.0;
    double h = std::fmod(hsi.h, 360.0);
    if (h < 0) h += 360.0;
    const double s = hsi.s;
    const double i = hsi.i;
    auto lead = [&](double hh) { return i * (1.0 + s * std::cos(hh * deg2rad) / std::cos((60.0 - hh) * deg2rad)); };
    if (h < 120.0) {
        b = i * (1.0 - s);
        r = lead(h);
        g = 3.0 * i - (r + b);
    } else if (h < 240.0) {
        r = i * (1.0 - s);
        g = lead(h - 120.0);
        b = 3.0 * i - (r + g);
    } else {
        g = i * (1.0 - s);
        b = lead(h - 240.0);
        r = 3.0 * i - (g + b);
    }
    r = std::clamp(r, 0.0, 1.0);
    g = std::clamp(g, 0.0, 1.0);
    b = std::clamp(b, 0.0, 1.0);
}

Tensor gaussian_blur(const Tensor& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
        total += kernel[t + radius];
    }
    for (double& k : kernel) k /= total;

    Tensor tmp(src.channels, src.rows, src.cols);
    Tensor out(src.channels, src.rows, src.cols);
    for (int c = 0; c < src.channels; ++c) {
        for (int y = 0; y < src.rows; ++y)
            for (int x = 0; x < src.cols; ++x) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += kernel[t + radius] * src.at(c, y, mirror(x + t, src.cols));
                tmp.at(c, y, x) = acc;
            }
        for (int y = 0; y < src.rows; ++y)
            for (int x = 0; x < src.cols; ++x) {
                double acc = 0.0;
                for (int t = -radius; t <= radius; ++t)
                    acc += kernel[t + radius] * tmp.at(c, mirror(y + t, src.rows), x);
                out.at(c, y, x) = acc;
            }
    }
    return out;
}

}  // namespace protopart
