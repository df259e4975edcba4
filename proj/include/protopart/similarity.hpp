#pragma once

#include "protopart/types.hpp"

#include <filesystem>

namespace protopart {

struct SimilarityConfig {
    double epsilon = 1e-4;
    int heatmap_side = 0;  // 0: use the model input side
    double bbox_percentile = 95.0;

    void validate() const;
};

/// Sum of squared component differences.
double squared_distance(std::span<const double> z, std::span<const double> p);

/// ln((d+1)/(d+eps)), evaluated as log1p((1-eps)/(d+eps)) for accuracy at large d.
double similarity_score(double d, const SimilarityConfig& cfg);
/// d score / d d.
double similarity_score_derivative(double d, const SimilarityConfig& cfg);

struct SimilarityResult {
    RowMatrix distances;  // P x (W*H), column = patch index w*H + h
    RowMatrix maps;       // P x (W*H) similarity scores, same layout
    Vector pooled;        // P, max over each row of maps
    std::vector<int> argmax_patch;
    int grid_w = 0;
    int grid_h = 0;

    std::pair<int, int> argmax_coords(int p) const noexcept {
        return {argmax_patch[p] / grid_h, argmax_patch[p] % grid_h};
    }
    /// Similarity map of prototype p as an image-oriented H x W matrix (row h, column w).
    RowMatrix map_image(int p) const;
};

/// Throws DimensionError on depth mismatch and NumericalError (naming the
/// prototype and patch) on non-finite scores.
SimilarityResult similarity_maps(const LatentVolume& latent, const PrototypeBank& bank,
                                 const SimilarityConfig& cfg);

struct BoundingBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel bounds
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Heatmap {
    RowMatrix values;  // side x side
    PrototypeIndex prototype;
    BoundingBox bbox;
};

/// Corner-aligned bilinear upscaling of an image-oriented map to side x side,
/// plus the smallest box enclosing every pixel at or above the configured percentile.
/// A constant map yields the full-image box.
Heatmap render_heatmap(const RowMatrix& map, const SimilarityConfig& cfg, int side,
                       PrototypeIndex prototype = {});

/// numpy-style linear-interpolated percentile.
double percentile(std::vector<double> values, double q);

/// Writes the heatmap as an 8-bit PNG (raw scores mapped from [0, ln(1/eps)] to [0,255])
/// and returns the sidecar record {prototype_index, pooled_score, bbox}.
struct HeatmapSidecar {
    PrototypeIndex prototype;
    double pooled_score = 0.0;
    BoundingBox bbox;
};
HeatmapSidecar export_heatmap(const std::filesystem::path& png_path, const Heatmap& heatmap,
                              double pooled_score, const SimilarityConfig& cfg);

}  // namespace protopart
