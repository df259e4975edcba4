#include "protopart/similarity.hpp"

#include "protopart/image.hpp"

#include <algorithm>

namespace protopart {

void SimilarityConfig::validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("similarity.epsilon must be > 0");
    if (!(bbox_percentile > 0.0 && bbox_percentile < 100.0))
        throw ConfigError("similarity.bbox_percentile must lie in (0,100)");
    if (heatmap_side < 0) throw ConfigError("similarity.heatmap_side must be >= 0");
}

double squared_distance(std::span<const double> z, std::span<const double> p) {
    if (z.size() != p.size())
        throw DimensionError("squared_distance: lengths " + std::to_string(z.size()) + " and " +
                             std::to_string(p.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double diff = z[i] - p[i];
        acc += diff * diff;
    }
    return acc;
}

double similarity_score(double d, const SimilarityConfig& cfg) {
    return std::log1p((1.0 - cfg.epsilon) / (d + cfg.epsilon));
}

double similarity_score_derivative(double d, const SimilarityConfig& cfg) {
    return -(1.0 - cfg.epsilon) / ((d + cfg.epsilon) * (d + 1.0));
}

RowMatrix SimilarityResult::map_image(int p) const {
    RowMatrix out(grid_h, grid_w);
    for (int w = 0; w < grid_w; ++w)
        for (int h = 0; h < grid_h; ++h) out(h, w) = maps(p, w * grid_h + h);
    return out;
}

SimilarityResult similarity_maps(const LatentVolume& latent, const PrototypeBank& bank,
                                 const SimilarityConfig& cfg) {
    if (latent.depth() != bank.depth())
        throw DimensionError("latent depth " + std::to_string(latent.depth()) + " != prototype depth " +
                             std::to_string(bank.depth()));
    const int P = bank.size();
    const int L = latent.patches();
    SimilarityResult r;
    r.grid_w = latent.grid_w;
    r.grid_h = latent.grid_h;
    // ||z||^2 + ||p||^2 - 2 z.p loses precision when z ~ p; use explicit differences.
    r.distances.resize(P, L);
    r.maps.resize(P, L);
    r.pooled.resize(P);
    r.argmax_patch.assign(P, 0);
    for (int p = 0; p < P; ++p) {
        const auto proto = bank.prototype(p);
        int best = 0;
        for (int l = 0; l < L; ++l) {
            const double d = squared_distance(latent.patch(l), proto);
            const double s = similarity_score(d, cfg);
            if (!std::isfinite(s)) {
                const auto [w, h] = latent.patch_coords(l);
                throw NumericalError("non-finite similarity for prototype " + std::to_string(p) + " at patch (" +
                                     std::to_string(w) + "," + std::to_string(h) + ")");
            }
            r.distances(p, l) = d;
            r.maps(p, l) = s;
            if (s > r.maps(p, best)) best = l;
        }
        r.argmax_patch[p] = best;
        r.pooled[p] = r.maps(p, best);
    }
    return r;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw DomainError("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

Heatmap render_heatmap(const RowMatrix& map, const SimilarityConfig& cfg, int side, PrototypeIndex prototype) {
    if (!map.allFinite()) throw NumericalError("render_heatmap: non-finite map entries");
    if (side < 1) throw ConfigError("heatmap side must be >= 1");
    Tensor src(1, static_cast<int>(map.rows()), static_cast<int>(map.cols()));
    for (int y = 0; y < src.rows; ++y)
        for (int x = 0; x < src.cols; ++x) src.at(0, y, x) = map(y, x);
    const Tensor up = resize_bilinear(src, side, side, /*align_corners=*/true);

    Heatmap hm;
    hm.prototype = prototype;
    hm.values = Eigen::Map<const RowMatrix>(up.data.data(), side, side);

    if (map.maxCoeff() == map.minCoeff()) {
        hm.bbox = {0, 0, side - 1, side - 1};
        return hm;
    }
    const double threshold = percentile(up.data, cfg.bbox_percentile);
    BoundingBox box{side, side, -1, -1};
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            if (hm.values(y, x) >= threshold) {
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.x1 = std::max(box.x1, x);
                box.y1 = std::max(box.y1, y);
            }
    hm.bbox = box;
    return hm;
}

HeatmapSidecar export_heatmap(const std::filesystem::path& png_path, const Heatmap& heatmap,
                              double pooled_score, const SimilarityConfig& cfg) {
    save_png_gray(png_path, heatmap.values, 0.0, std::log(1.0 / cfg.epsilon));
    return {heatmap.prototype, pooled_score, heatmap.bbox};
}

}  // namespace protopart
