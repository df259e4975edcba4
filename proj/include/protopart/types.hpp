#pragma once

#include "protopart/common.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace protopart {

/// Convolutional output Z of one image: W x H latent patch tensors z_{w,h} of depth D.
/// w is the grid column, h the grid row; row (w*H + h) of `data` holds z_{w,h}.
struct LatentVolume {
    RowMatrix data;  // (W*H) x D
    int grid_w = 0;
    int grid_h = 0;
    std::string source_image_id;

    int patches() const noexcept { return grid_w * grid_h; }
    int depth() const noexcept { return static_cast<int>(data.cols()); }
    int patch_index(int w, int h) const noexcept { return w * grid_h + h; }
    std::pair<int, int> patch_coords(int index) const noexcept { return {index / grid_h, index % grid_h}; }
    std::span<const double> patch(int index) const noexcept {
        return {data.row(index).data(), static_cast<std::size_t>(data.cols())};
    }
};

struct ProjectionRecord {
    std::string image_id;
    int w = 0;
    int h = 0;
    double distance = 0.0;  // squared L2 at projection time
    friend bool operator==(const ProjectionRecord&, const ProjectionRecord&) = default;
};

/// P = M*K prototype tensors, flat index p = m + k*M.
struct PrototypeBank {
    RowMatrix tensors;  // P x D
    int per_class = 0;   // M
    int num_classes = 0; // K
    std::vector<std::optional<ProjectionRecord>> projection_meta;

    PrototypeBank() = default;
    PrototypeBank(int num_classes_, int per_class_, int depth)
        : tensors(RowMatrix::Zero(num_classes_ * per_class_, depth)),
          per_class(per_class_),
          num_classes(num_classes_),
          projection_meta(static_cast<std::size_t>(num_classes_) * per_class_) {}

    int size() const noexcept { return static_cast<int>(tensors.rows()); }
    int depth() const noexcept { return static_cast<int>(tensors.cols()); }
    int class_of(int p) const noexcept { return p / per_class; }
    std::span<const double> prototype(int p) const noexcept {
        return {tensors.row(p).data(), static_cast<std::size_t>(tensors.cols())};
    }
    /// Throws ValidationError if shape or finiteness invariants are violated.
    void validate() const;
};

/// Fully connected layer mapping the P pooled scores to K logits.
struct ClassifierHead {
    RowMatrix weights;  // K x P
    Vector bias;        // K

    /// Weight 1 from every prototype to its own class, 0 elsewhere; zero bias.
    static ClassifierHead class_identity(int num_classes, int per_class);
};

}  // namespace protopart
