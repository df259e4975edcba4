#pragma once

#include "protopart/image.hpp"

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace protopart {

enum class ViewTag { Surface, Section };

struct ManifestEntry {
    std::string image_path;  // relative paths resolve against the manifest directory
    std::string label;
    ViewTag view = ViewTag::Surface;
    std::string patch_id;
};

/// JSON-lines manifest. An optional leading record {"class_names":[...]} fixes
/// the class order; otherwise classes are ordered lexicographically.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> class_names;
    std::filesystem::path base_dir;

    int label_index(const std::string& label) const;
    std::filesystem::path resolve(const ManifestEntry& e) const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Checks labels, duplicate patch ids and (optionally) that every image exists.
/// Returns every problem found rather than stopping at the first.
std::vector<std::string> validate_manifest(const DatasetManifest& manifest, bool check_files = true);

struct Sample {
    std::string id;  // patch_id
    int label = 0;
    Image image;     // raw RGB in [0,1], resized to the model input side
    std::string path;
};

using Dataset = std::vector<Sample>;

struct SplitResult {
    Dataset train;
    Dataset test;
    std::vector<std::string> warnings;
};

/// Stratified per-class split; class c contributes round(fraction * n_c) training samples.
/// Images are loaded and resized to input_side (0 keeps the stored size).
SplitResult load_and_split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed,
                           int input_side = 0);
/// Same assignment as load_and_split but only the entry indices (no image I/O).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const DatasetManifest& manifest,
                                                                            double train_fraction,
                                                                            std::uint64_t seed);

struct WhiteningStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};
    std::string computed_on;
};

/// Dataset-wide per-channel mean and population standard deviation.
WhiteningStats compute_whitening(const Dataset& data, std::string split_name = "train");
Image whiten(const Image& image, const WhiteningStats& stats);

enum class AugmentKind { HorizontalFlip, VerticalFlip, Rotation, Perspective, Scaling, Translation, Padding };
inline constexpr int kAugmentKinds = 7;

struct AugmentationPolicy {
    bool enabled = false;
    double apply_probability = 0.5;
    double max_rotation_deg = 180.0;
    double max_perspective = 0.4;
    double max_scaling = 0.5;
    double max_translation = 0.2;
    int max_padding_px = 50;  // relative to a 256-pixel side; scaled with the image
    void validate() const;
};

/// One recorded augmentation decision; replaying it reproduces the output exactly.
struct AugmentDraw {
    AugmentKind kind = AugmentKind::HorizontalFlip;
    bool applied = false;
    std::array<double, 8> params{};  // kind-specific
};

AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::mt19937_64& rng);
Image apply_augmentation(const Image& image, const AugmentDraw& draw);
/// Draws one transform uniformly, applies it with the policy probability.
Image augment(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng,
              AugmentDraw* trace = nullptr);

struct SyntheticClassSpec {
    std::string name;
    double hue_deg = 0.0;
    double saturation = 0.6;
    double intensity = 0.5;
    enum class Texture { FineNoise, CoarseNoise, Stripes } texture = Texture::FineNoise;
    bool hue_defined = false;  // differs from some other class only in hue
};

/// Class palette used by generate_synthetic for the given class count.
std::vector<SyntheticClassSpec> synthetic_class_specs(int num_classes);

Image render_synthetic_image(const SyntheticClassSpec& spec, int side, std::mt19937_64& rng);

/// Writes per_class PNGs per class under out_dir/images and a manifest at out_dir/manifest.jsonl.
DatasetManifest generate_synthetic(const std::filesystem::path& out_dir, int num_classes, int per_class,
                                   int side, std::uint64_t seed);

}  // namespace protopart
