#pragma once

#include "protopart/model.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

namespace protopart {

struct AccuracyReport {
    std::vector<double> per_class;  // one-vs-rest (TP + TN) / total per class
    std::vector<long> support;      // ground-truth count per class
    double weighted = 0.0;          // per_class weighted by support
    double macro = 0.0;
    double plain = 0.0;             // correct / total
    std::vector<std::vector<long>> confusion;  // [truth][prediction]
};

AccuracyReport accuracy(const std::vector<int>& predictions, const std::vector<int>& labels, int num_classes);

/// Stratified fold id per sample: within each class, a seeded shuffle dealt round-robin.
/// StratificationError if a class has fewer samples than folds.
std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed);

/// Indices of the k reference rows nearest to `query` (squared L2; ties to the lowest index).
std::vector<int> nearest_neighbors(const RowMatrix& reference, std::span<const double> query, int k);
/// Majority vote over neighbour labels; ties to the smallest class.
int majority_vote(const std::vector<int>& neighbor_labels);

struct KnnResult {
    double mean = 0.0;
    double stddev = 0.0;  // population std over folds
    std::vector<double> fold_accuracy;
    std::vector<int> predictions;  // out-of-fold prediction per sample
    std::vector<int> folds;
};

KnnResult knn_eval(const RowMatrix& points, const std::vector<int>& labels, int k = 5, int folds = 5,
                   std::uint64_t seed = 0);

struct GaussianFit {
    Vector mean;
    Matrix covariance;  // unbiased, shrunk by 1e-6 * trace/dim * I when n <= dim
    bool shrunk = false;
};
GaussianFit fit_gaussian(const RowMatrix& samples);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the root trace is taken from the
/// eigenvalues of S_a^{1/2} S_b S_a^{1/2} (negatives clipped) and averaged over both argument orders.
double frechet_distance(const RowMatrix& a, const RowMatrix& b);

class ImageEmbedder {
public:
    virtual ~ImageEmbedder() = default;
    virtual Vector embed(const Image& rgb) const = 0;
    virtual int dim() const = 0;
};

/// Fixed seeded random convolutional network with global average pooling.
class RandomConvEmbedder final : public ImageEmbedder {
public:
    explicit RandomConvEmbedder(std::uint64_t seed, int width = 16);
    Vector embed(const Image& rgb) const override;
    int dim() const override { return dim_; }

private:
    ParamSet params_;
    std::shared_ptr<Sequential> net_;
    int dim_ = 0;
};

RowMatrix embed_images(const ImageEmbedder& embedder, const std::vector<const Image*>& images, int jobs = 1);

struct EmbeddingRow {
    std::string image_id;
    int label = 0;
    int prediction = 0;
    int nearest_pp = 0;
    double distance = 0.0;
    std::vector<double> z;
};

/// Per image: the latent patch closest to any prototype, with its nearest prototype and the head prediction.
std::vector<EmbeddingRow> export_embeddings(const Dataset& data, const Model& model, int jobs = 1);
/// Header: image_id, label, prediction, nearest_pp, d0..d{D-1}.
void write_embeddings_tsv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows);
RowMatrix embedding_matrix(const std::vector<EmbeddingRow>& rows);

struct DistanceStats {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;  // population
    double stddev = 0.0;
};
std::optional<DistanceStats> distance_stats(const std::vector<double>& values);

struct ClassClusterStats {
    int class_index = 0;
    std::optional<DistanceStats> patch_to_pp;  // L2 between every training patch and every same-class prototype
    std::optional<DistanceStats> pp_to_pp;     // L2 between distinct same-class prototypes
};

std::vector<ClassClusterStats> cluster_statistics(const std::vector<LatentVolume>& latents,
                                                  const std::vector<int>& labels, const PrototypeBank& bank);
/// Pairwise L2 distances between distinct prototypes of class k.
std::vector<double> prototype_pair_distances(const PrototypeBank& bank, int k);

}  // namespace protopart
