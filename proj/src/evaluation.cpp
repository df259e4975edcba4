#include "protopart/evaluation.hpp"

#include "protopart/parallel.hpp"
#include "protopart/rng.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace protopart {

AccuracyReport accuracy(const std::vector<int>& predictions, const std::vector<int>& labels, int K) {
    if (predictions.size() != labels.size()) throw DimensionError("accuracy: predictions and labels differ in length");
    if (labels.empty()) throw DomainError("accuracy of an empty set");
    AccuracyReport r;
    r.confusion.assign(K, std::vector<long>(K, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= K || predictions[i] < 0 || predictions[i] >= K)
            throw DomainError("accuracy: class index out of range");
        ++r.confusion[labels[i]][predictions[i]];
    }
    const long total = static_cast<long>(labels.size());
    r.per_class.assign(K, 0.0);
    r.support.assign(K, 0);
    long correct = 0;
    for (int k = 0; k < K; ++k) {
        long tp = r.confusion[k][k], fn = 0, fp = 0;
        for (int j = 0; j < K; ++j) {
            r.support[k] += r.confusion[k][j];
            if (j != k) {
                fn += r.confusion[k][j];
                fp += r.confusion[j][k];
            }
        }
        const long tn = total - tp - fn - fp;
        r.per_class[k] = static_cast<double>(tp + tn) / static_cast<double>(total);
        correct += tp;
    }
    for (int k = 0; k < K; ++k) {
        r.weighted += r.per_class[k] * static_cast<double>(r.support[k]) / static_cast<double>(total);
        r.macro += r.per_class[k] / K;
    }
    r.plain = static_cast<double>(correct) / static_cast<double>(total);
    return r;
}

std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, std::uint64_t seed) {
    if (folds < 2) throw ConfigError("knn folds must be >= 2");
    const int K = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::vector<int>> by_class(K);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) throw DomainError("negative label");
        by_class[labels[i]].push_back(static_cast<int>(i));
    }
    auto rng = make_rng(seed, 7);
    std::vector<int> fold(labels.size(), 0);
    for (int k = 0; k < K; ++k) {
        auto& idx = by_class[k];
        if (idx.empty()) continue;
        if (static_cast<int>(idx.size()) < folds)
            throw StratificationError("class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                                      " samples, fewer than " + std::to_string(folds) + " folds");
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t j = 0; j < idx.size(); ++j) fold[idx[j]] = static_cast<int>(j % folds);
    }
    return fold;
}

std::vector<int> nearest_neighbors(const RowMatrix& reference, std::span<const double> query, int k) {
    const int n = static_cast<int>(reference.rows());
    std::vector<std::pair<double, int>> d(n);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < reference.cols(); ++j) {
            const double diff = reference(i, j) - query[j];
            acc += diff * diff;
        }
        d[i] = {acc, i};
    }
    const int kk = std::min(k, n);
    std::partial_sort(d.begin(), d.begin() + kk, d.end());
    std::vector<int> out(kk);
    for (int i = 0; i < kk; ++i) out[i] = d[i].second;
    return out;
}

int majority_vote(const std::vector<int>& neighbor_labels) {
    if (neighbor_labels.empty()) throw DomainError("majority vote over no neighbours");
    const int K = *std::max_element(neighbor_labels.begin(), neighbor_labels.end()) + 1;
    std::vector<int> votes(K, 0);
    for (int l : neighbor_labels) ++votes[l];
    return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

KnnResult knn_eval(const RowMatrix& points, const std::vector<int>& labels, int k, int folds, std::uint64_t seed) {
    if (static_cast<std::size_t>(points.rows()) != labels.size()) throw DimensionError("knn: points / labels mismatch");
    if (k < 1) throw ConfigError("knn k must be >= 1");
    KnnResult res;
    res.folds = stratified_folds(labels, folds, seed);
    res.predictions.assign(labels.size(), 0);
    for (int f = 0; f < folds; ++f) {
        std::vector<int> ref_idx, query_idx;
        for (std::size_t i = 0; i < labels.size(); ++i) (res.folds[i] == f ? query_idx : ref_idx).push_back(static_cast<int>(i));
        if (static_cast<int>(ref_idx.size()) < k)
            throw StratificationError("fold " + std::to_string(f) + " leaves fewer than k reference points");
        RowMatrix ref(ref_idx.size(), points.cols());
        for (std::size_t r = 0; r < ref_idx.size(); ++r) ref.row(r) = points.row(ref_idx[r]);
        long correct = 0;
        for (int q : query_idx) {
            std::vector<int> nl;
            for (int j : nearest_neighbors(ref, {points.row(q).data(), static_cast<std::size_t>(points.cols())}, k))
                nl.push_back(labels[ref_idx[j]]);
            res.predictions[q] = majority_vote(nl);
            correct += res.predictions[q] == labels[q];
        }
        res.fold_accuracy.push_back(query_idx.empty() ? 0.0
                                                      : static_cast<double>(correct) / static_cast<double>(query_idx.size()));
    }
    const double m = std::accumulate(res.fold_accuracy.begin(), res.fold_accuracy.end(), 0.0) / folds;
    double v = 0.0;
    for (double a : res.fold_accuracy) v += (a - m) * (a - m);
    res.mean = m;
    res.stddev = std::sqrt(v / folds);
    return res;
}

GaussianFit fit_gaussian(const RowMatrix& x) {
    if (x.rows() < 2) throw DomainError("a Gaussian fit needs at least two samples");
    GaussianFit g;
    g.mean = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - g.mean.transpose();
    g.covariance = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    g.covariance = 0.5 * (g.covariance + g.covariance.transpose());
    const auto dim = x.cols();
    if (x.rows() <= dim) {
        const double tr = g.covariance.trace();
        const double lambda = 1e-6 * (tr > 0.0 ? tr / static_cast<double>(dim) : 1.0);
        g.covariance.diagonal().array() += lambda;
        g.shrunk = true;
    }
    return g;
}

namespace {

Matrix psd_sqrt(const Matrix& s) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const Vector ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double sqrt_product_trace(const Matrix& a, const Matrix& b) {
    const Matrix ra = psd_sqrt(a);
    Matrix m = ra * b * ra;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace

double frechet_distance(const RowMatrix& a, const RowMatrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("frechet_distance: embedding dimensions differ");
    const GaussianFit ga = fit_gaussian(a), gb = fit_gaussian(b);
    const double mean_term = (ga.mean - gb.mean).squaredNorm();
    const double cross = 0.5 * (sqrt_product_trace(ga.covariance, gb.covariance) +
                                sqrt_product_trace(gb.covariance, ga.covariance));
    const double value = mean_term + (ga.covariance.trace() + gb.covariance.trace()) - 2.0 * cross;
    return std::max(0.0, value);
}

RandomConvEmbedder::RandomConvEmbedder(std::uint64_t seed, int width) {
    net_ = std::make_shared<Sequential>();
    net_->emplace<Conv2d>(params_, "embed.conv1", 3, width, 3, 1, 1);
    net_->emplace<Relu>();
    net_->emplace<MaxPool>(2);
    net_->emplace<Conv2d>(params_, "embed.conv2", width, 2 * width, 3, 1, 1);
    net_->emplace<Relu>();
    net_->emplace<MaxPool>(2);
    net_->emplace<Conv2d>(params_, "embed.conv3", 2 * width, 2 * width, 3, 1, 1);
    net_->emplace<Relu>();
    dim_ = 2 * width;
    auto rng = make_rng(seed, 11);
    net_->initialize(params_, rng);
}

Vector RandomConvEmbedder::embed(const Image& rgb) const {
    const Tensor t = net_->forward(params_, rgb, nullptr);
    return t.as_matrix().rowwise().mean();
}

RowMatrix embed_images(const ImageEmbedder& embedder, const std::vector<const Image*>& images, int jobs) {
    RowMatrix out(static_cast<Eigen::Index>(images.size()), embedder.dim());
    parallel_for(images.size(), jobs, [&](std::size_t i) { out.row(i) = embedder.embed(*images[i]).transpose(); });
    return out;
}

std::vector<EmbeddingRow> export_embeddings(const Dataset& data, const Model& model, int jobs) {
    std::vector<EmbeddingRow> rows(data.size());
    parallel_for(data.size(), jobs, [&](std::size_t n) {
        const LatentVolume z = model.extract(data[n].image, data[n].id);
        const Prediction pred = classify(z, model.bank, model.head, model.similarity);
        const auto& dist = pred.similarity.distances;
        Eigen::Index best_p = 0, best_l = 0;
        double best = dist(0, 0);
        // Patch-major scan: lowest patch index first, then lowest prototype.
        for (Eigen::Index l = 0; l < dist.cols(); ++l)
            for (Eigen::Index p = 0; p < dist.rows(); ++p)
                if (dist(p, l) < best) {
                    best = dist(p, l);
                    best_p = p;
                    best_l = l;
                }
        EmbeddingRow& r = rows[n];
        r.image_id = data[n].id;
        r.label = data[n].label;
        r.prediction = pred.predicted_class;
        r.nearest_pp = static_cast<int>(best_p);
        r.distance = best;
        const auto patch = z.patch(static_cast<int>(best_l));
        r.z.assign(patch.begin(), patch.end());
    });
    return rows;
}

void write_embeddings_tsv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const std::size_t D = rows.empty() ? 0 : rows.front().z.size();
    out << "image_id\tlabel\tprediction\tnearest_pp";
    for (std::size_t d = 0; d < D; ++d) out << "\td" << d;
    out << '\n' << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.image_id << '\t' << r.label << '\t' << r.prediction << '\t' << r.nearest_pp;
        for (double v : r.z) out << '\t' << v;
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

RowMatrix embedding_matrix(const std::vector<EmbeddingRow>& rows) {
    const std::size_t D = rows.empty() ? 0 : rows.front().z.size();
    RowMatrix m(rows.size(), D);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t d = 0; d < D; ++d) m(i, d) = rows[i].z[d];
    return m;
}

std::optional<DistanceStats> distance_stats(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    DistanceStats s;
    s.count = v.size();
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double x : v) s.variance += (x - s.mean) * (x - s.mean);
    s.variance /= static_cast<double>(v.size());
    s.stddev = std::sqrt(s.variance);
    return s;
}

std::vector<double> prototype_pair_distances(const PrototypeBank& bank, int k) {
    std::vector<double> out;
    for (int a = 0; a < bank.per_class; ++a)
        for (int b = a + 1; b < bank.per_class; ++b)
            out.push_back(std::sqrt(squared_distance(bank.prototype(a + k * bank.per_class),
                                                     bank.prototype(b + k * bank.per_class))));
    return out;
}

std::vector<ClassClusterStats> cluster_statistics(const std::vector<LatentVolume>& latents,
                                                  const std::vector<int>& labels, const PrototypeBank& bank) {
    if (latents.size() != labels.size()) throw DimensionError("cluster_statistics: latents / labels mismatch");
    std::vector<ClassClusterStats> out;
    for (int k = 0; k < bank.num_classes; ++k) {
        std::vector<double> patch;
        for (std::size_t n = 0; n < latents.size(); ++n) {
            if (labels[n] != k) continue;
            for (int l = 0; l < latents[n].patches(); ++l)
                for (int m = 0; m < bank.per_class; ++m)
                    patch.push_back(std::sqrt(squared_distance(latents[n].patch(l), bank.prototype(m + k * bank.per_class))));
        }
        out.push_back({k, distance_stats(patch), distance_stats(prototype_pair_distances(bank, k))});
    }
    return out;
}

}  // namespace protopart
