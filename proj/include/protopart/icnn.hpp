#pragma once

#include "protopart/types.hpp"

#include <vector>

namespace protopart {

struct ICNNConfig {
    int neighborhood_size = 0;  // k_nn; 0 selects 2*M
    double p = 1.0;             // exponent on Lambda
    double q = 1.0;             // exponent on Omega
    double r = 1.0;             // exponent on Gamma
    double log_floor = 1e-6;

    int resolved_k(int per_class) const noexcept { return neighborhood_size > 0 ? neighborhood_size : 2 * per_class; }
    /// Throws ConfigError; P is checked when given (> 0).
    void validate(int per_class = 0, int num_prototypes = 0) const;
};

/// The k_nn prototypes nearest to a query, split by class membership.
struct NeighborhoodContext {
    std::vector<double> query;
    int query_class = 0;
    std::vector<int> members;          // prototype indices sorted by (distance, index)
    std::vector<double> distances;     // raw squared distance of each member, same order
    std::vector<int> intra;            // members of the query class, in member order
    std::vector<int> inter;            // members of other classes, in member order
    double theta = 0.0;                // min distance over the union
    double alpha = 0.0;                // max distance over the union

    /// Member position of prototype p, or -1.
    int position(int p) const noexcept;
    double distance_of(int p) const;
};

NeighborhoodContext build_neighborhood(std::span<const double> query, int query_class, const PrototypeBank& bank,
                                       const ICNNConfig& cfg);

/// Min-max normalization (d - theta)/(alpha - theta); 0 when alpha == theta.
double normalized_distance(double d, double theta, double alpha) noexcept;
/// Normalized distance of a neighborhood member; DomainError if p is not a member.
double normalized_distance(const NeighborhoodContext& ctx, int p);

struct LambdaTerms {
    double inter = 0.0;  // sum of h over the inter-class set
    double intra = 0.0;  // sum of (1 - h) over the intra-class set
};
struct VarianceTerms {
    double intra = 0.0;
    double inter = 0.0;
};

LambdaTerms lambda_terms(const NeighborhoodContext& ctx);
double lambda_fn(const NeighborhoodContext& ctx);
VarianceTerms variance_terms(const NeighborhoodContext& ctx);
double omega_fn(const NeighborhoodContext& ctx);
double gamma_fn(const NeighborhoodContext& ctx);

struct ICNNBreakdown {
    double lambda_val = 0.0;
    double omega_val = 0.0;
    double gamma_val = 0.0;
    double lambda_inter = 0.0;
    double lambda_intra = 0.0;
    double var_intra = 0.0;
    double var_inter = 0.0;
    double score = 0.0;
    int intra_count = 0;
    int inter_count = 0;
};

ICNNBreakdown icnn_breakdown(const NeighborhoodContext& ctx, const ICNNConfig& cfg);

struct ICNNSample {
    std::span<const double> query;
    int label = 0;
};

struct ICNNBatchResult {
    double score = 0.0;
    std::vector<ICNNBreakdown> breakdowns;
    std::vector<NeighborhoodContext> contexts;
};

/// Mean per-sample score (compensated summation). DomainError on an empty batch.
ICNNBatchResult icnn_score(const std::vector<ICNNSample>& batch, const PrototypeBank& bank, const ICNNConfig& cfg);

/// -ln(max(score, log_floor)).
double icnn_loss(double score, const ICNNConfig& cfg);
/// d icnn_loss / d score (0 below the floor).
double icnn_loss_derivative(double score, const ICNNConfig& cfg);

/// Backpropagates d score_n = g through one sample: accumulates into d_query (length D)
/// and into rows of d_prototypes (P x D). Neighborhood membership is held fixed.
void icnn_sample_backward(const NeighborhoodContext& ctx, const ICNNBreakdown& b, const PrototypeBank& bank,
                          const ICNNConfig& cfg, double g, std::span<double> d_query, RowMatrix& d_prototypes);

/// Patch of the latent volume closest (raw squared distance) to any prototype of `label`;
/// ties resolve to the lowest patch index.
int icnn_query_patch(const LatentVolume& latent, int label, const PrototypeBank& bank);

}  // namespace protopart
