#pragma once

#include "protopart/icnn.hpp"
#include "protopart/layers.hpp"
#include "protopart/similarity.hpp"

#include <array>
#include <string_view>
#include <vector>

namespace protopart {

enum class LossRegime { CE, ProtoPNet, CIC, PPIC };

std::string_view to_string(LossRegime r) noexcept;
/// Accepts "ce", "protopnet", "cic", "ppic" (case-insensitive).
LossRegime parse_regime(std::string_view s);

struct LossWeights {
    double ce = 1.0;
    double cls = 0.8;
    double sep = 0.08;
    double l1 = 1e-4;
    double icnn = 1.0;
    void validate() const;
};

enum class LossComponent { CE = 0, Cls, Sep, L1, ICNN };
inline constexpr std::array<std::string_view, 5> kComponentNames{"ce", "cls", "sep", "l1", "icnn"};

struct LossReport {
    double total = 0.0;
    std::array<double, 5> components{};  // raw (unweighted) values, indexed by LossComponent; inactive = 0
    double icnn_score = 0.0;

    double operator[](LossComponent c) const noexcept { return components[static_cast<int>(c)]; }
};

/// -(1/N) sum_n sum_k y_nk ln(clamp(yhat_nk, 1e-12, 1)). ValidationError unless every label row is one-hot.
double ce_loss(const RowMatrix& probs, const RowMatrix& one_hot);
RowMatrix one_hot(const std::vector<int>& labels, int num_classes);

/// Mean over images of the minimum squared distance between any patch and any same-class prototype.
double cluster_cost(const std::vector<LatentVolume>& latents, const std::vector<int>& labels, const PrototypeBank& bank);
/// Negated mean of the minimum squared distance to any other-class prototype.
double separation_cost(const std::vector<LatentVolume>& latents, const std::vector<int>& labels,
                       const PrototypeBank& bank);
/// Sum of |w| over the head weights plus every extractor weight matrix (biases excluded).
double l1_term(const ClassifierHead& head, const ParamSet& extractor, bool head_only = false);

/// Everything the composite loss needs for one minibatch.
struct LossBatch {
    const std::vector<LatentVolume>* latents = nullptr;
    const std::vector<int>* labels = nullptr;
    const PrototypeBank* bank = nullptr;
    const ClassifierHead* head = nullptr;
    const ParamSet* extractor = nullptr;  // may be null when l1_head_only
};

struct LossOptions {
    LossRegime regime = LossRegime::CIC;
    LossWeights weights;
    ICNNConfig icnn;
    SimilarityConfig similarity;
    bool l1_head_only = false;
};

/// Gradients of the total loss. Only the requested buffers are filled.
struct LossGradients {
    bool want_latents = true;
    bool want_prototypes = true;
    bool want_head = true;
    bool want_extractor_l1 = true;

    std::vector<RowMatrix> latents;  // one (W*H) x D matrix per image
    RowMatrix prototypes;            // P x D
    RowMatrix head_weights;          // K x P
    Vector head_bias;                // K
    ParamSet extractor;              // L1 subgradient only; the rest flows through latents
};

/// Optional per-sample diagnostics from the last evaluation.
struct LossDiagnostics {
    std::vector<ICNNBreakdown> icnn;
    std::vector<int> predictions;
};

LossReport composite_loss(const LossBatch& batch, const LossOptions& opts, LossGradients* grads = nullptr,
                          LossDiagnostics* diag = nullptr);

/// Weighted total for the regime from raw component values.
double regime_total(LossRegime regime, const LossWeights& w, const std::array<double, 5>& components);

}  // namespace protopart
