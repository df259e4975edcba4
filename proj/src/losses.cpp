#include "protopart/losses.hpp"

#include "protopart/model.hpp"

#include <algorithm>
#include <cctype>
#include <limits>

namespace protopart {

namespace {

constexpr double kProbFloor = 1e-12;

bool active(LossRegime r, LossComponent c) {
    switch (c) {
    case LossComponent::CE: return true;
    case LossComponent::Cls:
    case LossComponent::Sep:
    case LossComponent::L1: return r == LossRegime::ProtoPNet || r == LossRegime::PPIC;
    case LossComponent::ICNN: return r == LossRegime::CIC || r == LossRegime::PPIC;
    }
    return false;
}

double ce_weight(LossRegime r, const LossWeights& w) {
    return (r == LossRegime::ProtoPNet || r == LossRegime::PPIC) ? w.ce : 1.0;
}

bool is_weight_param(const std::string& name) {
    return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

struct MinHit {
    double d = std::numeric_limits<double>::infinity();
    int p = -1;
    int l = -1;
};

// Minimum over (prototype, patch) with prototypes restricted by class; scan order (p, l) so ties keep the lowest.
MinHit min_distance(const RowMatrix& distances, const PrototypeBank& bank, int label, bool same_class) {
    MinHit hit;
    for (int p = 0; p < bank.size(); ++p) {
        if ((bank.class_of(p) == label) != same_class) continue;
        for (int l = 0; l < distances.cols(); ++l)
            if (distances(p, l) < hit.d) hit = {distances(p, l), p, l};
    }
    return hit;
}

void check_labels(const std::vector<LatentVolume>& latents, const std::vector<int>& labels, const PrototypeBank& bank) {
    if (latents.size() != labels.size()) throw DimensionError("latents and labels differ in length");
    if (latents.empty()) throw DomainError("loss over an empty batch");
    for (int y : labels)
        if (y < 0 || y >= bank.num_classes) throw DomainError("label " + std::to_string(y) + " out of range");
}

RowMatrix all_distances(const LatentVolume& z, const PrototypeBank& bank) {
    RowMatrix d(bank.size(), z.patches());
    for (int p = 0; p < bank.size(); ++p)
        for (int l = 0; l < z.patches(); ++l) d(p, l) = squared_distance(z.patch(l), bank.prototype(p));
    return d;
}

double sgn(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace

std::string_view to_string(LossRegime r) noexcept {
    switch (r) {
    case LossRegime::CE: return "ce";
    case LossRegime::ProtoPNet: return "protopnet";
    case LossRegime::CIC: return "cic";
    case LossRegime::PPIC: return "ppic";
    }
    return "unknown";
}

LossRegime parse_regime(std::string_view s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "ce") return LossRegime::CE;
    if (lower == "protopnet") return LossRegime::ProtoPNet;
    if (lower == "cic") return LossRegime::CIC;
    if (lower == "ppic") return LossRegime::PPIC;
    throw ConfigError("training.loss_regime: unknown regime '" + std::string(s) + "' (expected ce, protopnet, cic, ppic)");
}

void LossWeights::validate() const {
    for (double w : {ce, cls, sep, l1, icnn})
        if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
}

RowMatrix one_hot(const std::vector<int>& labels, int num_classes) {
    RowMatrix y = RowMatrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes) throw DomainError("label out of range");
        y(static_cast<Eigen::Index>(n), labels[n]) = 1.0;
    }
    return y;
}

double ce_loss(const RowMatrix& probs, const RowMatrix& y) {
    if (probs.rows() != y.rows() || probs.cols() != y.cols()) throw DimensionError("ce_loss: shape mismatch");
    if (probs.rows() == 0) throw DomainError("ce_loss: empty batch");
    double acc = 0.0;
    for (Eigen::Index n = 0; n < y.rows(); ++n) {
        int ones = 0;
        for (Eigen::Index k = 0; k < y.cols(); ++k) {
            if (y(n, k) == 1.0) {
                ++ones;
                acc -= std::log(std::clamp(probs(n, k), kProbFloor, 1.0));
            } else if (y(n, k) != 0.0) {
                ones = -1;
                break;
            }
        }
        if (ones != 1) throw ValidationError("ce_loss: label row " + std::to_string(n) + " is not one-hot");
    }
    return acc / static_cast<double>(y.rows());
}

double cluster_cost(const std::vector<LatentVolume>& latents, const std::vector<int>& labels, const PrototypeBank& bank) {
    check_labels(latents, labels, bank);
    double acc = 0.0;
    for (std::size_t n = 0; n < latents.size(); ++n)
        acc += min_distance(all_distances(latents[n], bank), bank, labels[n], true).d;
    return acc / static_cast<double>(latents.size());
}

double separation_cost(const std::vector<LatentVolume>& latents, const std::vector<int>& labels,
                       const PrototypeBank& bank) {
    check_labels(latents, labels, bank);
    double acc = 0.0;
    for (std::size_t n = 0; n < latents.size(); ++n)
        acc += min_distance(all_distances(latents[n], bank), bank, labels[n], false).d;
    return -acc / static_cast<double>(latents.size());
}

double l1_term(const ClassifierHead& head, const ParamSet& extractor, bool head_only) {
    double acc = head.weights.cwiseAbs().sum();
    if (!head_only)
        for (std::size_t i = 0; i < extractor.size(); ++i)
            if (is_weight_param(extractor.names[i])) acc += extractor.values[i].cwiseAbs().sum();
    return acc;
}

double regime_total(LossRegime regime, const LossWeights& w, const std::array<double, 5>& c) {
    const double ce = c[0], cls = c[1], sep = c[2], l1 = c[3], icnn = c[4];
    const double protopnet = w.ce * ce + w.cls * cls + w.sep * sep + w.l1 * l1;
    switch (regime) {
    case LossRegime::CE: return ce;
    case LossRegime::ProtoPNet: return protopnet;
    case LossRegime::CIC: return ce + w.icnn * icnn;
    case LossRegime::PPIC: return protopnet + w.icnn * icnn;
    }
    return ce;
}

LossReport composite_loss(const LossBatch& batch, const LossOptions& opts, LossGradients* grads,
                          LossDiagnostics* diag) {
    const auto& latents = *batch.latents;
    const auto& labels = *batch.labels;
    const auto& bank = *batch.bank;
    const auto& head = *batch.head;
    check_labels(latents, labels, bank);
    if (head.weights.cols() != bank.size()) throw DimensionError("head / prototype count mismatch");

    const std::size_t N = latents.size();
    const double invN = 1.0 / static_cast<double>(N);
    const int P = bank.size();
    const int K = static_cast<int>(head.weights.rows());
    const LossRegime regime = opts.regime;
    const bool use_cls = active(regime, LossComponent::Cls);
    const bool use_icnn = active(regime, LossComponent::ICNN);
    const bool use_l1 = active(regime, LossComponent::L1);
    const double w_ce = ce_weight(regime, opts.weights);

    LossReport rep;
    std::vector<RowMatrix> dist_grad;
    const bool need_dist = grads && (grads->want_latents || grads->want_prototypes);
    if (grads) {
        if (grads->want_latents) {
            grads->latents.resize(N);
            for (std::size_t n = 0; n < N; ++n) grads->latents[n] = RowMatrix::Zero(latents[n].patches(), bank.depth());
        }
        if (grads->want_prototypes) grads->prototypes = RowMatrix::Zero(P, bank.depth());
        if (grads->want_head) {
            grads->head_weights = RowMatrix::Zero(K, P);
            grads->head_bias = Vector::Zero(K);
        }
        if (grads->want_extractor_l1 && batch.extractor) grads->extractor = batch.extractor->zeros_like();
        if (need_dist) dist_grad.resize(N);
    }
    if (diag) {
        diag->icnn.clear();
        diag->predictions.assign(N, 0);
    }

    std::vector<SimilarityResult> sims(N);
    double ce = 0.0, cls = 0.0, sep = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const int y = labels[n];
        sims[n] = similarity_maps(latents[n], bank, opts.similarity);
        const auto& sim = sims[n];
        if (need_dist) dist_grad[n] = RowMatrix::Zero(P, latents[n].patches());

        const Vector logits = head.weights * sim.pooled + head.bias;
        const Vector prob = softmax(logits);
        if (diag) diag->predictions[n] = argmax(prob);
        ce -= std::log(std::clamp(prob[y], kProbFloor, 1.0));

        if (grads && prob[y] >= kProbFloor) {
            Vector dlogit = prob;
            dlogit[y] -= 1.0;
            dlogit *= w_ce * invN;
            if (grads->want_head) {
                grads->head_weights.noalias() += dlogit * sim.pooled.transpose();
                grads->head_bias += dlogit;
            }
            if (need_dist) {
                const Vector ds = head.weights.transpose() * dlogit;
                for (int p = 0; p < P; ++p) {
                    const int l = sim.argmax_patch[p];
                    dist_grad[n](p, l) += ds[p] * similarity_score_derivative(sim.distances(p, l), opts.similarity);
                }
            }
        }

        if (use_cls) {
            const MinHit same = min_distance(sim.distances, bank, y, true);
            const MinHit other = min_distance(sim.distances, bank, y, false);
            cls += same.d;
            sep -= other.d;
            if (need_dist) {
                dist_grad[n](same.p, same.l) += opts.weights.cls * invN;
                if (other.p >= 0) dist_grad[n](other.p, other.l) -= opts.weights.sep * invN;
            }
        }
    }
    rep.components[0] = ce * invN;
    if (use_cls) {
        rep.components[1] = cls * invN;
        rep.components[2] = sep * invN;
    }

    if (use_icnn) {
        std::vector<ICNNSample> samples(N);
        std::vector<int> query(N);
        for (std::size_t n = 0; n < N; ++n) {
            query[n] = icnn_query_patch(latents[n], labels[n], bank);
            samples[n] = {latents[n].patch(query[n]), labels[n]};
        }
        const ICNNBatchResult res = icnn_score(samples, bank, opts.icnn);
        rep.icnn_score = res.score;
        rep.components[4] = icnn_loss(res.score, opts.icnn);
        if (diag) diag->icnn = res.breakdowns;
        if (grads && (grads->want_latents || grads->want_prototypes)) {
            const double g = opts.weights.icnn * icnn_loss_derivative(res.score, opts.icnn) * invN;
            RowMatrix dq_scratch = RowMatrix::Zero(1, bank.depth());
            RowMatrix dp_scratch = RowMatrix::Zero(P, bank.depth());
            for (std::size_t n = 0; n < N; ++n) {
                std::span<double> dq = grads->want_latents
                                           ? std::span<double>(grads->latents[n].row(query[n]).data(), bank.depth())
                                           : std::span<double>(dq_scratch.data(), bank.depth());
                RowMatrix& dp = grads->want_prototypes ? grads->prototypes : dp_scratch;
                icnn_sample_backward(res.contexts[n], res.breakdowns[n], bank, opts.icnn, g, dq, dp);
            }
        }
    }

    if (use_l1) {
        rep.components[3] = l1_term(head, batch.extractor ? *batch.extractor : ParamSet{},
                                    opts.l1_head_only || !batch.extractor);
        if (grads) {
            const double w = opts.weights.l1;
            if (grads->want_head) grads->head_weights += w * head.weights.unaryExpr(&sgn);
            if (grads->want_extractor_l1 && batch.extractor && !opts.l1_head_only)
                for (std::size_t i = 0; i < batch.extractor->size(); ++i)
                    if (is_weight_param(batch.extractor->names[i]))
                        grads->extractor.values[i] = w * batch.extractor->values[i].unaryExpr(&sgn);
        }
    }

    if (need_dist) {
        for (std::size_t n = 0; n < N; ++n)
            for (int p = 0; p < P; ++p)
                for (int l = 0; l < latents[n].patches(); ++l) {
                    const double g = dist_grad[n](p, l);
                    if (g == 0.0) continue;
                    const auto z = latents[n].patch(l);
                    const auto proto = bank.prototype(p);
                    for (int j = 0; j < bank.depth(); ++j) {
                        const double diff = 2.0 * g * (z[j] - proto[j]);
                        if (grads->want_latents) grads->latents[n](l, j) += diff;
                        if (grads->want_prototypes) grads->prototypes(p, j) -= diff;
                    }
                }
    }

    rep.total = regime_total(regime, opts.weights, rep.components);
    return rep;
}

}  // namespace protopart
