#include "protopart/icnn.hpp"

#include "protopart/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace protopart {

void ICNNConfig::validate(int per_class, int num_prototypes) const {
    const int k = per_class > 0 ? resolved_k(per_class) : neighborhood_size;
    if (neighborhood_size != 0 && neighborhood_size < 2) throw ConfigError("icnn.neighborhood_size must be >= 2");
    if (num_prototypes > 0 && k > num_prototypes)
        throw ConfigError("icnn.neighborhood_size " + std::to_string(k) + " exceeds the " +
                          std::to_string(num_prototypes) + " prototypes");
    if (!(log_floor > 0.0 && log_floor < 1.0)) throw ConfigError("icnn.log_floor must lie in (0,1)");
    if (!std::isfinite(p) || !std::isfinite(q) || !std::isfinite(r) || p < 0 || q < 0 || r < 0)
        throw ConfigError("icnn exponents p, q, r must be finite and >= 0");
}

int NeighborhoodContext::position(int p) const noexcept {
    for (std::size_t i = 0; i < members.size(); ++i)
        if (members[i] == p) return static_cast<int>(i);
    return -1;
}

double NeighborhoodContext::distance_of(int p) const {
    const int i = position(p);
    if (i < 0) throw DomainError("prototype " + std::to_string(p) + " is outside the neighborhood");
    return distances[i];
}

NeighborhoodContext build_neighborhood(std::span<const double> query, int query_class, const PrototypeBank& bank,
                                       const ICNNConfig& cfg) {
    const int P = bank.size();
    const int k = cfg.resolved_k(bank.per_class);
    if (k > P) throw ConfigError("neighborhood size " + std::to_string(k) + " exceeds P = " + std::to_string(P));
    if (k < 1) throw ConfigError("neighborhood size must be >= 1");

    std::vector<double> d(P);
    for (int p = 0; p < P; ++p) d[p] = squared_distance(query, bank.prototype(p));
    std::vector<int> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return d[a] < d[b]; });

    NeighborhoodContext ctx;
    ctx.query.assign(query.begin(), query.end());
    ctx.query_class = query_class;
    ctx.members.assign(order.begin(), order.begin() + k);
    for (int p : ctx.members) {
        ctx.distances.push_back(d[p]);
        (bank.class_of(p) == query_class ? ctx.intra : ctx.inter).push_back(p);
    }
    ctx.theta = ctx.distances.front();
    ctx.alpha = ctx.distances.back();
    return ctx;
}

double normalized_distance(double d, double theta, double alpha) noexcept {
    if (alpha == theta) return 0.0;
    return (d - theta) / (alpha - theta);
}

double normalized_distance(const NeighborhoodContext& ctx, int p) {
    return normalized_distance(ctx.distance_of(p), ctx.theta, ctx.alpha);
}

namespace {

std::vector<double> h_values(const NeighborhoodContext& ctx, const std::vector<int>& set) {
    std::vector<double> h;
    h.reserve(set.size());
    for (int p : set) h.push_back(normalized_distance(ctx, p));
    return h;
}

double population_variance(const std::vector<double>& v, double centre) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - centre) * (x - centre);
    return acc / static_cast<double>(v.size());
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pow_safe(double base, double e) { return e == 1.0 ? base : std::pow(base, e); }

}  // namespace

LambdaTerms lambda_terms(const NeighborhoodContext& ctx) {
    LambdaTerms t;
    for (double h : h_values(ctx, ctx.inter)) t.inter += h;
    for (double h : h_values(ctx, ctx.intra)) t.intra += 1.0 - h;
    return t;
}

double lambda_fn(const NeighborhoodContext& ctx) {
    const LambdaTerms t = lambda_terms(ctx);
    const double a = ctx.inter.empty() ? 1.0 : t.inter / static_cast<double>(ctx.inter.size());
    const double b = ctx.intra.empty() ? 0.0 : t.intra / static_cast<double>(ctx.intra.size());
    return 0.5 * (a + b);
}

VarianceTerms variance_terms(const NeighborhoodContext& ctx) {
    const auto hi = h_values(ctx, ctx.intra);
    const auto he = h_values(ctx, ctx.inter);
    VarianceTerms v;
    v.intra = population_variance(hi, mean_of(hi));
    // Centred on lambda_inter / |inter| as written, which is the same mean.
    const double centre = he.empty() ? 0.0 : lambda_terms(ctx).inter / static_cast<double>(he.size());
    v.inter = population_variance(he, centre);
    return v;
}

double omega_fn(const NeighborhoodContext& ctx) {
    const VarianceTerms v = variance_terms(ctx);
    return v.intra + v.inter;
}

double gamma_fn(const NeighborhoodContext& ctx) {
    const std::size_t total = ctx.intra.size() + ctx.inter.size();
    return total == 0 ? 0.0 : static_cast<double>(ctx.intra.size()) / static_cast<double>(total);
}

ICNNBreakdown icnn_breakdown(const NeighborhoodContext& ctx, const ICNNConfig& cfg) {
    ICNNBreakdown b;
    const LambdaTerms lt = lambda_terms(ctx);
    const VarianceTerms vt = variance_terms(ctx);
    b.lambda_inter = lt.inter;
    b.lambda_intra = lt.intra;
    b.var_intra = vt.intra;
    b.var_inter = vt.inter;
    b.lambda_val = lambda_fn(ctx);
    b.omega_val = vt.intra + vt.inter;
    b.gamma_val = gamma_fn(ctx);
    b.intra_count = static_cast<int>(ctx.intra.size());
    b.inter_count = static_cast<int>(ctx.inter.size());
    b.score = pow_safe(b.lambda_val, cfg.p) * pow_safe(b.omega_val, cfg.q) * pow_safe(b.gamma_val, cfg.r);
    return b;
}

ICNNBatchResult icnn_score(const std::vector<ICNNSample>& batch, const PrototypeBank& bank, const ICNNConfig& cfg) {
    if (batch.empty()) throw DomainError("icnn_score: empty batch");
    ICNNBatchResult res;
    res.breakdowns.reserve(batch.size());
    res.contexts.reserve(batch.size());
    // Neumaier summation keeps the mean independent of accumulation order to ~1 ulp.
    double sum = 0.0, comp = 0.0;
    for (const auto& s : batch) {
        res.contexts.push_back(build_neighborhood(s.query, s.label, bank, cfg));
        res.breakdowns.push_back(icnn_breakdown(res.contexts.back(), cfg));
        const double x = res.breakdowns.back().score;
        const double t = sum + x;
        comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
        sum = t;
    }
    res.score = (sum + comp) / static_cast<double>(batch.size());
    return res;
}

double icnn_loss(double score, const ICNNConfig& cfg) { return -std::log(std::max(score, cfg.log_floor)); }

double icnn_loss_derivative(double score, const ICNNConfig& cfg) {
    return score > cfg.log_floor ? -1.0 / score : 0.0;
}

void icnn_sample_backward(const NeighborhoodContext& ctx, const ICNNBreakdown& b, const PrototypeBank& bank,
                          const ICNNConfig& cfg, double g, std::span<double> d_query, RowMatrix& d_prototypes) {
    const double R = ctx.alpha - ctx.theta;
    if (g == 0.0 || R == 0.0) return;

    auto dpow = [](double base, double e) {
        if (e == 1.0) return 1.0;
        if (base == 0.0) return 0.0;  // subgradient choice where e < 1 diverges
        return e * std::pow(base, e - 1.0);
    };
    const double L = b.lambda_val, O = b.omega_val, G = b.gamma_val;
    const double dS_dL = dpow(L, cfg.p) * pow_safe(O, cfg.q) * pow_safe(G, cfg.r);
    const double dS_dO = pow_safe(L, cfg.p) * dpow(O, cfg.q) * pow_safe(G, cfg.r);

    const int k = static_cast<int>(ctx.members.size());
    std::vector<double> h(k), gh(k, 0.0);
    for (int i = 0; i < k; ++i) h[i] = (ctx.distances[i] - ctx.theta) / R;

    const double na = static_cast<double>(ctx.intra.size());
    const double ne = static_cast<double>(ctx.inter.size());
    double mean_intra = 0.0, mean_inter = 0.0;
    for (int i = 0; i < k; ++i) (bank.class_of(ctx.members[i]) == ctx.query_class ? mean_intra : mean_inter) += h[i];
    if (na > 0) mean_intra /= na;
    if (ne > 0) mean_inter /= ne;

    for (int i = 0; i < k; ++i) {
        if (bank.class_of(ctx.members[i]) == ctx.query_class) {
            gh[i] = dS_dL * (-0.5 / na) + dS_dO * (2.0 / na) * (h[i] - mean_intra);
        } else {
            gh[i] = dS_dL * (0.5 / ne) + dS_dO * (2.0 / ne) * (h[i] - mean_inter);
        }
    }

    // h_i = (d_i - theta)/R with theta = d_first, alpha = d_last.
    std::vector<double> gd(k, 0.0);
    double g_theta = 0.0, g_alpha = 0.0;
    for (int i = 0; i < k; ++i) {
        gd[i] += gh[i] / R;
        g_theta += gh[i] * (h[i] - 1.0) / R;
        g_alpha += gh[i] * (-h[i]) / R;
    }
    gd.front() += g_theta;
    gd.back() += g_alpha;

    const int D = static_cast<int>(ctx.query.size());
    for (int i = 0; i < k; ++i) {
        const double coeff = 2.0 * g * gd[i];
        if (coeff == 0.0) continue;
        const int p = ctx.members[i];
        const auto proto = bank.prototype(p);
        for (int j = 0; j < D; ++j) {
            const double diff = ctx.query[j] - proto[j];
            d_query[j] += coeff * diff;
            d_prototypes(p, j) -= coeff * diff;
        }
    }
}

int icnn_query_patch(const LatentVolume& latent, int label, const PrototypeBank& bank) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int l = 0; l < latent.patches(); ++l)
        for (int m = 0; m < bank.per_class; ++m) {
            const double d = squared_distance(latent.patch(l), bank.prototype(m + label * bank.per_class));
            if (d < best_d) {
                best_d = d;
                best = l;
            }
        }
    return best;
}

}  // namespace protopart
