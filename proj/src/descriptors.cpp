#include "protopart/descriptors.hpp"

#include "protopart/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace protopart {

char to_char(PerturbationKind k) noexcept {
    switch (k) {
    case PerturbationKind::S: return 'S';
    case PerturbationKind::H: return 'H';
    case PerturbationKind::T: return 'T';
    case PerturbationKind::B: return 'B';
    }
    return '?';
}

PerturbationKind parse_perturbation(std::string_view s) {
    if (s == "S" || s == "s" || s == "saturation") return PerturbationKind::S;
    if (s == "H" || s == "h" || s == "hue") return PerturbationKind::H;
    if (s == "T" || s == "t" || s == "texture") return PerturbationKind::T;
    if (s == "B" || s == "b" || s == "brightness") return PerturbationKind::B;
    throw ValidationError("unknown perturbation kind '" + std::string(s) + "' (expected S, H, T or B)");
}

Perturbation Perturbation::standard(PerturbationKind kind) {
    switch (kind) {
    case PerturbationKind::S: return {kind, 0.0};
    case PerturbationKind::H: return {kind, 90.0};
    case PerturbationKind::T: return {kind, 3.0};
    case PerturbationKind::B: return {kind, 0.5};
    }
    return {kind, 0.0};
}

Perturbation Perturbation::identity(PerturbationKind kind) {
    switch (kind) {
    case PerturbationKind::S:
    case PerturbationKind::B: return {kind, 1.0};
    case PerturbationKind::H:
    case PerturbationKind::T: return {kind, 0.0};
    }
    return {kind, 0.0};
}

std::vector<Perturbation> Perturbation::standard_set() {
    return {standard(PerturbationKind::S), standard(PerturbationKind::H), standard(PerturbationKind::T),
            standard(PerturbationKind::B)};
}

bool Perturbation::is_identity() const noexcept {
    const Perturbation id = identity(kind);
    return magnitude == id.magnitude;
}

void Perturbation::validate() const {
    auto fail = [&](const char* range) {
        throw ValidationError(std::string("perturbation ") + to_char(kind) + " magnitude " + std::to_string(magnitude) +
                              " outside " + range);
    };
    if (!std::isfinite(magnitude)) fail("the finite reals");
    switch (kind) {
    case PerturbationKind::S: if (magnitude < 0 || magnitude > 1) fail("[0,1]"); break;
    case PerturbationKind::H: if (magnitude < -360 || magnitude > 360) fail("[-360,360]"); break;
    case PerturbationKind::T: if (magnitude < 0 || magnitude > 20) fail("[0,20]"); break;
    case PerturbationKind::B: if (magnitude < 0 || magnitude > 2) fail("[0,2]"); break;
    }
}

Image perturb(const Image& rgb, const Perturbation& p) {
    p.validate();
    if (rgb.channels != 3) throw DimensionError("perturb expects an RGB image");
    if (p.is_identity()) return rgb;
    if (p.kind == PerturbationKind::T) return clamp01(gaussian_blur(rgb, p.magnitude));

    Image out = rgb;
    const int plane = rgb.plane();
    double* r = out.data.data();
    double* g = r + plane;
    double* b = g + plane;
    for (int i = 0; i < plane; ++i) {
        if (p.kind == PerturbationKind::B) {
            // Scaling I at fixed H and S scales R, G and B by the same factor.
            r[i] *= p.magnitude;
            g[i] *= p.magnitude;
            b[i] *= p.magnitude;
            continue;
        }
        Hsi hsi = rgb_to_hsi(r[i], g[i], b[i]);
        if (p.kind == PerturbationKind::S) {
            if (hsi.s == 0.0) continue;
            hsi.s *= p.magnitude;
        } else {
            hsi.h = std::fmod(hsi.h + p.magnitude + 720.0, 360.0);
        }
        hsi_to_rgb(hsi, r[i], g[i], b[i]);
    }
    return clamp01(std::move(out));
}

LocalDescriptors local_descriptors(const Image& raw, const Model& model, const std::vector<Perturbation>& kinds) {
    LocalDescriptors d;
    d.baseline = model.predict(raw).similarity.pooled;
    d.phi.resize(static_cast<Eigen::Index>(kinds.size()), d.baseline.size());
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        const Vector s_hat = model.predict(perturb(raw, kinds[i])).similarity.pooled;
        d.phi.row(static_cast<Eigen::Index>(i)) = (d.baseline - s_hat).transpose();
    }
    return d;
}

DescriptorReport global_descriptors(const Dataset& data, const Model& model, const std::vector<Perturbation>& kinds,
                                    int jobs) {
    if (data.empty()) throw DomainError("global descriptors need a non-empty image set");
    for (const auto& k : kinds) k.validate();
    std::vector<LocalDescriptors> per(data.size());
    parallel_for(data.size(), jobs, [&](std::size_t n) { per[n] = local_descriptors(data[n].image, model, kinds); });

    const int P = model.bank.size();
    DescriptorReport rep;
    rep.kinds = kinds;
    rep.num_prototypes = P;
    rep.per_class = model.bank.per_class;
    rep.local.assign(kinds.size(), std::vector<std::vector<DescriptorSample>>(P));
    rep.global.assign(kinds.size(), std::vector<std::optional<double>>(P));
    rep.normalized.assign(kinds.size(), std::vector<std::optional<double>>(P));
    for (std::size_t i = 0; i < kinds.size(); ++i)
        for (int p = 0; p < P; ++p) {
            double num = 0.0, den = 0.0;
            for (std::size_t n = 0; n < data.size(); ++n) {
                const double phi = per[n].phi(static_cast<Eigen::Index>(i), p), s = per[n].baseline[p];
                rep.local[i][p].push_back({data[n].id, phi, s});
                num += phi * s;
                den += s;
            }
            if (den > 0.0) {
                rep.global[i][p] = num / den;
            } else {
                rep.warnings.push_back(std::string("prototype ") + std::to_string(p) + " kind " + to_char(kinds[i].kind) +
                                       ": all similarity weights are zero");
            }
        }
    for (int p = 0; p < P; ++p) {
        double mx = 0.0;
        for (std::size_t i = 0; i < kinds.size(); ++i)
            if (rep.global[i][p]) mx = std::max(mx, std::abs(*rep.global[i][p]));
        for (std::size_t i = 0; i < kinds.size(); ++i)
            if (rep.global[i][p]) rep.normalized[i][p] = mx > 0.0 ? *rep.global[i][p] / mx : 0.0;
    }
    return rep;
}

nlohmann::ordered_json to_json(const DescriptorReport& report, bool include_local) {
    using ojson = nlohmann::ordered_json;
    ojson out = ojson::array();
    for (int p = 0; p < report.num_prototypes; ++p)
        for (std::size_t i = 0; i < report.kinds.size(); ++i) {
            const auto idx = PrototypeIndex::from_flat(p, report.per_class);
            ojson rec;
            rec["prototype"] = {idx.m, idx.k};
            rec["kind"] = std::string(1, to_char(report.kinds[i].kind));
            rec["magnitude"] = report.kinds[i].magnitude;
            if (include_local) {
                ojson loc = ojson::array();
                for (const auto& s : report.local[i][p])
                    loc.push_back({{"image_id", s.image_id}, {"value", s.value}, {"weight", s.weight}});
                rec["local"] = std::move(loc);
            }
            rec["global"] = report.global[i][p] ? ojson(*report.global[i][p]) : ojson(nullptr);
            rec["normalized"] = report.normalized[i][p] ? ojson(*report.normalized[i][p]) : ojson(nullptr);
            out.push_back(std::move(rec));
        }
    return out;
}

}  // namespace protopart
