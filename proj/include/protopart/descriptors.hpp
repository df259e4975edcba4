#pragma once

#include "protopart/model.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace protopart {

enum class PerturbationKind { S, H, T, B };

char to_char(PerturbationKind k) noexcept;
PerturbationKind parse_perturbation(std::string_view s);

struct Perturbation {
    PerturbationKind kind = PerturbationKind::S;
    double magnitude = 0.0;

    /// S: saturation factor 0 (full desaturation); H: hue rotation 90 deg;
    /// T: Gaussian blur sigma 3 px; B: intensity factor 0.5.
    static Perturbation standard(PerturbationKind kind);
    /// Magnitude leaving every image unchanged (S 1, H 0, T 0, B 1).
    static Perturbation identity(PerturbationKind kind);
    static std::vector<Perturbation> standard_set();

    bool is_identity() const noexcept;
    /// Ranges: S in [0,1], H in [-360,360], T in [0,20], B in [0,2]; ValidationError otherwise.
    void validate() const;
};

/// Single-attribute photometric change in HSI space (blur for T); output clamped to [0,1].
Image perturb(const Image& rgb, const Perturbation& p);

struct LocalDescriptors {
    Vector baseline;  // s_{m,k} on the clean image, length P
    RowMatrix phi;    // kinds x P, s - s_hat
};

LocalDescriptors local_descriptors(const Image& raw, const Model& model, const std::vector<Perturbation>& kinds);

struct DescriptorSample {
    std::string image_id;
    double value = 0.0;   // Phi_local
    double weight = 0.0;  // s_{m,k}
};

struct DescriptorReport {
    std::vector<Perturbation> kinds;
    int num_prototypes = 0;
    int per_class = 1;
    // Indexed [kind][prototype].
    std::vector<std::vector<std::vector<DescriptorSample>>> local;
    std::vector<std::vector<std::optional<double>>> global;
    std::vector<std::vector<std::optional<double>>> normalized;  // global / max_i |global_i| per prototype
    std::vector<std::string> warnings;
};

/// Similarity-weighted mean of the local descriptors over the set; an entry whose weights sum to zero is null.
DescriptorReport global_descriptors(const Dataset& data, const Model& model, const std::vector<Perturbation>& kinds,
                                    int jobs = 1);

/// Records {prototype: [m,k], kind, local: [{image_id, value, weight}], global, normalized}.
nlohmann::ordered_json to_json(const DescriptorReport& report, bool include_local = true);

}  // namespace protopart
