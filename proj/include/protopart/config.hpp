#pragma once

#include "protopart/descriptors.hpp"
#include "protopart/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace protopart {

struct DataConfig {
    std::string manifest;       // relative paths resolve against the config file directory
    std::string test_manifest;  // optional: evaluate on this instead of the split's test part
    double train_fraction = 0.8;
    std::uint64_t split_seed = 0;
};

struct OutputConfig {
    std::string dir = "run";
};

struct EvaluationConfig {
    int knn_k = 5;
    int knn_folds = 5;
    std::uint64_t knn_seed = 0;
    std::uint64_t embedder_seed = 0;
};

struct DescriptorConfig {
    std::vector<Perturbation> kinds = Perturbation::standard_set();
    bool compute_global = true;  // global descriptors stored in the checkpoint after training
};

struct RunConfig {
    ModelConfig model;
    // Backbone weights: empty (seeded init, simple-cnn only), "random:<seed>", or a checkpoint path.
    std::string backbone_weights;
    TrainingConfig training;
    SimilarityConfig similarity;
    DataConfig data;
    OutputConfig output;
    EvaluationConfig evaluation;
    DescriptorConfig descriptors;
    std::filesystem::path base_dir;  // directory of the config file

    /// Every violated invariant, one message per problem.
    std::vector<std::string> problems() const;
    /// Throws ConfigError listing every problem.
    void validate() const;
    std::filesystem::path resolve(const std::string& p) const;
};

using ojson = nlohmann::ordered_json;

ojson to_json(const ModelConfig& c);
ojson to_json(const SimilarityConfig& c);
ojson to_json(const RunConfig& c);

/// Parses a (possibly partial) config over the defaults. Unknown keys and type errors are
/// collected; ConfigError lists all of them.
RunConfig run_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
SimilarityConfig similarity_config_from_json(const nlohmann::json& j);

inline constexpr const char* kEnvPrefix = "PROTOPART_";
/// Applies PROTOPART_<SECTION>__<KEY>=value overrides (value parsed as JSON, else taken as a string).
void apply_env_overrides(nlohmann::json& j, char** envp);

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, char** envp = nullptr);

std::uint64_t fnv1a64(std::string_view s) noexcept;
std::string training_digest(const RunConfig& c);

}  // namespace protopart
