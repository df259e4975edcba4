#pragma once

#include "protopart/data.hpp"
#include "protopart/layers.hpp"
#include "protopart/similarity.hpp"
#include "protopart/types.hpp"

#include <memory>
#include <optional>
#include <string_view>

namespace protopart {

enum class BackboneId { SimpleCnn, Vgg16Like, Resnet50Like, Densenet201Like };

std::string_view to_string(BackboneId id) noexcept;
BackboneId parse_backbone(std::string_view s);

struct ModelConfig {
    BackboneId backbone = BackboneId::SimpleCnn;
    int input_side = 224;
    int latent_depth = 128;  // D
    int grid_w = 7;          // W
    int grid_h = 7;          // H
    int num_classes = 6;     // K
    int prototypes_per_class = 3;  // M
    // simple-cnn: output channels of the four conv blocks.
    std::vector<int> simple_channels{32, 64, 128, 128};
    // Channel multiplier applied to the vgg/resnet/densenet-like topologies.
    double width_scale = 1.0;

    int num_prototypes() const noexcept { return num_classes * prototypes_per_class; }
    void validate() const;
};

/// Source of pretrained parameters, looked up by parameter name.
class WeightProvider {
public:
    virtual ~WeightProvider() = default;
    virtual std::optional<RowMatrix> lookup(const std::string& name, int rows, int cols) const = 0;
};

/// Seeded Kaiming-normal weights for every requested parameter.
class RandomWeightProvider final : public WeightProvider {
public:
    explicit RandomWeightProvider(std::uint64_t seed) : seed_(seed) {}
    std::optional<RowMatrix> lookup(const std::string& name, int rows, int cols) const override;

private:
    std::uint64_t seed_;
};

/// Backbone w_base followed by the two 1x1 adapter convolutions w_add
/// (conv-relu-conv-sigmoid), producing a D-channel W x H grid.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    /// Builds the architecture with zeroed parameters; throws ConfigError if the
    /// backbone output grid does not equal (W, H).
    explicit FeatureExtractor(const ModelConfig& cfg);

    struct Trace {
        LayerCache backbone;
        LayerCache adapter;
    };

    LatentVolume forward(const Image& whitened, Trace* trace = nullptr, std::string image_id = {}) const;
    /// Accumulates parameter gradients for dL/dZ (rows = patches, as in LatentVolume).
    void backward(const Trace& trace, const RowMatrix& d_latent, ParamSet& grads) const;

    ParamSet params;
    std::size_t backbone_param_count() const noexcept { return backbone_params_; }
    bool is_backbone_param(std::size_t i) const noexcept { return i < backbone_params_; }

    /// Kaiming initialization of the adapter only.
    void initialize_adapter(std::mt19937_64& rng);
    /// Kaiming initialization of the backbone (used for simple-cnn trained from scratch).
    void initialize_backbone(std::mt19937_64& rng);
    /// Copies every backbone parameter from the provider; throws ConfigError naming the first missing one.
    void load_backbone(const WeightProvider& provider);

    Shape backbone_output_shape() const noexcept { return backbone_out_; }
    int grid_w() const noexcept { return grid_w_; }
    int grid_h() const noexcept { return grid_h_; }

private:
    std::shared_ptr<const Sequential> backbone_;
    std::shared_ptr<const Sequential> adapter_;
    std::size_t backbone_params_ = 0;
    Shape input_{};
    Shape backbone_out_{};
    int grid_w_ = 0;
    int grid_h_ = 0;
};

struct Prediction {
    Vector logits;
    Vector probabilities;
    int predicted_class = 0;
    SimilarityResult similarity;
};

/// Numerically stable softmax.
Vector softmax(const Vector& logits);
/// Index of the maximum; ties resolve to the lowest index.
int argmax(const Vector& v);

/// Similarity maps, max-pooling over patches, logits = W_h s + b_h, softmax.
Prediction classify(const LatentVolume& latent, const PrototypeBank& bank, const ClassifierHead& head,
                    const SimilarityConfig& cfg = {});

/// Full model state: everything needed for inference and explanation.
struct Model {
    ModelConfig config;
    SimilarityConfig similarity;
    FeatureExtractor extractor;
    PrototypeBank bank;
    ClassifierHead head;
    WhiteningStats whitening;
    std::vector<std::string> class_names;

    /// Resize to the input side and whiten.
    Image prepare(const Image& raw) const;
    LatentVolume extract(const Image& raw, std::string image_id = {}) const;
    Prediction predict(const Image& raw) const;
};

/// Architecture for a fresh model with zeroed parameters.
Model build_model(const ModelConfig& cfg);

}  // namespace protopart
