#pragma once

#include "protopart/losses.hpp"
#include "protopart/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace protopart {

struct TrainingConfig {
    int cycles = 3;             // N_tc
    int extractor_epochs = 10;  // N_f
    int warmup_epochs = 5;
    int head_epochs = 20;       // N_h
    double learning_rate = 0.01;
    double head_learning_rate = 0.0;  // 0: use learning_rate
    int batch_size = 32;
    LossRegime regime = LossRegime::CIC;
    LossWeights weights;
    ICNNConfig icnn;
    AugmentationPolicy augmentation;
    bool l1_head_only = false;
    double selection_fraction = 0.1;
    std::uint64_t seed = 0;
    int jobs = 1;
    bool log_steps = true;
    bool log_icnn_breakdowns = false;

    void validate() const;
    double head_lr() const noexcept { return head_learning_rate > 0.0 ? head_learning_rate : learning_rate; }
};

/// Backbone from the provider (or seeded Kaiming for simple-cnn when none is given), Kaiming adapter,
/// uniform [0,1] prototypes, class-identity head.
void initialize_model(Model& model, std::uint64_t seed, const WeightProvider* provider = nullptr);

std::vector<LatentVolume> compute_latents(const Model& model, const Dataset& data, int jobs = 1);

/// Replaces every prototype with its nearest same-class training patch tensor.
/// Ties resolve to the lowest (image_id, w, h). ProjectionError if a class has no images.
std::vector<ProjectionRecord> project_prototypes(Model& model, const Dataset& train, int jobs = 1);
/// Same search against precomputed latents (latents[i] belongs to train[i]).
std::vector<ProjectionRecord> project_prototypes(PrototypeBank& bank, const Dataset& train,
                                                 const std::vector<LatentVolume>& latents);

/// Stratified held-out subset: class c contributes round(fraction * n_c) samples (at least one when n_c >= 2).
std::pair<Dataset, Dataset> holdout_split(const Dataset& data, double fraction, std::uint64_t seed);

struct Checkpoint {
    Model model;
    int cycle = 0;
    int phase = 3;
    int epoch = 0;
    double selection_metric = 0.0;
    LossReport report;
};

struct TrainingEvent {
    enum class Kind { EpochEnd, Projection, SelectionImproved } kind = Kind::EpochEnd;
    int cycle = 0;
    int phase = 0;
    int epoch = 0;
    const Dataset* fit = nullptr;  // images the model is trained and projected on
};

using TrainingObserver = std::function<void(const TrainingEvent&, const Model&)>;

struct TrainingResult {
    Model final_model;
    Checkpoint best;
    std::vector<std::string> log;  // JSON lines
};

/// Owns the training state for one run; phases are callable individually.
class Trainer {
public:
    Trainer(Model model, const Dataset& fit, const Dataset& selection, TrainingConfig cfg);

    void phase1(int cycle);
    void phase2(int cycle);
    void phase3(int cycle);
    TrainingResult run(const TrainingObserver& observer = {});

    Model& model() noexcept { return model_; }
    const std::vector<std::string>& log() const noexcept { return log_; }
    void set_observer(TrainingObserver obs) { observer_ = std::move(obs); }
    void set_log_file(const std::filesystem::path& path);

private:
    LossOptions loss_options() const;
    void emit(std::string line);
    std::vector<std::size_t> shuffled_order();
    std::vector<Image> batch_images(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end);
    void notify(TrainingEvent::Kind kind, int cycle, int phase, int epoch);

    Model model_;
    const Dataset& fit_;
    const Dataset& selection_;
    TrainingConfig cfg_;
    std::mt19937_64 shuffle_rng_;
    std::mt19937_64 augment_rng_;
    std::vector<std::string> log_;
    std::optional<std::filesystem::path> log_file_;
    TrainingObserver observer_;
    std::optional<Checkpoint> best_;
    int projections_ = 0;
};

/// Full schedule: N_tc cycles of (phase 1, phase 2, phase 3) with selection after each phase-3 epoch.
/// Whitening statistics are computed on `train` unless the model already carries them.
TrainingResult run_training(const Dataset& train, Model model, const TrainingConfig& cfg,
                            const TrainingObserver& observer = {},
                            const std::optional<std::filesystem::path>& log_path = std::nullopt);

}  // namespace protopart
