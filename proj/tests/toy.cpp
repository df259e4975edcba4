#include "toy.hpp"

#include <algorithm>
#include <cmath>

namespace toy {

ToyData load_toy_data(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.jsonl";
    if (!std::filesystem::exists(manifest_path)) generate_synthetic(dir, kClasses, kPerClass, kSide, kDataSeed);
    ToyData d;
    d.manifest = read_manifest(manifest_path);
    auto split = load_and_split(d.manifest, 0.8, 0, kSide);
    d.train = std::move(split.train);
    d.test = std::move(split.test);
    return d;
}

ModelConfig toy_model_config() {
    ModelConfig c;
    c.backbone = BackboneId::SimpleCnn;
    c.input_side = kSide;
    c.latent_depth = 16;
    c.grid_w = c.grid_h = 7;
    c.num_classes = kClasses;
    c.prototypes_per_class = 3;
    c.simple_channels = {8, 16, 16, 16};
    return c;
}

TrainingConfig toy_training_config(LossRegime regime, std::uint64_t seed) {
    TrainingConfig t;
    t.cycles = 3;
    t.extractor_epochs = 10;
    t.warmup_epochs = 5;
    t.head_epochs = 20;
    t.learning_rate = 0.1;
    t.batch_size = 32;
    t.regime = regime;
    t.seed = seed;
    t.log_steps = false;
    return t;
}

ToyRun run_toy(const ToyData& data, LossRegime regime, std::uint64_t seed, bool check_projection) {
    ToyRun run;
    run.regime = regime;
    run.seed = seed;
    Model model = build_model(toy_model_config());
    model.class_names = data.manifest.class_names;
    initialize_model(model, seed);

    TrainingObserver observer;
    if (check_projection) {
        observer = [&run](const TrainingEvent& ev, const Model& m) {
            if (ev.kind != TrainingEvent::Kind::Projection) return;
            ++run.projection.passes;
            const auto latents = compute_latents(m, *ev.fit);
            for (int p = 0; p < m.bank.size(); ++p) {
                ++run.projection.prototypes_checked;
                const auto proto = m.bank.prototype(p);
                bool hit = false;
                for (const auto& z : latents) {
                    for (int l = 0; l < z.patches() && !hit; ++l) {
                        const auto patch = z.patch(l);
                        hit = std::equal(proto.begin(), proto.end(), patch.begin());
                    }
                    if (hit) break;
                }
                run.projection.bit_identical += hit;
            }
            PrototypeBank again = m.bank;
            project_prototypes(again, *ev.fit, latents);
            for (int p = 0; p < m.bank.size(); ++p)
                run.projection.reprojection_changes += !(again.tensors.row(p) == m.bank.tensors.row(p));
        };
    }
    run.result = run_training(data.train, std::move(model), toy_training_config(regime, seed), observer);

    const Model& best = run.result.best.model;
    std::vector<int> labels;
    for (const auto& s : data.test) {
        run.test_predictions.push_back(best.predict(s.image).predicted_class);
        labels.push_back(s.label);
    }
    run.test_accuracy = accuracy(run.test_predictions, labels, kClasses).plain;
    for (const auto& r : best.bank.projection_meta) run.prototype_source_ids.push_back(r ? r->image_id : "");
    return run;
}

std::vector<double> mean_pairwise_distance(const PrototypeBank& bank) {
    std::vector<double> out;
    for (int k = 0; k < bank.num_classes; ++k) {
        const auto d = prototype_pair_distances(bank, k);
        double s = 0.0;
        for (double v : d) s += v;
        out.push_back(d.empty() ? 0.0 : s / static_cast<double>(d.size()));
    }
    return out;
}

const Sample* find_sample(const Dataset& data, const std::string& id) {
    for (const auto& s : data)
        if (s.id == id) return &s;
    return nullptr;
}

}  // namespace toy
