#include "protopart/training.hpp"

#include "protopart/parallel.hpp"
#include "protopart/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>

namespace protopart {

using ojson = nlohmann::ordered_json;

void TrainingConfig::validate() const {
    if (cycles < 1 || extractor_epochs < 1 || head_epochs < 1 || batch_size < 1)
        throw ConfigError("training: cycles, extractor_epochs, head_epochs and batch_size must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= extractor_epochs)
        throw ConfigError("training.warmup_epochs must lie in [0, extractor_epochs)");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("training.learning_rate must be >= 0");
    if (!(head_learning_rate >= 0.0) || !std::isfinite(head_learning_rate))
        throw ConfigError("training.head_learning_rate must be >= 0");
    if (!(selection_fraction >= 0.0 && selection_fraction < 1.0))
        throw ConfigError("training.selection_fraction must lie in [0,1)");
    if (jobs < 1) throw ConfigError("training.jobs must be >= 1");
    weights.validate();
    augmentation.validate();
}

void initialize_model(Model& model, std::uint64_t seed, const WeightProvider* provider) {
    auto rng = make_rng(seed, 0);
    auto& fx = model.extractor;
    if (provider) {
        fx.load_backbone(*provider);
    } else if (model.config.backbone == BackboneId::SimpleCnn) {
        fx.initialize_backbone(rng);
    } else {
        throw ConfigError(std::string(to_string(model.config.backbone)) +
                          " needs pretrained backbone weights (no weight provider configured)");
    }
    fx.initialize_adapter(rng);
    model.bank = PrototypeBank(model.config.num_classes, model.config.prototypes_per_class, model.config.latent_depth);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index i = 0; i < model.bank.tensors.size(); ++i) model.bank.tensors.data()[i] = unit(rng);
    model.head = ClassifierHead::class_identity(model.config.num_classes, model.config.prototypes_per_class);
}

std::vector<LatentVolume> compute_latents(const Model& model, const Dataset& data, int jobs) {
    std::vector<LatentVolume> out(data.size());
    parallel_for(data.size(), jobs, [&](std::size_t i) { out[i] = model.extract(data[i].image, data[i].id); });
    return out;
}

std::vector<ProjectionRecord> project_prototypes(PrototypeBank& bank, const Dataset& train,
                                                 const std::vector<LatentVolume>& latents) {
    if (latents.size() != train.size()) throw DimensionError("projection: latents / dataset size mismatch");
    std::vector<ProjectionRecord> records(bank.size());
    RowMatrix projected = bank.tensors;
    for (int p = 0; p < bank.size(); ++p) {
        const int k = bank.class_of(p);
        const auto proto = bank.prototype(p);
        bool found = false;
        ProjectionRecord best;
        int best_image = -1, best_patch = -1;
        for (std::size_t n = 0; n < train.size(); ++n) {
            if (train[n].label != k) continue;
            const auto& z = latents[n];
            for (int l = 0; l < z.patches(); ++l) {
                const double d = squared_distance(z.patch(l), proto);
                const auto [w, h] = z.patch_coords(l);
                const bool better =
                    !found || d < best.distance ||
                    (d == best.distance && std::tie(train[n].id, w, h) < std::tie(best.image_id, best.w, best.h));
                if (better) {
                    found = true;
                    best = {train[n].id, w, h, d};
                    best_image = static_cast<int>(n);
                    best_patch = l;
                }
            }
        }
        if (!found)
            throw ProjectionError("projection: class " + std::to_string(k) + " has no training images");
        const auto src = latents[best_image].patch(best_patch);
        for (int j = 0; j < bank.depth(); ++j) projected(p, j) = src[j];
        records[p] = best;
    }
    bank.tensors = projected;
    for (int p = 0; p < bank.size(); ++p) bank.projection_meta[p] = records[p];
    return records;
}

std::vector<ProjectionRecord> project_prototypes(Model& model, const Dataset& train, int jobs) {
    return project_prototypes(model.bank, train, compute_latents(model, train, jobs));
}

std::pair<Dataset, Dataset> holdout_split(const Dataset& data, double fraction, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label].push_back(i);
    auto rng = make_rng(seed, 3);
    std::vector<char> held(data.size(), 0);
    for (auto& [label, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
        if (fraction > 0.0 && n == 0 && idx.size() >= 2) n = 1;
        for (std::size_t j = 0; j < n; ++j) held[idx[j]] = 1;
    }
    Dataset fit, selection;
    for (std::size_t i = 0; i < data.size(); ++i) (held[i] ? selection : fit).push_back(data[i]);
    return {fit, selection};
}

namespace {

ojson loss_json(const LossReport& r) {
    ojson j;
    j["total"] = r.total;
    for (std::size_t c = 0; c < kComponentNames.size(); ++c) j[std::string(kComponentNames[c])] = r.components[c];
    return j;
}

void check_finite(const LossReport& r, int cycle, int phase, int epoch, std::size_t step) {
    bool ok = std::isfinite(r.total);
    for (double c : r.components) ok = ok && std::isfinite(c);
    if (ok) return;
    throw NumericalError("non-finite loss at cycle " + std::to_string(cycle) + " phase " + std::to_string(phase) +
                         " epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " +
                         loss_json(r).dump());
}

struct EpochAccumulator {
    std::array<double, 5> sum{};
    double total = 0.0;
    std::size_t count = 0;

    void add(const LossReport& r, std::size_t n) {
        for (std::size_t c = 0; c < sum.size(); ++c) sum[c] += r.components[c] * static_cast<double>(n);
        total += r.total * static_cast<double>(n);
        count += n;
    }
    LossReport mean() const {
        LossReport r;
        const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
        for (std::size_t c = 0; c < sum.size(); ++c) r.components[c] = sum[c] * inv;
        r.total = total * inv;
        return r;
    }
};

}  // namespace

Trainer::Trainer(Model model, const Dataset& fit, const Dataset& selection, TrainingConfig cfg)
    : model_(std::move(model)), fit_(fit), selection_(selection), cfg_(std::move(cfg)) {
    cfg_.validate();
    cfg_.icnn.validate(model_.config.prototypes_per_class, model_.config.num_prototypes());
    if (fit_.empty()) throw DomainError("training set is empty");
    shuffle_rng_ = make_rng(cfg_.seed, 1);
    augment_rng_ = make_rng(cfg_.seed, 2);
}

void Trainer::set_log_file(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write training log " + path.string());
    log_file_ = path;
    for (const auto& l : log_) out << l << '\n';
}

void Trainer::emit(std::string line) {
    if (log_file_) {
        std::ofstream out(*log_file_, std::ios::app);
        out << line << '\n';
        if (!out) throw IoError("failed appending to training log " + log_file_->string());
    }
    log_.push_back(std::move(line));
}

void Trainer::notify(TrainingEvent::Kind kind, int cycle, int phase, int epoch) {
    if (observer_) observer_(TrainingEvent{kind, cycle, phase, epoch, &fit_}, model_);
}

LossOptions Trainer::loss_options() const {
    LossOptions o;
    o.regime = cfg_.regime;
    o.weights = cfg_.weights;
    o.icnn = cfg_.icnn;
    o.similarity = model_.similarity;
    o.l1_head_only = cfg_.l1_head_only;
    return o;
}

std::vector<std::size_t> Trainer::shuffled_order() {
    std::vector<std::size_t> order(fit_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng_);
    return order;
}

std::vector<Image> Trainer::batch_images(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
    std::vector<Image> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        const Image& raw = fit_[idx[i]].image;
        out.push_back(cfg_.augmentation.enabled ? augment(raw, cfg_.augmentation, augment_rng_) : raw);
    }
    return out;
}

void Trainer::phase1(int cycle) {
    const LossOptions opts = loss_options();
    const double lr = cfg_.learning_rate;
    auto& fx = model_.extractor;
    for (int epoch = 1; epoch <= cfg_.extractor_epochs; ++epoch) {
        const bool warm = epoch <= cfg_.warmup_epochs;
        const auto order = shuffled_order();
        EpochAccumulator acc;
        std::size_t step = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
            const auto images = batch_images(order, begin, end);
            const std::size_t n = images.size();
            std::vector<LatentVolume> latents(n);
            std::vector<FeatureExtractor::Trace> traces(warm ? 0 : n);
            std::vector<int> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = fit_[order[begin + i]].label;
            parallel_for(n, cfg_.jobs, [&](std::size_t i) {
                latents[i] = fx.forward(model_.prepare(images[i]), warm ? nullptr : &traces[i], fit_[order[begin + i]].id);
            });

            LossGradients g;
            g.want_latents = !warm;
            g.want_prototypes = true;
            g.want_head = false;
            g.want_extractor_l1 = !warm;
            LossDiagnostics diag;
            const LossReport rep = composite_loss({&latents, &labels, &model_.bank, &model_.head, &fx.params}, opts, &g,
                                                  cfg_.log_icnn_breakdowns ? &diag : nullptr);
            check_finite(rep, cycle, 1, epoch, step);

            if (!warm) {
                std::vector<ParamSet> per(n);
                parallel_for(n, cfg_.jobs, [&](std::size_t i) {
                    per[i] = fx.params.zeros_like();
                    fx.backward(traces[i], g.latents[i], per[i]);
                });
                ParamSet total = g.extractor.size() ? std::move(g.extractor) : fx.params.zeros_like();
                for (const auto& p : per) total.add_scaled(p, 1.0);
                if (!total.all_finite()) throw NumericalError("non-finite extractor gradient at cycle " +
                                                              std::to_string(cycle) + " epoch " + std::to_string(epoch));
                fx.params.add_scaled(total, -lr);
            }
            model_.bank.tensors -= lr * g.prototypes;
            acc.add(rep, n);

            if (cfg_.log_steps) {
                ojson j{{"type", "step"}, {"cycle", cycle}, {"phase", 1}, {"epoch", epoch}, {"step", step}};
                j["loss"] = loss_json(rep);
                emit(j.dump());
            }
            if (cfg_.log_icnn_breakdowns)
                for (std::size_t i = 0; i < diag.icnn.size(); ++i) {
                    const auto& b = diag.icnn[i];
                    emit(ojson{{"type", "icnn"}, {"cycle", cycle}, {"epoch", epoch}, {"step", step},
                               {"image_id", fit_[order[begin + i]].id}, {"lambda", b.lambda_val}, {"omega", b.omega_val},
                               {"gamma", b.gamma_val}, {"lambda_inter", b.lambda_inter}, {"lambda_intra", b.lambda_intra},
                               {"var_intra", b.var_intra}, {"var_inter", b.var_inter}, {"score", b.score}}
                             .dump());
                }
        }
        ojson j{{"type", "epoch"}, {"cycle", cycle}, {"phase", 1}, {"epoch", epoch}, {"warmup", warm}};
        j["loss"] = loss_json(acc.mean());
        j["selection_metric"] = nullptr;
        emit(j.dump());
        notify(TrainingEvent::Kind::EpochEnd, cycle, 1, epoch);
    }
}

void Trainer::phase2(int cycle) {
    const auto records = project_prototypes(model_, fit_, cfg_.jobs);
    ++projections_;
    ojson j{{"type", "projection"}, {"cycle", cycle}, {"phase", 2}};
    ojson protos = ojson::array();
    for (std::size_t p = 0; p < records.size(); ++p) {
        const auto idx = PrototypeIndex::from_flat(static_cast<int>(p), model_.bank.per_class);
        protos.push_back({{"prototype", {idx.m, idx.k}},
                          {"image_id", records[p].image_id},
                          {"w", records[p].w},
                          {"h", records[p].h},
                          {"distance", records[p].distance}});
    }
    j["prototypes"] = std::move(protos);
    emit(j.dump());
    notify(TrainingEvent::Kind::Projection, cycle, 2, 0);
}

void Trainer::phase3(int cycle) {
    const LossOptions opts = loss_options();
    const double lr = cfg_.head_lr();
    const bool cache = !cfg_.augmentation.enabled;
    const auto fit_latents = cache ? compute_latents(model_, fit_, cfg_.jobs) : std::vector<LatentVolume>{};
    const Dataset& sel_set = selection_.empty() ? fit_ : selection_;
    const auto sel_latents = compute_latents(model_, sel_set, cfg_.jobs);
    std::vector<int> sel_labels;
    for (const auto& s : sel_set) sel_labels.push_back(s.label);

    for (int epoch = 1; epoch <= cfg_.head_epochs; ++epoch) {
        const auto order = shuffled_order();
        EpochAccumulator acc;
        std::size_t step = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
            const std::size_t n = end - begin;
            std::vector<LatentVolume> latents(n);
            std::vector<int> labels(n);
            for (std::size_t i = 0; i < n; ++i) labels[i] = fit_[order[begin + i]].label;
            if (cache) {
                for (std::size_t i = 0; i < n; ++i) latents[i] = fit_latents[order[begin + i]];
            } else {
                const auto images = batch_images(order, begin, end);
                parallel_for(n, cfg_.jobs, [&](std::size_t i) {
                    latents[i] = model_.extractor.forward(model_.prepare(images[i]), nullptr, fit_[order[begin + i]].id);
                });
            }
            LossGradients g;
            g.want_latents = g.want_prototypes = g.want_extractor_l1 = false;
            g.want_head = true;
            const LossReport rep = composite_loss(
                {&latents, &labels, &model_.bank, &model_.head, &model_.extractor.params}, opts, &g);
            check_finite(rep, cycle, 3, epoch, step);
            model_.head.weights -= lr * g.head_weights;
            model_.head.bias -= lr * g.head_bias;
            acc.add(rep, n);
            if (cfg_.log_steps) {
                ojson j{{"type", "step"}, {"cycle", cycle}, {"phase", 3}, {"epoch", epoch}, {"step", step}};
                j["loss"] = loss_json(rep);
                emit(j.dump());
            }
        }
        const LossReport sel = composite_loss(
            {&sel_latents, &sel_labels, &model_.bank, &model_.head, &model_.extractor.params}, opts);
        check_finite(sel, cycle, 3, epoch, step);
        ojson j{{"type", "epoch"}, {"cycle", cycle}, {"phase", 3}, {"epoch", epoch}};
        j["loss"] = loss_json(acc.mean());
        j["selection_metric"] = sel.total;
        emit(j.dump());
        notify(TrainingEvent::Kind::EpochEnd, cycle, 3, epoch);
        if (!best_ || sel.total < best_->selection_metric) {
            best_ = Checkpoint{model_, cycle, 3, epoch, sel.total, sel};
            notify(TrainingEvent::Kind::SelectionImproved, cycle, 3, epoch);
        }
    }
}

TrainingResult Trainer::run(const TrainingObserver& observer) {
    if (observer) observer_ = observer;
    {
        ojson j{{"type", "config"},
                {"regime", std::string(to_string(cfg_.regime))},
                {"seed", cfg_.seed},
                {"cycles", cfg_.cycles},
                {"extractor_epochs", cfg_.extractor_epochs},
                {"warmup_epochs", cfg_.warmup_epochs},
                {"head_epochs", cfg_.head_epochs},
                {"learning_rate", cfg_.learning_rate},
                {"head_learning_rate", cfg_.head_lr()},
                {"batch_size", cfg_.batch_size},
                {"fit_size", fit_.size()},
                {"selection_size", selection_.size()}};
        emit(j.dump());
    }
    for (int c = 1; c <= cfg_.cycles; ++c) {
        phase1(c);
        phase2(c);
        phase3(c);
    }
    emit(ojson{{"type", "selected"},
               {"cycle", best_->cycle},
               {"phase", best_->phase},
               {"epoch", best_->epoch},
               {"selection_metric", best_->selection_metric}}
             .dump());
    return {model_, *best_, log_};
}

TrainingResult run_training(const Dataset& train, Model model, const TrainingConfig& cfg,
                            const TrainingObserver& observer, const std::optional<std::filesystem::path>& log_path) {
    if (train.empty()) throw DomainError("training set is empty");
    if (model.whitening.computed_on.empty()) model.whitening = compute_whitening(train, "train");
    auto [fit, selection] = holdout_split(train, cfg.selection_fraction, cfg.seed);
    Trainer trainer(std::move(model), fit, selection, cfg);
    if (log_path) trainer.set_log_file(*log_path);
    try {
        return trainer.run(observer);
    } catch (const Error& e) {
        ojson j{{"type", "abort"}, {"error", e.what()}};
        if (log_path) {
            std::ofstream out(*log_path, std::ios::app);
            out << j.dump() << '\n';
        }
        throw;
    }
}

}  // namespace protopart
