#include "commands.hpp"

#include "protopart/evaluation.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <set>

namespace protopart::cli {

namespace {

void write_json(const fs::path& path, const ojson& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

std::string join(const std::vector<std::string>& items, const std::string& head) {
    std::string msg = head;
    for (const auto& p : items) msg += "\n  " + p;
    return msg;
}

DatasetManifest checked_manifest(const fs::path& path) {
    DatasetManifest m = read_manifest(path);
    const auto problems = validate_manifest(m, true);
    if (!problems.empty()) throw ValidationError(join(problems, "manifest " + path.string() + " is invalid:"));
    return m;
}

std::unique_ptr<WeightProvider> weight_provider(const RunConfig& cfg) {
    const std::string& w = cfg.backbone_weights;
    if (w.empty()) return nullptr;
    if (w.rfind("random:", 0) == 0) {
        try {
            return std::make_unique<RandomWeightProvider>(std::stoull(w.substr(7)));
        } catch (const std::logic_error&) {
            throw ConfigError("model.backbone_weights: bad seed in '" + w + "'");
        }
    }
    return std::make_unique<ArchiveWeightProvider>(read_archive(cfg.resolve(w)));
}

ojson bbox_json(const BoundingBox& b) { return ojson{{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}; }

ojson prototype_ref(int p, int per_class) {
    const auto idx = PrototypeIndex::from_flat(p, per_class);
    return ojson{idx.m, idx.k};
}

ojson record_json(const std::optional<ProjectionRecord>& r) {
    if (!r) return nullptr;
    return ojson{{"image_id", r->image_id}, {"w", r->w}, {"h", r->h}, {"distance", r->distance}};
}

ojson stats_json(const std::optional<DistanceStats>& s) {
    if (!s) return nullptr;
    return ojson{{"count", s->count}, {"mean", s->mean}, {"variance", s->variance}, {"stddev", s->stddev}};
}

double last_selection_metric(const std::vector<std::string>& log) {
    for (auto it = log.rbegin(); it != log.rend(); ++it) {
        const auto j = nlohmann::json::parse(*it);
        if (j.value("type", "") == "epoch" && j.value("phase", 0) == 3) return j.at("selection_metric").get<double>();
    }
    return 0.0;
}

std::string stem_for(const fs::path& p, std::set<std::string>& used) {
    std::string base = p.stem().string();
    std::string name = base;
    for (int i = 2; used.count(name); ++i) name = base + "_" + std::to_string(i);
    used.insert(name);
    return name;
}

}  // namespace

BoundingBox patch_cell(int w, int h, int grid_w, int grid_h, int side) {
    BoundingBox b;
    b.x0 = w * side / grid_w;
    b.x1 = (w + 1) * side / grid_w - 1;
    b.y0 = h * side / grid_h;
    b.y1 = (h + 1) * side / grid_h - 1;
    return b;
}

SplitResult checkpoint_split(const CheckpointMeta& meta) {
    if (!meta.extra.contains("data")) throw ValidationError("checkpoint does not record its training data");
    const auto& d = meta.extra["data"];
    const DatasetManifest m = checked_manifest(d.at("manifest").get<std::string>());
    return load_and_split(m, d.at("train_fraction").get<double>(), d.at("split_seed").get<std::uint64_t>(),
                          d.at("input_side").get<int>());
}

TrainOutputs cmd_train(const RunConfig& cfg, const std::optional<fs::path>& resume, std::ostream& status) {
    cfg.validate();
    if (cfg.data.manifest.empty()) throw ConfigError("data.manifest must be set for training");
    const fs::path manifest_path = fs::absolute(cfg.resolve(cfg.data.manifest));
    const DatasetManifest manifest = checked_manifest(manifest_path);
    if (static_cast<int>(manifest.class_names.size()) != cfg.model.num_classes)
        throw ConfigError("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the manifest has " +
                          std::to_string(manifest.class_names.size()) + " classes");

    Model model;
    if (resume) {
        LoadedCheckpoint ck = load_checkpoint(*resume);
        if (to_json(ck.model.config) != to_json(cfg.model))
            throw ConfigError("checkpoint " + resume->string() + " was trained with a different model configuration");
        model = std::move(ck.model);
        status << "resuming from " << resume->string() << '\n';
    } else {
        model = build_model(cfg.model);
        const auto provider = weight_provider(cfg);
        initialize_model(model, cfg.training.seed, provider.get());
    }
    model.similarity = cfg.similarity;
    model.class_names = manifest.class_names;

    SplitResult split = load_and_split(manifest, cfg.data.train_fraction, cfg.data.split_seed, cfg.model.input_side);
    for (const auto& w : split.warnings) status << "warning: " << w << '\n';
    status << "training on " << split.train.size() << " images (" << to_string(cfg.training.regime) << ")\n";

    const fs::path out = cfg.output.dir;
    fs::create_directories(out);
    TrainOutputs o;
    o.effective_config = out / "effective_config.json";
    o.log = out / "training_log.jsonl";
    o.best_checkpoint = out / "best.ckpt";
    o.final_checkpoint = out / "final.ckpt";
    o.projection = out / "projection.json";

    RunConfig effective = cfg;
    effective.data.manifest = manifest_path.string();
    effective.base_dir.clear();
    write_json(o.effective_config, to_json(effective));

    TrainingResult result = run_training(split.train, std::move(model), cfg.training, {}, o.log);

    ojson extra{{"data",
                 {{"manifest", manifest_path.string()},
                  {"train_fraction", cfg.data.train_fraction},
                  {"split_seed", cfg.data.split_seed},
                  {"input_side", cfg.model.input_side}}}};
    if (cfg.descriptors.compute_global) {
        const DescriptorReport rep =
            global_descriptors(split.train, result.best.model, cfg.descriptors.kinds, cfg.training.jobs);
        for (const auto& w : rep.warnings) status << "warning: " << w << '\n';
        extra["global_descriptors"] = to_json(rep, false);
    }
    const std::string digest = training_digest(cfg);
    const auto& b = result.best;
    save_checkpoint(o.best_checkpoint, b.model, {b.cycle, b.phase, b.epoch, b.selection_metric, b.report, digest, extra});
    extra.erase("global_descriptors");
    save_checkpoint(o.final_checkpoint, result.final_model,
                    {cfg.training.cycles, 3, cfg.training.head_epochs, last_selection_metric(result.log), {}, digest, extra});

    ojson proj = ojson::array();
    const auto& bank = result.final_model.bank;
    for (int p = 0; p < bank.size(); ++p)
        proj.push_back({{"prototype", prototype_ref(p, bank.per_class)},
                        {"class", result.final_model.class_names[bank.class_of(p)]},
                        {"source", record_json(bank.projection_meta[p])}});
    write_json(o.projection, proj);
    o.selection_metric = b.selection_metric;
    status << "selected cycle " << b.cycle << " epoch " << b.epoch << " selection loss " << b.selection_metric << '\n';
    return o;
}

std::vector<fs::path> cmd_explain(const ExplainOptions& opts) {
    if (opts.images.empty()) throw ValidationError("explain needs at least one image");
    for (const auto& k : opts.kinds) k.validate();
    const LoadedCheckpoint ck = load_checkpoint(opts.checkpoint);
    const Model& model = ck.model;
    const int side = model.similarity.heatmap_side > 0 ? model.similarity.heatmap_side : model.config.input_side;
    const ojson global = ck.meta.extra.contains("global_descriptors") ? ck.meta.extra["global_descriptors"] : ojson(nullptr);

    std::vector<fs::path> dirs;
    std::set<std::string> used;
    for (const auto& image_path : opts.images) {
        const Image raw = load_png(image_path);
        const fs::path dir = opts.output / stem_for(image_path, used);
        fs::create_directories(dir);
        const Prediction pred = model.predict(raw);
        const auto& sim = pred.similarity;

        ojson protos = ojson::array();
        int nearest = 0;
        double nearest_d = std::numeric_limits<double>::infinity();
        for (int p = 0; p < model.bank.size(); ++p) {
            const auto idx = PrototypeIndex::from_flat(p, model.bank.per_class);
            const Heatmap hm = render_heatmap(sim.map_image(p), model.similarity, side, idx);
            const std::string file = "heatmap_m" + std::to_string(idx.m) + "_k" + std::to_string(idx.k) + ".png";
            const HeatmapSidecar sc = export_heatmap(dir / file, hm, sim.pooled[p], model.similarity);
            const auto [w, h] = sim.argmax_coords(p);
            const double d = sim.distances(p, sim.argmax_patch[p]);
            if (d < nearest_d) {
                nearest_d = d;
                nearest = p;
            }
            protos.push_back({{"prototype", {idx.m, idx.k}},
                              {"class", model.class_names[idx.k]},
                              {"pooled_score", sc.pooled_score},
                              {"min_distance", d},
                              {"best_patch", {{"w", w}, {"h", h}}},
                              {"bbox", bbox_json(sc.bbox)},
                              {"heatmap", file}});
        }
        ojson probs = ojson::array();
        for (Eigen::Index k = 0; k < pred.probabilities.size(); ++k) probs.push_back(pred.probabilities[k]);
        ojson logits = ojson::array();
        for (Eigen::Index k = 0; k < pred.logits.size(); ++k) logits.push_back(pred.logits[k]);
        ojson prediction{{"image", image_path.string()},
                         {"predicted_class", pred.predicted_class},
                         {"predicted_label", model.class_names[pred.predicted_class]},
                         {"probabilities", probs},
                         {"logits", logits},
                         {"nearest_prototype",
                          {{"prototype", prototype_ref(nearest, model.bank.per_class)},
                           {"distance", nearest_d},
                           {"source", record_json(model.bank.projection_meta[nearest])}}},
                         {"prototypes", protos}};
        write_json(dir / "prediction.json", prediction);

        const LocalDescriptors local = local_descriptors(raw, model, opts.kinds);
        ojson loc = ojson::array();
        for (int p = 0; p < model.bank.size(); ++p)
            for (std::size_t i = 0; i < opts.kinds.size(); ++i)
                loc.push_back({{"prototype", prototype_ref(p, model.bank.per_class)},
                               {"kind", std::string(1, to_char(opts.kinds[i].kind))},
                               {"magnitude", opts.kinds[i].magnitude},
                               {"baseline", local.baseline[p]},
                               {"value", local.phi(static_cast<Eigen::Index>(i), p)}});
        write_json(dir / "descriptors.json", ojson{{"local", loc}, {"global", global}});
        dirs.push_back(dir);
    }
    return dirs;
}

ojson cmd_eval(const EvalOptions& opts) {
    const LoadedCheckpoint ck = load_checkpoint(opts.checkpoint);
    const Model& model = ck.model;
    const int K = model.config.num_classes;

    std::optional<SplitResult> split;
    auto training_split = [&]() -> SplitResult& {
        if (!split) split = checkpoint_split(ck.meta);
        return *split;
    };
    Dataset test;
    if (opts.test_manifest) {
        const DatasetManifest m = checked_manifest(*opts.test_manifest);
        if (m.class_names != model.class_names)
            throw ValidationError("test manifest classes differ from the checkpoint's class names");
        test = load_and_split(m, 1.0, 0, model.config.input_side).train;
    } else {
        test = training_split().test;
    }
    if (test.empty()) throw DomainError("evaluation set is empty");

    std::vector<int> labels, preds;
    for (const auto& s : test) {
        labels.push_back(s.label);
        preds.push_back(model.predict(s.image).predicted_class);
    }
    const AccuracyReport acc = accuracy(preds, labels, K);

    fs::create_directories(opts.output);
    const auto rows = export_embeddings(test, model, opts.jobs);
    write_embeddings_tsv(opts.output / "embeddings.tsv", rows);
    std::vector<int> row_labels;
    for (const auto& r : rows) row_labels.push_back(r.label);
    const auto& ev = opts.evaluation;
    const KnnResult knn = knn_eval(embedding_matrix(rows), row_labels, ev.knn_k, ev.knn_folds, ev.knn_seed);

    const Dataset& train = training_split().train;
    std::vector<const Image*> proto_images, train_images;
    for (const auto& r : model.bank.projection_meta) {
        if (!r) throw ValidationError("prototype without projection metadata; run a projection first");
        const Sample* s = nullptr;
        for (const auto& t : train)
            if (t.id == r->image_id) s = &t;
        if (!s) throw ValidationError("prototype source image " + r->image_id + " is not in the training split");
        proto_images.push_back(&s->image);
    }
    for (const auto& t : train) train_images.push_back(&t.image);
    const RandomConvEmbedder embedder(ev.embedder_seed);
    const double fid =
        frechet_distance(embed_images(embedder, proto_images, opts.jobs), embed_images(embedder, train_images, opts.jobs));

    const auto clusters = cluster_statistics(compute_latents(model, train, opts.jobs),
                                             [&] {
                                                 std::vector<int> l;
                                                 for (const auto& t : train) l.push_back(t.label);
                                                 return l;
                                             }(),
                                             model.bank);

    ojson per_class = ojson::array();
    for (int k = 0; k < K; ++k)
        per_class.push_back({{"class", model.class_names[k]}, {"accuracy", acc.per_class[k]}, {"support", acc.support[k]}});
    ojson cstats = ojson::array();
    for (const auto& c : clusters)
        cstats.push_back({{"class", model.class_names[c.class_index]},
                          {"patch_to_pp", stats_json(c.patch_to_pp)},
                          {"pp_to_pp", stats_json(c.pp_to_pp)}});
    ojson report{{"per_class", per_class},
                 {"weighted", acc.weighted},
                 {"confusion", acc.confusion},
                 {"knn",
                  {{"k", ev.knn_k},
                   {"folds", ev.knn_folds},
                   {"mean", knn.mean},
                   {"stddev", knn.stddev},
                   {"fold_accuracy", knn.fold_accuracy}}},
                 {"fid",
                  {{"value", fid},
                   {"prototype_images", proto_images.size()},
                   {"reference_images", train_images.size()},
                   {"embedder_seed", ev.embedder_seed}}},
                 {"cluster_stats", cstats}};
    write_json(opts.output / "eval_report.json", report);
    return report;
}

ojson cmd_prototypes(const fs::path& checkpoint, const fs::path& output) {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const Model& model = ck.model;
    const Dataset train = checkpoint_split(ck.meta).train;
    const auto& bank = model.bank;
    fs::create_directories(output);

    ojson gallery = ojson::array();
    for (int p = 0; p < bank.size(); ++p) {
        const auto& r = bank.projection_meta[p];
        if (!r) throw ValidationError("prototype without projection metadata; run a projection first");
        const Sample* src = nullptr;
        for (const auto& t : train)
            if (t.id == r->image_id) src = &t;
        if (!src) throw ValidationError("prototype source image " + r->image_id + " is not in the training split");
        const auto idx = PrototypeIndex::from_flat(p, bank.per_class);
        const BoundingBox cell = patch_cell(r->w, r->h, model.config.grid_w, model.config.grid_h, src->image.rows);
        const std::string file = "proto_m" + std::to_string(idx.m) + "_k" + std::to_string(idx.k) + ".png";
        save_png(output / file, crop(src->image, cell.y0, cell.x0, cell.y1 - cell.y0 + 1, cell.x1 - cell.x0 + 1));
        gallery.push_back({{"prototype", {idx.m, idx.k}},
                           {"class", model.class_names[idx.k]},
                           {"file", file},
                           {"source", record_json(r)},
                           {"crop", bbox_json(cell)}});
    }
    ojson pairwise = ojson::array();
    for (int k = 0; k < bank.num_classes; ++k) {
        const auto d = prototype_pair_distances(bank, k);
        const auto s = distance_stats(d);
        if (!s) continue;
        pairwise.push_back({{"class", model.class_names[k]}, {"distances", d}, {"stats", stats_json(s)}});
    }
    ojson out{{"prototypes", gallery}, {"pairwise", pairwise}};
    write_json(output / "gallery.json", out);
    return out;
}

fs::path cmd_synth(const fs::path& output, int classes, int per_class, int side, std::uint64_t seed) {
    if (per_class < 1) throw ConfigError("synth: per-class count must be >= 1");
    generate_synthetic(output, classes, per_class, side, seed);
    return output / "manifest.jsonl";
}

std::vector<std::string> cmd_validate_manifest(const fs::path& manifest, bool check_files) {
    return validate_manifest(read_manifest(manifest), check_files);
}

namespace {

std::vector<Perturbation> parse_kinds(const std::string& spec) {
    std::vector<Perturbation> out;
    std::size_t start = 0;
    while (start <= spec.size()) {
        const auto end = std::min(spec.find(',', start), spec.size());
        const std::string item = spec.substr(start, end - start);
        if (!item.empty()) {
            const auto colon = item.find(':');
            const auto kind = parse_perturbation(item.substr(0, colon));
            if (colon == std::string::npos) {
                out.push_back(Perturbation::standard(kind));
            } else {
                try {
                    out.push_back({kind, std::stod(item.substr(colon + 1))});
                } catch (const std::logic_error&) {
                    throw ValidationError("bad perturbation magnitude in '" + item + "'");
                }
            }
            out.back().validate();
        }
        start = end + 1;
    }
    if (out.empty()) throw ValidationError("no perturbation kinds given");
    return out;
}

}  // namespace

int run(int argc, char** argv, char** envp) {
    CLI::App app{"Prototypical part networks with ICNN training, explanations and evaluation"};
    app.require_subcommand(1);

    std::optional<std::string> config_path, output, checkpoint;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    bool print_config = false;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--seed", seed, "Override training.seed");
    app.add_option("--jobs", jobs, "Parallelism cap")->check(CLI::PositiveNumber);
    app.add_option("--output", output, "Output directory");
    app.add_option("--checkpoint", checkpoint, "Checkpoint to load (train: warm start)");
    app.add_flag("--print-config", print_config, "Print the effective configuration and exit");

    auto* train = app.add_subcommand("train", "Train a model");
    auto* explain = app.add_subcommand("explain", "Explain predictions for images");
    std::vector<std::string> images;
    std::string kinds = "S,H,T,B";
    explain->add_option("images", images, "PNG images")->required();
    explain->add_option("--kinds", kinds, "Perturbations, e.g. S,H:45,T:2,B:0.5");
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::optional<std::string> test_manifest;
    eval->add_option("--manifest", test_manifest, "Test manifest (default: the training split's test part)");
    auto* protos = app.add_subcommand("prototypes", "Write the prototype gallery");
    auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
    int classes = 6, per_class = 200, side = 28;
    synth->add_option("--classes", classes, "Class count");
    synth->add_option("--per-class", per_class, "Images per class");
    synth->add_option("--side", side, "Image side in pixels");
    auto* validate = app.add_subcommand("validate-manifest", "Check a dataset manifest");
    std::string manifest;
    bool no_files = false;
    validate->add_option("manifest", manifest, "Manifest path")->required();
    validate->add_flag("--no-file-check", no_files, "Skip image existence checks");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = load_run_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt, envp);
        if (seed) cfg.training.seed = *seed;
        if (jobs) cfg.training.jobs = *jobs;
        if (output) cfg.output.dir = *output;
        if (print_config) {
            std::cout << to_json(cfg).dump(2) << '\n';
            return 0;
        }
        auto need_checkpoint = [&]() -> fs::path {
            if (!checkpoint) throw ConfigError("--checkpoint is required for this command");
            return *checkpoint;
        };
        const fs::path out_dir = cfg.output.dir;

        if (train->parsed()) {
            const auto problems = cfg.problems();
            if (!problems.empty()) throw ConfigError(join(problems, "invalid configuration:"));
            cmd_train(cfg, checkpoint ? std::optional<fs::path>(*checkpoint) : std::nullopt, std::cerr);
        } else if (explain->parsed()) {
            ExplainOptions o;
            o.checkpoint = need_checkpoint();
            for (const auto& i : images) o.images.emplace_back(i);
            o.kinds = parse_kinds(kinds);
            o.output = output ? out_dir : out_dir / "explain";
            const auto dirs = cmd_explain(o);
            std::cerr << "wrote " << dirs.size() << " explanation bundles under " << o.output.string() << '\n';
        } else if (eval->parsed()) {
            EvalOptions o;
            o.checkpoint = need_checkpoint();
            if (test_manifest) o.test_manifest = *test_manifest;
            o.output = output ? out_dir : out_dir / "eval";
            o.evaluation = cfg.evaluation;
            o.jobs = cfg.training.jobs;
            const ojson report = cmd_eval(o);
            std::cout << report.dump(2) << '\n';
        } else if (protos->parsed()) {
            const fs::path dir = output ? out_dir : out_dir / "prototypes";
            cmd_prototypes(need_checkpoint(), dir);
            std::cerr << "wrote prototype gallery to " << dir.string() << '\n';
        } else if (synth->parsed()) {
            const auto path = cmd_synth(out_dir, classes, per_class, side, cfg.training.seed);
            std::cout << path.string() << '\n';
        } else if (validate->parsed()) {
            const auto problems = cmd_validate_manifest(manifest, !no_files);
            for (const auto& p : problems) std::cout << p << '\n';
            if (!problems.empty()) return 2;
            std::cout << "ok\n";
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace protopart::cli
