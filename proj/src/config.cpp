#include "protopart/config.hpp"

#include <cstring>
#include <fstream>
#include <set>

namespace protopart {

using nlohmann::json;

namespace {

class Reader {
public:
    Reader(const json* j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (j_ && !j_->is_object()) {
            errors_.push_back(path_ + ": expected an object");
            j_ = nullptr;
        }
    }
    ~Reader() {
        if (!j_) return;
        for (const auto& [key, value] : j_->items())
            if (!seen_.count(key)) errors_.push_back(name(key) + ": unknown key");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_ || !j_->contains(key)) return;
        try {
            out = (*j_)[key].get<T>();
        } catch (const json::exception&) {
            errors_.push_back(name(key) + ": wrong type (" + std::string((*j_)[key].type_name()) + ")");
        }
    }

    template <typename Parse>
    void get_enum(const char* key, Parse parse) {
        seen_.insert(key);
        if (!j_ || !j_->contains(key)) return;
        if (!(*j_)[key].is_string()) {
            errors_.push_back(name(key) + ": expected a string");
            return;
        }
        try {
            parse((*j_)[key].get<std::string>());
        } catch (const Error& e) {
            errors_.push_back(e.what());
        }
    }

    Reader sub(const char* key) {
        seen_.insert(key);
        return Reader(j_ && j_->contains(key) ? &(*j_)[key] : nullptr, name(key), errors_);
    }

    const json* raw(const char* key) {
        seen_.insert(key);
        return j_ && j_->contains(key) ? &(*j_)[key] : nullptr;
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json* j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

void read_model(Reader r, ModelConfig& c, std::string* weights) {
    r.get_enum("backbone", [&](const std::string& s) { c.backbone = parse_backbone(s); });
    r.get("input_side", c.input_side);
    r.get("latent_depth", c.latent_depth);
    r.get("grid_w", c.grid_w);
    r.get("grid_h", c.grid_h);
    r.get("num_classes", c.num_classes);
    r.get("prototypes_per_class", c.prototypes_per_class);
    r.get("simple_channels", c.simple_channels);
    r.get("width_scale", c.width_scale);
    if (weights) r.get("backbone_weights", *weights);
}

void read_similarity(Reader r, SimilarityConfig& c) {
    r.get("epsilon", c.epsilon);
    r.get("heatmap_side", c.heatmap_side);
    r.get("bbox_percentile", c.bbox_percentile);
}

void check(std::vector<std::string>& out, const auto& fn) {
    try {
        fn();
    } catch (const Error& e) {
        out.push_back(e.what());
    }
}

}  // namespace

ojson to_json(const ModelConfig& c) {
    return ojson{{"backbone", std::string(to_string(c.backbone))},
                 {"input_side", c.input_side},
                 {"latent_depth", c.latent_depth},
                 {"grid_w", c.grid_w},
                 {"grid_h", c.grid_h},
                 {"num_classes", c.num_classes},
                 {"prototypes_per_class", c.prototypes_per_class},
                 {"simple_channels", c.simple_channels},
                 {"width_scale", c.width_scale}};
}

ojson to_json(const SimilarityConfig& c) {
    return ojson{{"epsilon", c.epsilon}, {"heatmap_side", c.heatmap_side}, {"bbox_percentile", c.bbox_percentile}};
}

ojson to_json(const RunConfig& c) {
    const auto& t = c.training;
    ojson model = to_json(c.model);
    model["backbone_weights"] = c.backbone_weights;
    ojson kinds = ojson::array();
    for (const auto& k : c.descriptors.kinds)
        kinds.push_back({{"kind", std::string(1, to_char(k.kind))}, {"magnitude", k.magnitude}});
    return ojson{
        {"model", model},
        {"similarity", to_json(c.similarity)},
        {"training",
         {{"cycles", t.cycles},
          {"extractor_epochs", t.extractor_epochs},
          {"warmup_epochs", t.warmup_epochs},
          {"head_epochs", t.head_epochs},
          {"learning_rate", t.learning_rate},
          {"head_learning_rate", t.head_learning_rate},
          {"batch_size", t.batch_size},
          {"loss_regime", std::string(to_string(t.regime))},
          {"weights",
           {{"ce", t.weights.ce}, {"cls", t.weights.cls}, {"sep", t.weights.sep}, {"l1", t.weights.l1}, {"icnn", t.weights.icnn}}},
          {"l1_head_only", t.l1_head_only},
          {"selection_fraction", t.selection_fraction},
          {"seed", t.seed},
          {"jobs", t.jobs},
          {"log_steps", t.log_steps},
          {"log_icnn_breakdowns", t.log_icnn_breakdowns}}},
        {"icnn",
         {{"neighborhood_size", t.icnn.neighborhood_size},
          {"p", t.icnn.p},
          {"q", t.icnn.q},
          {"r", t.icnn.r},
          {"log_floor", t.icnn.log_floor}}},
        {"augmentation",
         {{"enabled", t.augmentation.enabled},
          {"apply_probability", t.augmentation.apply_probability},
          {"max_rotation_deg", t.augmentation.max_rotation_deg},
          {"max_perspective", t.augmentation.max_perspective},
          {"max_scaling", t.augmentation.max_scaling},
          {"max_translation", t.augmentation.max_translation},
          {"max_padding_px", t.augmentation.max_padding_px}}},
        {"data",
         {{"manifest", c.data.manifest},
          {"test_manifest", c.data.test_manifest},
          {"train_fraction", c.data.train_fraction},
          {"split_seed", c.data.split_seed}}},
        {"output", {{"dir", c.output.dir}}},
        {"evaluation",
         {{"knn_k", c.evaluation.knn_k},
          {"knn_folds", c.evaluation.knn_folds},
          {"knn_seed", c.evaluation.knn_seed},
          {"embedder_seed", c.evaluation.embedder_seed}}},
        {"descriptors", {{"kinds", kinds}, {"compute_global", c.descriptors.compute_global}}}};
}

ModelConfig model_config_from_json(const json& j) {
    std::vector<std::string> errors;
    ModelConfig c;
    std::string ignored;
    read_model(Reader(&j, "model", errors), c, &ignored);
    if (!errors.empty()) throw ConfigError(errors.front());
    return c;
}

SimilarityConfig similarity_config_from_json(const json& j) {
    std::vector<std::string> errors;
    SimilarityConfig c;
    read_similarity(Reader(&j, "similarity", errors), c);
    if (!errors.empty()) throw ConfigError(errors.front());
    return c;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    std::vector<std::string> errors;
    {
        Reader root(&j, "", errors);
        read_model(root.sub("model"), c.model, &c.backbone_weights);
        read_similarity(root.sub("similarity"), c.similarity);
        {
            auto& t = c.training;
            Reader r = root.sub("training");
            r.get("cycles", t.cycles);
            r.get("extractor_epochs", t.extractor_epochs);
            r.get("warmup_epochs", t.warmup_epochs);
            r.get("head_epochs", t.head_epochs);
            r.get("learning_rate", t.learning_rate);
            r.get("head_learning_rate", t.head_learning_rate);
            r.get("batch_size", t.batch_size);
            r.get_enum("loss_regime", [&](const std::string& s) { t.regime = parse_regime(s); });
            {
                Reader w = r.sub("weights");
                w.get("ce", t.weights.ce);
                w.get("cls", t.weights.cls);
                w.get("sep", t.weights.sep);
                w.get("l1", t.weights.l1);
                w.get("icnn", t.weights.icnn);
            }
            r.get("l1_head_only", t.l1_head_only);
            r.get("selection_fraction", t.selection_fraction);
            r.get("seed", t.seed);
            r.get("jobs", t.jobs);
            r.get("log_steps", t.log_steps);
            r.get("log_icnn_breakdowns", t.log_icnn_breakdowns);
        }
        {
            auto& i = c.training.icnn;
            Reader r = root.sub("icnn");
            r.get("neighborhood_size", i.neighborhood_size);
            r.get("p", i.p);
            r.get("q", i.q);
            r.get("r", i.r);
            r.get("log_floor", i.log_floor);
        }
        {
            auto& a = c.training.augmentation;
            Reader r = root.sub("augmentation");
            r.get("enabled", a.enabled);
            r.get("apply_probability", a.apply_probability);
            r.get("max_rotation_deg", a.max_rotation_deg);
            r.get("max_perspective", a.max_perspective);
            r.get("max_scaling", a.max_scaling);
            r.get("max_translation", a.max_translation);
            r.get("max_padding_px", a.max_padding_px);
        }
        {
            Reader r = root.sub("data");
            r.get("manifest", c.data.manifest);
            r.get("test_manifest", c.data.test_manifest);
            r.get("train_fraction", c.data.train_fraction);
            r.get("split_seed", c.data.split_seed);
        }
        {
            Reader r = root.sub("output");
            r.get("dir", c.output.dir);
        }
        {
            Reader r = root.sub("evaluation");
            r.get("knn_k", c.evaluation.knn_k);
            r.get("knn_folds", c.evaluation.knn_folds);
            r.get("knn_seed", c.evaluation.knn_seed);
            r.get("embedder_seed", c.evaluation.embedder_seed);
        }
        {
            Reader r = root.sub("descriptors");
            r.get("compute_global", c.descriptors.compute_global);
            if (const json* kinds = r.raw("kinds")) {
                c.descriptors.kinds.clear();
                if (!kinds->is_array()) {
                    errors.push_back("descriptors.kinds: expected an array");
                } else {
                    for (const auto& k : *kinds) {
                        try {
                            const auto kind = parse_perturbation(k.at("kind").get<std::string>());
                            const double mag = k.contains("magnitude") ? k["magnitude"].get<double>()
                                                                         : Perturbation::standard(kind).magnitude;
                            c.descriptors.kinds.push_back({kind, mag});
                        } catch (const json::exception&) {
                            errors.push_back("descriptors.kinds: each entry needs {\"kind\": S|H|T|B, \"magnitude\": number}");
                        } catch (const Error& e) {
                            errors.push_back(std::string("descriptors.kinds: ") + e.what());
                        }
                    }
                }
            }
        }
    }
    if (!errors.empty()) {
        std::string msg = errors.size() == 1 ? errors.front() : "invalid configuration:";
        if (errors.size() > 1)
            for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return c;
}

std::vector<std::string> RunConfig::problems() const {
    std::vector<std::string> out;
    check(out, [&] { model.validate(); });
    check(out, [&] { training.validate(); });
    check(out, [&] { training.icnn.validate(model.prototypes_per_class, model.num_prototypes()); });
    check(out, [&] { similarity.validate(); });
    for (const auto& k : descriptors.kinds) check(out, [&] { k.validate(); });
    if (!(data.train_fraction > 0.0 && data.train_fraction <= 1.0)) out.push_back("data.train_fraction must lie in (0,1]");
    if (evaluation.knn_k < 1) out.push_back("evaluation.knn_k must be >= 1");
    if (evaluation.knn_folds < 2) out.push_back("evaluation.knn_folds must be >= 2");
    if (output.dir.empty()) out.push_back("output.dir must not be empty");
    return out;
}

void RunConfig::validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = p.size() == 1 ? p.front() : "invalid configuration:";
    if (p.size() > 1)
        for (const auto& e : p) msg += "\n  " + e;
    throw ConfigError(msg);
}

std::filesystem::path RunConfig::resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
}

void apply_env_overrides(json& j, char** envp) {
    if (!envp) return;
    const std::size_t plen = std::strlen(kEnvPrefix);
    for (char** e = envp; *e; ++e) {
        const std::string entry(*e);
        if (entry.compare(0, plen, kEnvPrefix) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        const std::string name = entry.substr(plen, eq - plen);
        const std::string value = entry.substr(eq + 1);
        const auto sep = name.find("__");
        if (sep == std::string::npos) throw ConfigError("environment override " + name + " must look like SECTION__KEY");
        auto lower = [](std::string s) {
            for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            return s;
        };
        const std::string section = lower(name.substr(0, sep)), key = lower(name.substr(sep + 2));
        json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
        j[section][key] = parsed.is_discarded() ? json(value) : parsed;
    }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, char** envp) {
    json j = json::object();
    std::filesystem::path base;
    if (path) {
        std::ifstream in(*path);
        if (!in) throw IoError("cannot open config " + path->string());
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + path->string() + ": " + e.what());
        }
        base = path->parent_path();
    }
    apply_env_overrides(j, envp);
    RunConfig c = run_config_from_json(j);
    c.base_dir = base;
    return c;
}

std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::string training_digest(const RunConfig& c) {
    const ojson j = to_json(c);
    const std::string text = ojson{{"training", j["training"]}, {"icnn", j["icnn"]}, {"augmentation", j["augmentation"]}}.dump();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

}  // namespace protopart
