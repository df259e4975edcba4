#include <doctest.h>

#include "protopart/archive.hpp"

#include <fstream>
#include <random>

using namespace protopart;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("protopart_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Model tiny_model(std::uint64_t seed) {
    ModelConfig c;
    c.input_side = 8;
    c.latent_depth = 3;
    c.grid_w = c.grid_h = 2;
    c.num_classes = 2;
    c.prototypes_per_class = 2;
    c.simple_channels = {2, 3, 2, 2};
    Model m = build_model(c);
    initialize_model(m, seed);
    m.class_names = {"a", "b"};
    m.whitening = {{0.1, 0.2, 0.3}, {0.5, 0.6, 0.7}, "train"};
    return m;
}

std::string config_error(const json& j) {
    try {
        run_config_from_json(j).validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("default config round trips through json") {
    const RunConfig c;
    const auto j = to_json(c);
    CHECK(to_json(run_config_from_json(json::parse(j.dump()))) == j);
    for (const char* section : {"model", "similarity", "training", "icnn", "augmentation", "data", "output",
                                "evaluation", "descriptors"})
        CHECK(j.contains(section));
    CHECK(j["training"]["weights"]["cls"] == 0.8);
    CHECK(c.problems().empty());
}

TEST_CASE("partial configs override defaults") {
    const auto c = run_config_from_json(json::parse(R"({"model":{"latent_depth":16},"training":{"loss_regime":"ppic","seed":9}})"));
    CHECK(c.model.latent_depth == 16);
    CHECK(c.model.grid_w == 7);
    CHECK(c.training.regime == LossRegime::PPIC);
    CHECK(c.training.seed == 9);
}

TEST_CASE("config errors name their fields") {
    const std::string regime = config_error(json::parse(R"({"training":{"loss_regime":"focal"}})"));
    CHECK(regime.find("training.loss_regime") != std::string::npos);
    CHECK(regime.find('\n') == std::string::npos);

    const std::string unknown = config_error(json::parse(R"({"model":{"depth":3}})"));
    CHECK(unknown.find("model.depth") != std::string::npos);

    const std::string many = config_error(json::parse(R"({"model":{"depth":3},"training":{"cycles":"x"},"bogus":1})"));
    CHECK(many.find("invalid configuration:") == 0);
    CHECK(many.find("model.depth") != std::string::npos);
    CHECK(many.find("training.cycles") != std::string::npos);
    CHECK(many.find("bogus") != std::string::npos);

    const std::string invariants =
        config_error(json::parse(R"({"training":{"warmup_epochs":20},"evaluation":{"knn_k":0}})"));
    CHECK(invariants.find("warmup_epochs") != std::string::npos);
    CHECK(invariants.find("knn_k") != std::string::npos);
}

TEST_CASE("environment overrides and file loading") {
    const fs::path dir = scratch("config");
    {
        std::ofstream out(dir / "run.json");
        out << R"({"data":{"manifest":"data/manifest.jsonl"},"training":{"seed":3}})";
    }
    std::string e1 = "PROTOPART_TRAINING__SEED=17", e2 = "PROTOPART_OUTPUT__DIR=elsewhere", e3 = "UNRELATED=1";
    char* env[] = {e1.data(), e2.data(), e3.data(), nullptr};
    const RunConfig c = load_run_config(dir / "run.json", env);
    CHECK(c.training.seed == 17);
    CHECK(c.output.dir == "elsewhere");
    CHECK(c.base_dir == dir);
    CHECK(c.resolve(c.data.manifest) == dir / "data/manifest.jsonl");
    CHECK(c.resolve("/abs/x") == fs::path("/abs/x"));

    CHECK_THROWS_AS(load_run_config(dir / "missing.json"), IoError);
    {
        std::ofstream out(dir / "broken.json");
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
    std::string bad = "PROTOPART_SEED=1";
    char* env2[] = {bad.data(), nullptr};
    CHECK_THROWS_AS(load_run_config(std::nullopt, env2), ConfigError);
}

TEST_CASE("training digest tracks training settings only") {
    RunConfig a, b;
    CHECK(training_digest(a) == training_digest(b));
    b.output.dir = "other";
    CHECK(training_digest(a) == training_digest(b));
    b.training.learning_rate = 0.5;
    CHECK(training_digest(a) != training_digest(b));
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("archive round trip and corruption") {
    const fs::path dir = scratch("archive");
    Archive a;
    a.meta["hello"] = "world";
    RowMatrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6.5;
    a.arrays.push_back({"x/y", m});
    a.arrays.push_back({"empty", RowMatrix(0, 4)});
    write_archive(dir / "a.ckpt", a);
    const Archive b = read_archive(dir / "a.ckpt");
    CHECK(b.meta == a.meta);
    REQUIRE(b.find("x/y"));
    CHECK(*b.find("x/y") == m);
    CHECK(b.find("empty")->cols() == 4);
    CHECK(b.find("nope") == nullptr);

    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    std::string bytes{std::istreambuf_iterator<char>(in), {}};
    CHECK(bytes.substr(0, 8) == "PPCKPT01");
    {
        std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
        out << bytes.substr(0, bytes.size() - 5);
    }
    CHECK_THROWS_AS(read_archive(dir / "trunc.ckpt"), IoError);
    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream out(dir / "magic.ckpt", std::ios::binary);
        out << bad;
    }
    CHECK_THROWS_AS(read_archive(dir / "magic.ckpt"), ValidationError);
    CHECK_THROWS_AS(read_archive(dir / "absent.ckpt"), IoError);
}

TEST_CASE("checkpoint round trip preserves predictions") {
    const fs::path dir = scratch("checkpoint");
    Model m = tiny_model(4);
    m.head.bias << 0.25, -0.5;
    m.bank.projection_meta[1] = ProjectionRecord{"img7", 1, 0, 0.125};
    CheckpointMeta meta;
    meta.cycle = 2;
    meta.phase = 3;
    meta.epoch = 5;
    meta.selection_metric = 0.75;
    meta.loss.total = 1.5;
    meta.loss.components = {1.0, 0.0, 0.0, 0.0, 0.5};
    meta.training_digest = "abc";
    meta.extra["note"] = 1;
    save_checkpoint(dir / "m.ckpt", m, meta);
    const LoadedCheckpoint l = load_checkpoint(dir / "m.ckpt");

    CHECK(l.model.extractor.params == m.extractor.params);
    CHECK(l.model.bank.tensors == m.bank.tensors);
    CHECK(l.model.head.weights == m.head.weights);
    CHECK(l.model.head.bias == m.head.bias);
    CHECK(l.model.whitening.mean == m.whitening.mean);
    CHECK(l.model.whitening.stddev == m.whitening.stddev);
    CHECK(l.model.whitening.computed_on == "train");
    CHECK(l.model.class_names == m.class_names);
    CHECK(!l.model.bank.projection_meta[0].has_value());
    REQUIRE(l.model.bank.projection_meta[1].has_value());
    CHECK(l.model.bank.projection_meta[1]->image_id == "img7");
    CHECK(l.model.bank.projection_meta[1]->w == 1);
    CHECK(l.meta.cycle == 2);
    CHECK(l.meta.epoch == 5);
    CHECK(l.meta.selection_metric == 0.75);
    CHECK(l.meta.loss.components[4] == 0.5);
    CHECK(l.meta.training_digest == "abc");
    CHECK(l.meta.extra["note"] == 1);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(3, 8, 8);
    for (auto& v : img.data) v = u(rng);
    CHECK(l.model.predict(img).logits == m.predict(img).logits);

    Archive a = checkpoint_archive(m, meta);
    for (auto& arr : a.arrays)
        if (arr.name == "bank/tensors") arr.data = RowMatrix::Zero(3, 3);
    CHECK_THROWS_AS(checkpoint_from_archive(a), ValidationError);
}

TEST_CASE("archive weight provider serves extractor parameters") {
    const Model m = tiny_model(5);
    const ArchiveWeightProvider provider(checkpoint_archive(m, {}));
    const auto& name = m.extractor.params.names[0];
    const auto& value = m.extractor.params.values[0];
    const auto hit = provider.lookup(name, static_cast<int>(value.rows()), static_cast<int>(value.cols()));
    REQUIRE(hit.has_value());
    CHECK(*hit == value);
    CHECK(!provider.lookup("missing.weight", 1, 1).has_value());

    Model fresh = build_model(m.config);
    initialize_model(fresh, 9, &provider);
    for (std::size_t i = 0; i < m.extractor.backbone_param_count(); ++i)
        CHECK(fresh.extractor.params.values[i] == m.extractor.params.values[i]);
}
