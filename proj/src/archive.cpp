#include "protopart/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace protopart {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::ostream& out, T v) {
    v = to_le(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Input {
public:
    Input(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
    template <typename T>
    T get() {
        T v{};
        bytes(reinterpret_cast<char*>(&v), sizeof(T));
        return to_le(v);
    }
    void bytes(char* dst, std::size_t n) {
        if (!in_.read(dst, static_cast<std::streamsize>(n))) throw IoError("truncated archive " + path_);
    }
    std::string string(std::size_t n) {
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

private:
    std::istream& in_;
    std::string path_;
};

RowMatrix row_vector(const auto& values) {
    RowMatrix m(1, static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = values[i];
    return m;
}

const RowMatrix& require(const Archive& a, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const RowMatrix* m = a.find(name);
    if (!m) throw ValidationError("checkpoint is missing array " + name);
    if (m->rows() != rows || m->cols() != cols)
        throw ValidationError("checkpoint array " + name + " has shape " + std::to_string(m->rows()) + "x" +
                              std::to_string(m->cols()) + ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
    return *m;
}

}  // namespace

const RowMatrix* Archive::find(const std::string& name) const noexcept {
    for (const auto& a : arrays)
        if (a.name == name) return &a.data;
    return nullptr;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write archive " + path.string());
    out.write(kArchiveMagic, 8);
    const std::string meta = archive.meta.dump();
    put<std::uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.arrays.size()));
    for (const auto& a : archive.arrays) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
        out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(a.data.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(a.data.cols()));
        for (Eigen::Index i = 0; i < a.data.size(); ++i) put<double>(out, a.data.data()[i]);
    }
    if (!out) throw IoError("failed writing archive " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open archive " + path.string());
    Input in(file, path.string());
    if (in.string(8) != std::string(kArchiveMagic, 8)) throw ValidationError(path.string() + " is not a checkpoint archive");
    Archive a;
    const auto meta_len = in.get<std::uint64_t>();
    try {
        a.meta = ordered_json::parse(in.string(meta_len));
    } catch (const json::parse_error& e) {
        throw ValidationError("checkpoint metadata is not valid JSON: " + std::string(e.what()));
    }
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveArray arr;
        arr.name = in.string(in.get<std::uint32_t>());
        const auto rows = in.get<std::uint64_t>(), cols = in.get<std::uint64_t>();
        arr.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index j = 0; j < arr.data.size(); ++j) arr.data.data()[j] = in.get<double>();
        a.arrays.push_back(std::move(arr));
    }
    return a;
}

Archive checkpoint_archive(const Model& model, const CheckpointMeta& meta) {
    Archive a;
    ordered_json proj = ordered_json::array();
    for (const auto& r : model.bank.projection_meta) {
        if (r)
            proj.push_back({{"image_id", r->image_id}, {"w", r->w}, {"h", r->h}, {"distance", r->distance}});
        else
            proj.push_back(nullptr);
    }
    ordered_json loss{{"total", meta.loss.total}};
    for (int c = 0; c < 5; ++c) loss[std::string(kComponentNames[c])] = meta.loss.components[c];
    loss["icnn_score"] = meta.loss.icnn_score;
    a.meta = ordered_json{{"format", "protopart-checkpoint"},
                          {"model_config", to_json(model.config)},
                          {"similarity", to_json(model.similarity)},
                          {"training_digest", meta.training_digest},
                          {"cycle", meta.cycle},
                          {"phase", meta.phase},
                          {"epoch", meta.epoch},
                          {"selection_metric", meta.selection_metric},
                          {"loss", loss},
                          {"projection_meta", proj},
                          {"class_names", model.class_names},
                          {"whitening_computed_on", model.whitening.computed_on},
                          {"extra", meta.extra}};
    const auto& ps = model.extractor.params;
    for (std::size_t i = 0; i < ps.size(); ++i) a.arrays.push_back({"extractor/" + ps.names[i], ps.values[i]});
    a.arrays.push_back({"bank/tensors", model.bank.tensors});
    a.arrays.push_back({"head/weights", model.head.weights});
    a.arrays.push_back({"head/bias", model.head.bias.transpose()});
    a.arrays.push_back({"whitening/mean", row_vector(model.whitening.mean)});
    a.arrays.push_back({"whitening/std", row_vector(model.whitening.stddev)});
    return a;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const CheckpointMeta& meta) {
    write_archive(path, checkpoint_archive(model, meta));
}

LoadedCheckpoint checkpoint_from_archive(const Archive& a) {
    LoadedCheckpoint out;
    try {
        const auto& m = a.meta;
        const ModelConfig cfg = model_config_from_json(json::parse(m.at("model_config").dump()));
        cfg.validate();
        out.model = build_model(cfg);
        Model& model = out.model;
        model.similarity = similarity_config_from_json(json::parse(m.at("similarity").dump()));
        model.class_names = m.at("class_names").get<std::vector<std::string>>();
        model.whitening.computed_on = m.at("whitening_computed_on").get<std::string>();

        auto& ps = model.extractor.params;
        for (std::size_t i = 0; i < ps.size(); ++i)
            ps.values[i] = require(a, "extractor/" + ps.names[i], ps.values[i].rows(), ps.values[i].cols());
        const int P = cfg.num_prototypes(), K = cfg.num_classes;
        model.bank.tensors = require(a, "bank/tensors", P, cfg.latent_depth);
        model.head.weights = require(a, "head/weights", K, P);
        model.head.bias = require(a, "head/bias", 1, K).transpose();
        const RowMatrix& mean = require(a, "whitening/mean", 1, 3);
        const RowMatrix& sd = require(a, "whitening/std", 1, 3);
        for (int c = 0; c < 3; ++c) {
            model.whitening.mean[c] = mean(0, c);
            model.whitening.stddev[c] = sd(0, c);
        }
        const auto& proj = m.at("projection_meta");
        if (proj.size() != static_cast<std::size_t>(P)) throw ValidationError("checkpoint projection_meta has wrong length");
        for (int p = 0; p < P; ++p) {
            const auto& r = proj[static_cast<std::size_t>(p)];
            if (r.is_null()) continue;
            model.bank.projection_meta[p] = ProjectionRecord{r.at("image_id").get<std::string>(), r.at("w").get<int>(),
                                                             r.at("h").get<int>(), r.at("distance").get<double>()};
        }
        model.bank.validate();

        auto& meta = out.meta;
        meta.cycle = m.at("cycle").get<int>();
        meta.phase = m.at("phase").get<int>();
        meta.epoch = m.at("epoch").get<int>();
        meta.selection_metric = m.at("selection_metric").get<double>();
        meta.training_digest = m.at("training_digest").get<std::string>();
        const auto& loss = m.at("loss");
        meta.loss.total = loss.at("total").get<double>();
        for (int c = 0; c < 5; ++c) meta.loss.components[c] = loss.at(std::string(kComponentNames[c])).get<double>();
        meta.loss.icnn_score = loss.at("icnn_score").get<double>();
        meta.extra = m.at("extra");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint metadata: ") + e.what());
    }
    return out;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_archive(read_archive(path)); }

std::optional<RowMatrix> ArchiveWeightProvider::lookup(const std::string& name, int rows, int cols) const {
    const RowMatrix* m = archive_.find("extractor/" + name);
    if (!m || m->rows() != rows || m->cols() != cols) return std::nullopt;
    return *m;
}

}  // namespace protopart
