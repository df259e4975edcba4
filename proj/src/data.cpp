#include "protopart/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

namespace protopart {

using nlohmann::json;

namespace {

ViewTag parse_view(const std::string& s, int line) {
    if (s == "surface") return ViewTag::Surface;
    if (s == "section") return ViewTag::Section;
    throw ValidationError("manifest line " + std::to_string(line) + ": view must be 'surface' or 'section'");
}

const char* view_name(ViewTag v) { return v == ViewTag::Surface ? "surface" : "section"; }

std::string required_string(const json& j, const char* key, int line) {
    if (!j.contains(key) || !j[key].is_string())
        throw ValidationError("manifest line " + std::to_string(line) + ": missing string field '" + key + "'");
    return j[key].get<std::string>();
}

}  // namespace

int DatasetManifest::label_index(const std::string& label) const {
    const auto it = std::find(class_names.begin(), class_names.end(), label);
    return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
}

std::filesystem::path DatasetManifest::resolve(const ManifestEntry& e) const {
    const std::filesystem::path p(e.image_path);
    return p.is_absolute() ? p : base_dir / p;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    int lineno = 0;
    bool explicit_classes = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        if (j.contains("class_names")) {
            if (!m.entries.empty() || explicit_classes)
                throw ValidationError("manifest line " + std::to_string(lineno) + ": class_names must be the first record");
            m.class_names = j["class_names"].get<std::vector<std::string>>();
            explicit_classes = true;
            continue;
        }
        ManifestEntry e;
        e.image_path = required_string(j, "image_path", lineno);
        e.label = required_string(j, "label", lineno);
        e.patch_id = required_string(j, "patch_id", lineno);
        e.view = j.contains("view") ? parse_view(j["view"].get<std::string>(), lineno) : ViewTag::Surface;
        m.entries.push_back(std::move(e));
    }
    if (!explicit_classes) {
        std::set<std::string> labels;
        for (const auto& e : m.entries) labels.insert(e.label);
        m.class_names.assign(labels.begin(), labels.end());
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << json{{"class_names", manifest.class_names}}.dump() << '\n';
    for (const auto& e : manifest.entries)
        out << json{{"image_path", e.image_path}, {"label", e.label}, {"view", view_name(e.view)}, {"patch_id", e.patch_id}}
                   .dump()
            << '\n';
    if (!out) throw IoError("failed writing manifest " + path.string());
}

std::vector<std::string> validate_manifest(const DatasetManifest& manifest, bool check_files) {
    std::vector<std::string> problems;
    std::set<std::string> ids;
    std::set<std::string> names(manifest.class_names.begin(), manifest.class_names.end());
    if (names.size() != manifest.class_names.size()) problems.push_back("class_names contains duplicates");
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        const std::string where = "entry " + std::to_string(i) + " (" + e.patch_id + ")";
        if (manifest.label_index(e.label) < 0) problems.push_back(where + ": unknown label '" + e.label + "'");
        if (!ids.insert(e.patch_id).second) problems.push_back(where + ": duplicate patch_id");
        if (e.image_path.empty()) problems.push_back(where + ": empty image_path");
        else if (check_files && !std::filesystem::exists(manifest.resolve(e)))
            problems.push_back(where + ": missing file " + manifest.resolve(e).string());
    }
    return problems;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const DatasetManifest& manifest,
                                                                            double train_fraction,
                                                                            std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("data.train_fraction must lie in (0,1]");
    std::vector<std::vector<std::size_t>> per_class(manifest.class_names.size());
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const int k = manifest.label_index(manifest.entries[i].label);
        if (k < 0) throw ValidationError("unknown label '" + manifest.entries[i].label + "'");
        per_class[k].push_back(i);
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train, test;
    for (auto& idx : per_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
        train.insert(train.end(), idx.begin(), idx.begin() + n_train);
        test.insert(test.end(), idx.begin() + n_train, idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

SplitResult load_and_split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed, int input_side) {
    const auto problems = validate_manifest(manifest, /*check_files=*/true);
    if (!problems.empty()) {
        std::string msg = "invalid manifest:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ValidationError(msg);
    }
    const auto [train_idx, test_idx] = split_indices(manifest, train_fraction, seed);
    auto load = [&](std::size_t i) {
        const auto& e = manifest.entries[i];
        Sample s;
        s.id = e.patch_id;
        s.label = manifest.label_index(e.label);
        s.path = manifest.resolve(e).string();
        s.image = load_png(s.path);
        if (input_side > 0 && (s.image.rows != input_side || s.image.cols != input_side))
            s.image = resize_bilinear(s.image, input_side, input_side);
        return s;
    };
    SplitResult r;
    for (auto i : train_idx) r.train.push_back(load(i));
    for (auto i : test_idx) r.test.push_back(load(i));
    if (r.test.empty()) r.warnings.push_back("train_fraction leaves the test split empty");
    return r;
}

WhiteningStats compute_whitening(const Dataset& data, std::string split_name) {
    if (data.empty()) throw DomainError("whitening statistics need at least one image");
    WhiteningStats st;
    st.computed_on = std::move(split_name);
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& s : data) {
            const int plane = s.image.plane();
            for (int i = 0; i < plane; ++i) sum += s.image.data[static_cast<std::size_t>(c) * plane + i];
            n += static_cast<std::size_t>(plane);
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (const auto& s : data) {
            const int plane = s.image.plane();
            for (int i = 0; i < plane; ++i) {
                const double d = s.image.data[static_cast<std::size_t>(c) * plane + i] - mean;
                sq += d * d;
            }
        }
        const double sd = std::sqrt(sq / static_cast<double>(n));
        if (!(sd > 0.0)) throw DomainError("channel " + std::to_string(c) + " has zero variance");
        st.mean[c] = mean;
        st.stddev[c] = sd;
    }
    return st;
}

Image whiten(const Image& image, const WhiteningStats& stats) {
    if (image.channels != 3) throw DimensionError("whiten expects an RGB image");
    Image out = image;
    const int plane = image.plane();
    for (int c = 0; c < 3; ++c) {
        const double m = stats.mean[c], inv = 1.0 / stats.stddev[c];
        for (int i = 0; i < plane; ++i) {
            double& v = out.data[static_cast<std::size_t>(c) * plane + i];
            v = (v - m) * inv;
        }
    }
    return out;
}

void AugmentationPolicy::validate() const {
    if (!(apply_probability >= 0.0 && apply_probability <= 1.0))
        throw ConfigError("augmentation.apply_probability must lie in [0,1]");
    if (max_rotation_deg < 0 || max_rotation_deg > 180) throw ConfigError("augmentation.max_rotation_deg must lie in [0,180]");
    if (max_perspective < 0 || max_perspective >= 1) throw ConfigError("augmentation.max_perspective must lie in [0,1)");
    if (max_scaling < 0 || max_scaling >= 1) throw ConfigError("augmentation.max_scaling must lie in [0,1)");
    if (max_translation < 0 || max_translation >= 1) throw ConfigError("augmentation.max_translation must lie in [0,1)");
    if (max_padding_px < 0) throw ConfigError("augmentation.max_padding_px must be >= 0");
}

AugmentDraw draw_augmentation(const AugmentationPolicy& policy, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, kAugmentKinds - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentDraw d;
    d.kind = static_cast<AugmentKind>(pick(rng));
    d.applied = unit(rng) < policy.apply_probability;
    switch (d.kind) {
    case AugmentKind::HorizontalFlip:
    case AugmentKind::VerticalFlip: break;
    case AugmentKind::Rotation: d.params[0] = (2.0 * unit(rng) - 1.0) * policy.max_rotation_deg; break;
    case AugmentKind::Perspective:
        // Inward displacement of each corner as a fraction of the side, torchvision-style.
        for (int i = 0; i < 8; ++i) d.params[i] = unit(rng) * policy.max_perspective * 0.5;
        break;
    case AugmentKind::Scaling: d.params[0] = 1.0 + (2.0 * unit(rng) - 1.0) * policy.max_scaling; break;
    case AugmentKind::Translation:
        d.params[0] = (2.0 * unit(rng) - 1.0) * policy.max_translation;
        d.params[1] = (2.0 * unit(rng) - 1.0) * policy.max_translation;
        break;
    case AugmentKind::Padding: d.params[0] = unit(rng) * policy.max_padding_px / 256.0; break;
    }
    return d;
}

namespace {

template <typename Map>
Image warp(const Image& src, Map inverse) {
    Image out(src.channels, src.rows, src.cols);
    for (int y = 0; y < src.rows; ++y)
        for (int x = 0; x < src.cols; ++x) {
            const auto [sy, sx] = inverse(static_cast<double>(y), static_cast<double>(x));
            for (int c = 0; c < src.channels; ++c) out.at(c, y, x) = sample_reflect(src, c, sy, sx);
        }
    return out;
}

// Homography taking the four points `from` onto `to` (x, y pairs), by solving the 8x8 DLT system.
Eigen::Matrix3d homography(const std::array<Eigen::Vector2d, 4>& from, const std::array<Eigen::Vector2d, 4>& to) {
    Eigen::Matrix<double, 8, 8> A;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = from[i].x(), y = from[i].y(), u = to[i].x(), v = to[i].y();
        A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
        A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }
    const Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(b);
    Eigen::Matrix3d H;
    H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    return H;
}

}  // namespace

Image apply_augmentation(const Image& image, const AugmentDraw& draw) {
    if (!draw.applied) return image;
    const double cy = (image.rows - 1) * 0.5, cx = (image.cols - 1) * 0.5;
    switch (draw.kind) {
    case AugmentKind::HorizontalFlip:
        return warp(image, [&](double y, double x) { return std::pair{y, image.cols - 1 - x}; });
    case AugmentKind::VerticalFlip:
        return warp(image, [&](double y, double x) { return std::pair{image.rows - 1 - y, x}; });
    case AugmentKind::Rotation: {
        const double a = draw.params[0] * std::numbers::pi / 180.0;
        const double ca = std::cos(a), sa = std::sin(a);
        return warp(image, [&](double y, double x) {
            const double dy = y - cy, dx = x - cx;
            return std::pair{cy + sa * dx + ca * dy, cx + ca * dx - sa * dy};
        });
    }
    case AugmentKind::Perspective: {
        const double w = image.cols - 1, h = image.rows - 1;
        const std::array<Eigen::Vector2d, 4> corners{Eigen::Vector2d(0, 0), Eigen::Vector2d(w, 0),
                                                     Eigen::Vector2d(w, h), Eigen::Vector2d(0, h)};
        const double sx[4] = {1, -1, -1, 1}, sy[4] = {1, 1, -1, -1};
        std::array<Eigen::Vector2d, 4> moved;
        for (int i = 0; i < 4; ++i)
            moved[i] = corners[i] + Eigen::Vector2d(sx[i] * draw.params[2 * i] * w, sy[i] * draw.params[2 * i + 1] * h);
        const Eigen::Matrix3d H = homography(moved, corners);  // output -> input
        return warp(image, [&](double y, double x) {
            const Eigen::Vector3d p = H * Eigen::Vector3d(x, y, 1.0);
            return std::pair{p.y() / p.z(), p.x() / p.z()};
        });
    }
    case AugmentKind::Scaling: {
        const double s = draw.params[0];
        return warp(image, [&](double y, double x) { return std::pair{cy + (y - cy) / s, cx + (x - cx) / s}; });
    }
    case AugmentKind::Translation: {
        const double ty = draw.params[1] * image.rows, tx = draw.params[0] * image.cols;
        return warp(image, [&](double y, double x) { return std::pair{y - ty, x - tx}; });
    }
    case AugmentKind::Padding: {
        const int pad = static_cast<int>(std::lround(draw.params[0] * image.rows));
        if (pad == 0) return image;
        Image padded(image.channels, image.rows + 2 * pad, image.cols + 2 * pad);
        for (int c = 0; c < image.channels; ++c)
            for (int y = 0; y < padded.rows; ++y)
                for (int x = 0; x < padded.cols; ++x)
                    padded.at(c, y, x) = sample_reflect(image, c, y - pad, x - pad);
        return resize_bilinear(padded, image.rows, image.cols);
    }
    }
    return image;
}

Image augment(const Image& image, const AugmentationPolicy& policy, std::mt19937_64& rng, AugmentDraw* trace) {
    const AugmentDraw d = draw_augmentation(policy, rng);
    if (trace) *trace = d;
    return apply_augmentation(image, d);
}

std::vector<SyntheticClassSpec> synthetic_class_specs(int num_classes) {
    if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    using T = SyntheticClassSpec::Texture;
    std::vector<SyntheticClassSpec> specs;
    const int hue_classes = num_classes <= 4 ? num_classes : num_classes - 2;
    for (int i = 0; i < hue_classes; ++i) {
        SyntheticClassSpec s;
        s.hue_deg = 360.0 * i / hue_classes;
        s.saturation = 0.6;
        s.intensity = 0.5;
        s.texture = T::FineNoise;
        s.hue_defined = true;
        s.name = "hue" + std::to_string(static_cast<int>(s.hue_deg));
        specs.push_back(s);
    }
    if (num_classes > 4) {
        specs.push_back({"striped", 45.0, 0.35, 0.55, T::Stripes, false});
        specs.push_back({"dark-coarse", 225.0, 0.15, 0.25, T::CoarseNoise, false});
    }
    return specs;
}

Image render_synthetic_image(const SyntheticClassSpec& spec, int side, std::mt19937_64& rng) {
    using T = SyntheticClassSpec::Texture;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double hue = spec.hue_deg + (2.0 * unit(rng) - 1.0) * 8.0;
    const double sat = std::clamp(spec.saturation + (2.0 * unit(rng) - 1.0) * 0.15, 0.0, 1.0);
    const double inten = spec.intensity + (2.0 * unit(rng) - 1.0) * 0.1;

    // Coarse lattice for blotchy texture, stripe orientation and phase.
    const int lattice = std::max(2, side / 6);
    RowMatrix coarse(lattice + 1, lattice + 1);
    for (Eigen::Index i = 0; i < coarse.size(); ++i) coarse.data()[i] = normal(rng);
    const double angle = unit(rng) * std::numbers::pi;
    const double phase = unit(rng) * 2.0 * std::numbers::pi;
    const double period = std::max(3.0, side / 5.0);

    Image img(3, side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            double i = inten;
            switch (spec.texture) {
            case T::FineNoise: i += 0.06 * normal(rng); break;
            case T::CoarseNoise: {
                const double gy = static_cast<double>(y) / side * lattice, gx = static_cast<double>(x) / side * lattice;
                const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
                const double fy = gy - y0, fx = gx - x0;
                const double v = coarse(y0, x0) * (1 - fy) * (1 - fx) + coarse(y0, x0 + 1) * (1 - fy) * fx +
                                 coarse(y0 + 1, x0) * fy * (1 - fx) + coarse(y0 + 1, x0 + 1) * fy * fx;
                i += 0.12 * v + 0.02 * normal(rng);
                break;
            }
            case T::Stripes: {
                const double t = (x * std::cos(angle) + y * std::sin(angle)) / period * 2.0 * std::numbers::pi;
                i += 0.2 * std::sin(t + phase) + 0.02 * normal(rng);
                break;
            }
            }
            Hsi hsi{std::fmod(hue + 4.0 * normal(rng) + 720.0, 360.0), sat, std::clamp(i, 0.0, 1.0)};
            double r, g, b;
            hsi_to_rgb(hsi, r, g, b);
            img.at(0, y, x) = r;
            img.at(1, y, x) = g;
            img.at(2, y, x) = b;
        }
    return clamp01(std::move(img));
}

DatasetManifest generate_synthetic(const std::filesystem::path& out_dir, int num_classes, int per_class, int side,
                                   std::uint64_t seed) {
    if (per_class < 1) throw ConfigError("synthetic per_class must be >= 1");
    if (side < 4) throw ConfigError("synthetic side must be >= 4");
    const auto specs = synthetic_class_specs(num_classes);
    std::filesystem::create_directories(out_dir / "images");
    DatasetManifest m;
    m.base_dir = out_dir;
    for (const auto& s : specs) m.class_names.push_back(s.name);
    std::mt19937_64 rng(seed);
    for (int k = 0; k < num_classes; ++k)
        for (int n = 0; n < per_class; ++n) {
            char id[64];
            std::snprintf(id, sizeof id, "c%d_%05d", k, n);
            const std::string rel = std::string("images/") + id + ".png";
            save_png(out_dir / rel, render_synthetic_image(specs[k], side, rng));
            m.entries.push_back({rel, specs[k].name, n % 2 == 0 ? ViewTag::Surface : ViewTag::Section, id});
        }
    write_manifest(out_dir / "manifest.jsonl", m);
    return m;
}

}  // namespace protopart
