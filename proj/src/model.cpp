#include "protopart/model.hpp"

#include <algorithm>
#include <functional>

namespace protopart {

std::string_view to_string(BackboneId id) noexcept {
    switch (id) {
    case BackboneId::SimpleCnn: return "simple-cnn";
    case BackboneId::Vgg16Like: return "vgg16-like";
    case BackboneId::Resnet50Like: return "resnet50-like";
    case BackboneId::Densenet201Like: return "densenet201-like";
    }
    return "unknown";
}

BackboneId parse_backbone(std::string_view s) {
    if (s == "simple-cnn") return BackboneId::SimpleCnn;
    if (s == "vgg16-like") return BackboneId::Vgg16Like;
    if (s == "resnet50-like") return BackboneId::Resnet50Like;
    if (s == "densenet201-like") return BackboneId::Densenet201Like;
    throw ConfigError("model.backbone: unknown backbone '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (grid_w < 1 || grid_h < 1) throw ConfigError("model.grid_w and model.grid_h must be >= 1");
    if (latent_depth < 1) throw ConfigError("model.latent_depth must be >= 1");
    if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    if (prototypes_per_class < 1) throw ConfigError("model.prototypes_per_class must be >= 1");
    if (input_side < 1) throw ConfigError("model.input_side must be >= 1");
    if (backbone == BackboneId::SimpleCnn && simple_channels.size() != 4)
        throw ConfigError("model.simple_channels must list 4 channel counts");
    for (int c : simple_channels)
        if (c < 1) throw ConfigError("model.simple_channels entries must be >= 1");
    if (!(width_scale > 0.0)) throw ConfigError("model.width_scale must be > 0");
}

void PrototypeBank::validate() const {
    if (per_class < 1 || num_classes < 1 || tensors.rows() != per_class * num_classes)
        throw ValidationError("prototype bank must hold exactly M prototypes per class");
    if (!tensors.allFinite()) throw ValidationError("prototype bank contains non-finite entries");
    if (projection_meta.size() != static_cast<std::size_t>(tensors.rows()))
        throw ValidationError("projection metadata size mismatch");
}

ClassifierHead ClassifierHead::class_identity(int num_classes, int per_class) {
    ClassifierHead head;
    const int P = num_classes * per_class;
    head.weights = RowMatrix::Zero(num_classes, P);
    for (int p = 0; p < P; ++p) head.weights(p / per_class, p) = 1.0;
    head.bias = Vector::Zero(num_classes);
    return head;
}

namespace {

int scaled(int channels, double scale) { return std::max(1, static_cast<int>(std::lround(channels * scale))); }

// Splits the total downsampling factor across `blocks` pooling stages, larger factors first.
std::vector<int> pool_schedule(int factor, int blocks) {
    std::vector<int> primes;
    for (int f = 2; factor > 1; ++f)
        while (factor % f == 0) {
            primes.push_back(f);
            factor /= f;
        }
    std::sort(primes.rbegin(), primes.rend());
    std::vector<int> pools(blocks, 1);
    for (std::size_t i = 0; i < primes.size(); ++i) pools[i % blocks] *= primes[i];
    return pools;
}

struct BackboneBuild {
    std::shared_ptr<Sequential> net;
    int out_channels = 0;
};

BackboneBuild build_simple_cnn(const ModelConfig& cfg, ParamSet& ps) {
    if (cfg.grid_w != cfg.grid_h || cfg.input_side % cfg.grid_w != 0)
        throw ConfigError("simple-cnn: input side " + std::to_string(cfg.input_side) +
                          " cannot be pooled to a " + std::to_string(cfg.grid_w) + "x" +
                          std::to_string(cfg.grid_h) + " grid");
    const auto pools = pool_schedule(cfg.input_side / cfg.grid_w, 4);
    auto net = std::make_shared<Sequential>();
    int in = 3;
    for (int b = 0; b < 4; ++b) {
        const int out = cfg.simple_channels[b];
        net->emplace<Conv2d>(ps, "backbone.block" + std::to_string(b + 1) + ".conv", in, out, 3, 1, 1);
        net->emplace<Relu>();
        net->emplace<MaxPool>(pools[b]);
        in = out;
    }
    return {net, in};
}

BackboneBuild build_vgg16(const ModelConfig& cfg, ParamSet& ps) {
    constexpr int kPool = 0;
    const int layout[] = {64, 64, kPool, 128, 128, kPool, 256, 256, 256, kPool,
                          512, 512, 512, kPool, 512, 512, 512, kPool};
    auto net = std::make_shared<Sequential>();
    int in = 3, conv = 0;
    for (int c : layout) {
        if (c == kPool) {
            net->emplace<MaxPool>(2);
            continue;
        }
        const int out = scaled(c, cfg.width_scale);
        net->emplace<Conv2d>(ps, "backbone.features.conv" + std::to_string(++conv), in, out, 3, 1, 1);
        net->emplace<Relu>();
        in = out;
    }
    return {net, in};
}

BackboneBuild build_resnet50(const ModelConfig& cfg, ParamSet& ps) {
    auto net = std::make_shared<Sequential>();
    const int stem = scaled(64, cfg.width_scale);
    net->emplace<Conv2d>(ps, "backbone.stem.conv", 3, stem, 3, 2, 1);
    net->emplace<Relu>();
    net->emplace<MaxPool>(2);
    int in = stem;
    const int counts[] = {3, 4, 6, 3};
    const int widths[] = {64, 128, 256, 512};
    for (int stage = 0; stage < 4; ++stage) {
        const int width = scaled(widths[stage], cfg.width_scale);
        const int out = 4 * width;
        for (int blk = 0; blk < counts[stage]; ++blk) {
            const int stride = (stage > 0 && blk == 0) ? 2 : 1;
            const std::string base = "backbone.layer" + std::to_string(stage + 1) + "." + std::to_string(blk);
            auto branch = std::make_unique<Sequential>();
            branch->emplace<Conv2d>(ps, base + ".conv1", in, width, 1);
            branch->emplace<Relu>();
            branch->emplace<Conv2d>(ps, base + ".conv2", width, width, 3, stride, 1);
            branch->emplace<Relu>();
            branch->emplace<Conv2d>(ps, base + ".conv3", width, out, 1);
            auto shortcut = std::make_unique<Sequential>();
            if (stride != 1 || in != out) shortcut->emplace<Conv2d>(ps, base + ".downsample", in, out, 1, stride, 0);
            net->add(std::make_unique<Residual>(std::move(branch), std::move(shortcut)));
            in = out;
        }
    }
    return {net, in};
}

BackboneBuild build_densenet201(const ModelConfig& cfg, ParamSet& ps) {
    auto net = std::make_shared<Sequential>();
    const int growth = scaled(32, cfg.width_scale);
    int in = 2 * growth;
    net->emplace<Conv2d>(ps, "backbone.stem.conv", 3, in, 3, 2, 1);
    net->emplace<Relu>();
    net->emplace<MaxPool>(2);
    const int counts[] = {6, 12, 48, 32};
    for (int b = 0; b < 4; ++b) {
        std::vector<std::unique_ptr<Sequential>> units;
        for (int u = 0; u < counts[b]; ++u) {
            const std::string base = "backbone.dense" + std::to_string(b + 1) + ".unit" + std::to_string(u);
            auto unit = std::make_unique<Sequential>();
            unit->emplace<Relu>();
            unit->emplace<Conv2d>(ps, base + ".conv1", in + u * growth, 4 * growth, 1);
            unit->emplace<Relu>();
            unit->emplace<Conv2d>(ps, base + ".conv2", 4 * growth, growth, 3, 1, 1);
            units.push_back(std::move(unit));
        }
        net->add(std::make_unique<DenseBlock>(std::move(units)));
        in += counts[b] * growth;
        if (b < 3) {
            const int out = in / 2;
            net->emplace<Relu>();
            net->emplace<Conv2d>(ps, "backbone.transition" + std::to_string(b + 1) + ".conv", in, out, 1);
            net->emplace<AvgPool>(2);
            in = out;
        }
    }
    net->emplace<Relu>();
    return {net, in};
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

LatentVolume to_latent(const Tensor& t, std::string id) {
    LatentVolume z;
    z.grid_w = t.cols;
    z.grid_h = t.rows;
    z.source_image_id = std::move(id);
    z.data.resize(t.cols * t.rows, t.channels);
    for (int w = 0; w < t.cols; ++w)
        for (int h = 0; h < t.rows; ++h)
            for (int d = 0; d < t.channels; ++d) z.data(w * t.rows + h, d) = t.at(d, h, w);
    return z;
}

}  // namespace

std::optional<RowMatrix> RandomWeightProvider::lookup(const std::string& name, int rows, int cols) const {
    RowMatrix m = RowMatrix::Zero(rows, cols);
    if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) return m;
    std::mt19937_64 rng(seed_ ^ fnv1a(name));
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

FeatureExtractor::FeatureExtractor(const ModelConfig& cfg) {
    cfg.validate();
    BackboneBuild bb;
    switch (cfg.backbone) {
    case BackboneId::SimpleCnn: bb = build_simple_cnn(cfg, params); break;
    case BackboneId::Vgg16Like: bb = build_vgg16(cfg, params); break;
    case BackboneId::Resnet50Like: bb = build_resnet50(cfg, params); break;
    case BackboneId::Densenet201Like: bb = build_densenet201(cfg, params); break;
    }
    backbone_params_ = params.size();
    auto adapter = std::make_shared<Sequential>();
    adapter->emplace<Conv2d>(params, "adapter.conv1", bb.out_channels, cfg.latent_depth, 1);
    adapter->emplace<Relu>();
    adapter->emplace<Conv2d>(params, "adapter.conv2", cfg.latent_depth, cfg.latent_depth, 1);
    adapter->emplace<Sigmoid>();

    input_ = {3, cfg.input_side, cfg.input_side};
    backbone_out_ = bb.net->output_shape(input_);
    const Shape out = adapter->output_shape(backbone_out_);
    if (out.rows != cfg.grid_h || out.cols != cfg.grid_w)
        throw ConfigError(std::string(to_string(cfg.backbone)) + " produces a " + std::to_string(out.cols) + "x" +
                          std::to_string(out.rows) + " grid, configured " + std::to_string(cfg.grid_w) + "x" +
                          std::to_string(cfg.grid_h));
    grid_w_ = cfg.grid_w;
    grid_h_ = cfg.grid_h;
    backbone_ = std::move(bb.net);
    adapter_ = std::move(adapter);
}

LatentVolume FeatureExtractor::forward(const Image& whitened, Trace* trace, std::string image_id) const {
    if (whitened.channels != input_.channels || whitened.rows != input_.rows || whitened.cols != input_.cols)
        throw DimensionError("feature extractor expects a " + std::to_string(input_.rows) + "x" +
                             std::to_string(input_.cols) + "x3 image");
    const Tensor features = backbone_->forward(params, whitened, trace ? &trace->backbone : nullptr);
    const Tensor z = adapter_->forward(params, features, trace ? &trace->adapter : nullptr);
    return to_latent(z, std::move(image_id));
}

void FeatureExtractor::backward(const Trace& trace, const RowMatrix& d_latent, ParamSet& grads) const {
    const int D = static_cast<int>(d_latent.cols());
    Tensor dz(D, grid_h_, grid_w_);
    for (int w = 0; w < grid_w_; ++w)
        for (int h = 0; h < grid_h_; ++h)
            for (int d = 0; d < D; ++d) dz.at(d, h, w) = d_latent(w * grid_h_ + h, d);
    const Tensor d_features = adapter_->backward(params, trace.adapter, dz, grads);
    backbone_->backward(params, trace.backbone, d_features, grads);
}

void FeatureExtractor::initialize_adapter(std::mt19937_64& rng) { adapter_->initialize(params, rng); }

void FeatureExtractor::initialize_backbone(std::mt19937_64& rng) { backbone_->initialize(params, rng); }

void FeatureExtractor::load_backbone(const WeightProvider& provider) {
    for (std::size_t i = 0; i < backbone_params_; ++i) {
        auto& v = params.values[i];
        auto w = provider.lookup(params.names[i], static_cast<int>(v.rows()), static_cast<int>(v.cols()));
        if (!w) throw ConfigError("pretrained weights missing parameter " + params.names[i]);
        if (w->rows() != v.rows() || w->cols() != v.cols())
            throw ConfigError("pretrained weight " + params.names[i] + " has the wrong shape");
        v = *w;
    }
}

Vector softmax(const Vector& logits) {
    const double mx = logits.maxCoeff();
    Vector e = (logits.array() - mx).exp();
    return e / e.sum();
}

int argmax(const Vector& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

Prediction classify(const LatentVolume& latent, const PrototypeBank& bank, const ClassifierHead& head,
                    const SimilarityConfig& cfg) {
    if (head.weights.cols() != bank.size() || head.weights.rows() != head.bias.size())
        throw DimensionError("classifier head shape inconsistent with prototype bank");
    Prediction pred;
    pred.similarity = similarity_maps(latent, bank, cfg);
    for (int p = 0; p < bank.size(); ++p)
        if (!std::isfinite(pred.similarity.pooled[p]))
            throw NumericalError("non-finite pooled similarity for prototype " + std::to_string(p));
    pred.logits = head.weights * pred.similarity.pooled + head.bias;
    pred.probabilities = softmax(pred.logits);
    pred.predicted_class = argmax(pred.probabilities);
    return pred;
}

Image Model::prepare(const Image& raw) const {
    const Image sized = (raw.rows == config.input_side && raw.cols == config.input_side)
                            ? raw
                            : resize_bilinear(raw, config.input_side, config.input_side);
    return whiten(sized, whitening);
}

LatentVolume Model::extract(const Image& raw, std::string image_id) const {
    return extractor.forward(prepare(raw), nullptr, std::move(image_id));
}

Prediction Model::predict(const Image& raw) const { return classify(extract(raw), bank, head, similarity); }

Model build_model(const ModelConfig& cfg) {
    Model m;
    m.config = cfg;
    m.extractor = FeatureExtractor(cfg);
    m.bank = PrototypeBank(cfg.num_classes, cfg.prototypes_per_class, cfg.latent_depth);
    m.head = ClassifierHead::class_identity(cfg.num_classes, cfg.prototypes_per_class);
    return m;
}

}  // namespace protopart
